import json

import numpy as np
import pytest

from value_gradient_iteration import cli
from value_gradient_iteration.baselines import RelaxationSpec
from value_gradient_iteration.exceptions import SolverError

SMALL = '{"n": 4, "m": 2}'


def run(tmp_path, *extra):
    return cli.main(['run', '--problem', 'box-lqr', '--params', SMALL, '--out', str(tmp_path), *extra])


def test_zero_iterations_report_the_initial_policy(tmp_path, capsys):
    assert run(tmp_path, '--method', 'vgi', '--iters', '0', '--eval-steps', '200') == cli.EXIT_OK
    lines = (tmp_path / 'box-lqr_vgi_seed0' / 'history.csv').read_text().splitlines()
    rows = [line for line in lines if not line.startswith('#')]
    assert len(rows) == 2
    assert rows[1].startswith('0,0,')
    assert 'Final average cost' in capsys.readouterr().out


def test_run_with_lower_bound_and_symmetry(tmp_path):
    code = run(tmp_path, '--method', 'vgi', '--iters', '1', '--samples', '10', '--traj', '2',
               '--lower-bound', 'on', '--symmetric', '--eval-steps', '100')
    assert code == cli.EXIT_OK
    metadata = json.loads((tmp_path / 'box-lqr_vgi_seed0' / 'metadata.json').read_text())
    assert metadata['config']['horizon'] == 5
    assert metadata['config']['fit']['symmetric'] is True


@pytest.mark.parametrize('extra', [
    ('--method', 'vgi', '--horizon', '30'),
    ('--method', 'fvi', '--samples', '10', '--traj', '3'),
    ('--method', 'vgi', '--rho', '1.5'),
    ('--method', 'fvi', '--literal-scaling'),
])
def test_invalid_combinations_are_usage_errors(tmp_path, extra, capsys):
    assert run(tmp_path, *extra) == cli.EXIT_USAGE
    assert capsys.readouterr().out.startswith('Error:')


@pytest.mark.parametrize('argv', [
    ['run', '--problem', 'box-lqr', '--method', 'cocp'],
    ['run', '--problem', 'box-lqr', '--method', 'vgi', '--params', '[1, 2]'],
    ['run', '--problem', 'box-lqr', '--method', 'vgi', '--lower-bound', 'yes'],
    ['evaluate', '--problem', 'box-lqr'],
])
def test_argument_errors_exit_with_usage(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == cli.EXIT_USAGE


def test_bound_then_evaluate(tmp_path, capsys):
    bound = tmp_path / 'bound.json'
    assert cli.main(['bound', '--problem', 'box-lqr', '--params', SMALL, '--out', str(bound)]) == cli.EXIT_OK
    capsys.readouterr()
    assert cli.main(['bound', '--problem', 'box-lqr', '--params', SMALL, '--compare', str(bound)]) == cli.EXIT_OK
    checks = json.loads(capsys.readouterr().out)
    assert checks['compare_dominates_bound'] and checks['bound_dominates_compare']

    argv = ['evaluate', '--problem', 'box-lqr', '--params', SMALL, '--value', str(bound),
            '--steps', '300', '--seed', '4']
    assert cli.main(argv) == cli.EXIT_OK
    first = capsys.readouterr().out
    assert cli.main(argv) == cli.EXIT_OK
    assert capsys.readouterr().out == first
    assert json.loads(first)['avg_cost_stderr'] >= 0


def test_mpc_literal_scaling_reaches_the_policy(tmp_path):
    bound = tmp_path / 'bound.json'
    assert cli.main(['bound', '--problem', 'box-lqr', '--params', SMALL, '--out', str(bound)]) == cli.EXIT_OK
    rows = {}
    for name, extra in (('plain', ()), ('scaled', ('--literal-scaling',))):
        out = tmp_path / name
        code = cli.main(['run', '--problem', 'box-lqr', '--params', SMALL, '--out', str(out), '--method', 'mpc',
                         '--horizon', '3', '--terminal', str(bound), '--eval-steps', '100', *extra])
        assert code == cli.EXIT_OK
        metadata = json.loads((out / 'box-lqr_mpc_seed0' / 'metadata.json').read_text())
        assert metadata['literal_scaling'] is (name == 'scaled')
        lines = (out / 'box-lqr_mpc_seed0' / 'history.csv').read_text().splitlines()
        rows[name] = [line for line in lines if not line.startswith('#')][1]
    assert rows['plain'] != rows['scaled']


def test_evaluate_usage_errors(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text('not json')
    base = ['evaluate', '--problem', 'box-lqr', '--params', SMALL, '--value', str(bad)]
    assert cli.main(base + ['--steps', '0']) == cli.EXIT_USAGE
    assert cli.main(base + ['--steps', '10']) == cli.EXIT_USAGE


def test_numerical_failures_exit_with_three(tmp_path, monkeypatch):
    def fail(self, *args, **kwargs):
        raise SolverError('Policy solve failed')

    monkeypatch.setattr(cli.ExperimentRunner, 'run', fail)
    assert run(tmp_path, '--method', 'vgi') == cli.EXIT_NUMERICAL


def test_singular_relaxation_in_bound_exits_with_three(tmp_path, monkeypatch, capsys):
    # a penalty cancelling Quu = I leaves the relaxed cost singular in u
    monkeypatch.setattr(RelaxationSpec, 'penalty', lambda self, m: (-np.eye(m), np.zeros(m)))
    argv = ['bound', '--problem', 'box-lqr', '--params', SMALL, '--out', str(tmp_path / 'bound.json')]
    assert cli.main(argv) == cli.EXIT_NUMERICAL
    assert 'not positive definite' in capsys.readouterr().out
    assert not (tmp_path / 'bound.json').exists()
