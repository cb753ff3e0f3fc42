import json
import shutil
import unittest
from pathlib import Path

import pandas as pd
from click.testing import CliRunner

from coxnii.cli import EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, cli, main
from coxnii.diagnostics import validate_report_dict
from coxnii.utils.testing import get_arg_parser, run_tests

TEST_LOCAL_DIR = Path('_tmp_cli_test_dir_')


class TestCli(unittest.TestCase):
    def setUp(self):
        TEST_LOCAL_DIR.mkdir(exist_ok=True)

    def tearDown(self):
        if TEST_LOCAL_DIR.exists():
            shutil.rmtree(TEST_LOCAL_DIR)

    def _path(self, name) -> str:
        return str(TEST_LOCAL_DIR / name)

    def _write(self, name, text) -> str:
        path = TEST_LOCAL_DIR / name
        path.write_text(text)
        return str(path)

    def _small_config(self, n=100) -> str:
        return self._write('run.json', json.dumps({'simulation': {'n': n, 'seed': 4}, 'prior': {'epsilon': 0.01}}))

    def test_simulate_then_fit(self):
        data = self._path('data.csv')
        self.assertEqual(main(['simulate', '--n', '200', '--beta0', '0.5', '--beta0', '-0.5', '--seed', '1',
                               '--out', data]), EXIT_OK)
        frame = pd.read_csv(data)
        self.assertEqual(list(frame.columns), ['time', 'status', 'z1', 'z2'])
        self.assertEqual(len(frame), 200)
        out = self._path('fit.json')
        self.assertEqual(main(['fit', '--data', data, '--out', out]), EXIT_OK)
        result = json.loads(Path(out).read_text())
        self.assertTrue(result['converged'])
        self.assertEqual(len(result['beta_hat']), 2)
        self.assertEqual(len(result['info_hat']), 4)

    def test_simulate_to_stdout(self):
        runner = CliRunner()
        first = runner.invoke(cli, ['simulate', '--n', '5', '--seed', '2'])
        second = runner.invoke(cli, ['simulate', '--n', '5', '--seed', '2'])
        self.assertEqual(first.exit_code, 0, first.output)
        self.assertEqual(first.output.splitlines()[0], 'time,status,z1')
        self.assertEqual(len(first.output.splitlines()), 6)
        self.assertEqual(first.output, second.output)

    def test_monotone_likelihood(self):
        data = self._write('monotone.csv', 'time,status,z1\n1,1,1\n2,1,0\n')
        self.assertEqual(main(['fit', '--data', data, '--out', self._path('fit.json')]), EXIT_NUMERICAL)

    def test_invalid_inputs(self):
        tied = self._write('tied.csv', 'time,status,z1\n1,1,0.5\n1,1,-0.5\n2,0,1\n')
        self.assertEqual(main(['fit', '--data', tied]), EXIT_INVALID)
        malformed = self._write('bad.csv', 'time,status,z1\n1,2,0.5\n')
        self.assertEqual(main(['fit', '--data', malformed]), EXIT_INVALID)
        config = self._write('bad.json', json.dumps({'chain': {'thinning': 2}}))
        self.assertEqual(main(['fit', '--config', config]), EXIT_INVALID)

    def test_usage_and_io_errors(self):
        self.assertEqual(main(['fit', '--no-such-flag']), EXIT_USAGE)
        self.assertEqual(main(['resample']), EXIT_USAGE)
        self.assertEqual(main(['posterior', '--family', 'dirichlet']), EXIT_USAGE)
        self.assertEqual(main(['fit', '--data', self._path('missing.csv')]), EXIT_IO)
        self.assertEqual(main(['fit', '--config', self._path('missing.json')]), EXIT_IO)
        self.assertEqual(main(['--help']), EXIT_OK)

    def test_posterior(self):
        out, draws_out, paths_out = self._path('summary.json'), self._path('draws.csv'), self._path('paths.csv')
        code = main(['posterior', '--config', self._small_config(), '--draws', '300', '--burn-in', '50',
                     '--paths', '4', '--seed', '9', '--out', out, '--draws-out', draws_out, '--paths-out', paths_out])
        self.assertEqual(code, EXIT_OK)
        summary = json.loads(Path(out).read_text())
        for key in ('n', 'p', 'seed', 'prior', 'simulation', 'beta_hat', 'posterior_mean', 'credible_interval',
                    'acceptance_rate', 'grid', 'A_mean_at_posterior_mean', 'A_mean'):
            self.assertIn(key, summary)
        self.assertEqual(summary['n'], 100)
        self.assertEqual(len(summary['grid']), 10)
        ci = summary['credible_interval']
        self.assertLess(ci['lower'][0], ci['upper'][0])
        self.assertEqual(list(pd.read_csv(draws_out).columns), ['draw', 'beta_1'])
        paths = pd.read_csv(paths_out)
        self.assertEqual(list(paths.columns), ['draw', 't', 'A'])
        self.assertEqual(len(paths), 40)

    def test_bvm_check_is_deterministic(self):
        config = self._small_config()
        args = ['bvm-check', '--config', config, '--draws', '300', '--burn-in', '50', '--paths', '5', '--seed', '3',
                '--no-assert']
        first, second = self._path('first.json'), self._path('second.json')
        self.assertEqual(main(args + ['--out', first]), EXIT_OK)
        self.assertEqual(main(args + ['--out', second]), EXIT_OK)
        self.assertEqual(Path(first).read_text(), Path(second).read_text())
        report = json.loads(Path(first).read_text())
        self.assertEqual(validate_report_dict(report), [])
        self.assertIn('hazard', report)
        csv_out = self._path('report.csv')
        self.assertEqual(main(args + ['--format', 'csv', '--out', csv_out]), EXIT_OK)
        self.assertEqual(Path(csv_out).read_text().splitlines()[0], 'section,key,value')

    def test_coverage(self):
        out = self._path('coverage.json')
        code = main(['coverage', '--n', '50', '--replications', '50', '--draws', '200', '--burn-in', '50',
                     '--seed', '2', '--no-assert', '--out', out])
        self.assertEqual(code, EXIT_OK)
        report = json.loads(Path(out).read_text())
        self.assertEqual(validate_report_dict(report), [])
        self.assertEqual(report['coverage']['replications'], 50)
        self.assertEqual(report['meta']['simulation']['n'], 50)


if __name__ == '__main__':
    args = get_arg_parser().parse_args()
    run_tests(args, TestCli)
