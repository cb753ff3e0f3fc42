import unittest

import numpy as np
from scipy import stats

from coxnii.exceptions import ConfigurationError, DatasetParseError
from coxnii.stepfunctions import StepFunction
from coxnii.survival import (BernoulliCovariates, ConstantHazard, NoCensoring, PiecewiseConstantHazard,
                             RateFunctionHazard, SurvivalDataset, TrueModelSpec, UniformCensoring, UniformCovariates,
                             WeibullHazard, build_risk_sets, nelson_aalen, parse_dataset, serialize_dataset,
                             simulate_ph_data, validate_dataset)
from coxnii.utils.testing import get_arg_parser, run_tests


def _small_dataset():
    return SurvivalDataset([1.0, 2.0, 3.0], [1, 0, 1], [[0.0], [0.0], [0.0]])


def _random_dataset(n=50, p=2, seed=3):
    rng = np.random.default_rng(seed)
    time = np.round(rng.exponential(size=n), 2) + 0.01
    status = rng.integers(0, 2, size=n)
    # ties among deaths are allowed here; only the set definitions are checked
    return SurvivalDataset(time, status, rng.normal(size=(n, p)))


class TestDataset(unittest.TestCase):
    def test_construction(self):
        ds = _small_dataset()
        self.assertEqual((ds.n, ds.p, ds.n_events), (3, 1, 2))
        self.assertEqual(ds.tau, 3.0)
        self.assertEqual(ds.with_tau(5.0).tau, 5.0)
        self.assertFalse(ds.time.flags.writeable)

    def test_invalid_records(self):
        with self.assertRaises(ValueError):
            SurvivalDataset([0.0, 1.0], [1, 1], [[0.0], [1.0]])
        with self.assertRaises(ValueError):
            SurvivalDataset([1.0, 2.0], [1, 2], [[0.0], [1.0]])
        with self.assertRaises(ValueError):
            SurvivalDataset([1.0, 2.0], [1, 0], [[0.0], [np.nan]])
        with self.assertRaises(ValueError):
            SurvivalDataset([1.0, 2.0], [1, 0], [[0.0], [1.0]], tau=1.5)

    def test_max_norm(self):
        ds = SurvivalDataset([1.0, 2.0], [1, 0], [[1.0, -2.0], [0.5, 0.5]])
        self.assertEqual(ds.max_norm, 3.0)


class TestParsing(unittest.TestCase):
    def test_parse(self):
        ds = parse_dataset('time,status,z1\n1.0,1,0.5\n2.0,0,-0.5\n')
        self.assertEqual((ds.n, ds.p), (2, 1))
        np.testing.assert_array_equal(ds.time, [1.0, 2.0])
        np.testing.assert_array_equal(ds.status, [1, 0])
        np.testing.assert_array_equal(ds.covariates[:, 0], [0.5, -0.5])
        self.assertEqual(ds.tau, 2.0)
        self.assertEqual(parse_dataset('time,status,z1\n1.0,1,0.5\n', tau=4.0).tau, 4.0)

    def test_bad_status_names_row(self):
        with self.assertRaises(DatasetParseError) as ctx:
            parse_dataset('time,status,z1\n2.0,0,0.1\n1.0,2,0.5\n')
        self.assertEqual(ctx.exception.row, 2)
        self.assertIn('status must be 0 or 1', str(ctx.exception))

    def test_malformed(self):
        with self.assertRaises(DatasetParseError) as ctx:
            parse_dataset('time,status,z1\n1.0,1,abc\n')
        self.assertEqual(ctx.exception.row, 1)
        with self.assertRaises(DatasetParseError):
            parse_dataset('time,status,z1\n1.0,1\n')
        with self.assertRaises(DatasetParseError):
            parse_dataset('time,status,x\n1.0,1,0.0\n')
        with self.assertRaises(DatasetParseError):
            parse_dataset('')
        with self.assertRaises(DatasetParseError):
            parse_dataset('time,status,z1\n-1.0,1,0.0\n')

    def test_extra_field_names_row(self):
        with self.assertRaises(DatasetParseError) as ctx:
            parse_dataset('time,status,z1\n1.0,1,0.5\n2.0,0,0.1,9\n')
        self.assertEqual(ctx.exception.row, 2)
        self.assertTrue(str(ctx.exception).startswith('row 2: inconsistent column count'))
        with self.assertRaises(DatasetParseError) as ctx:
            parse_dataset('time,status,z1\n1.0,1\n')
        self.assertEqual(ctx.exception.row, 1)

    def test_round_trip(self):
        ds = _random_dataset()
        text = serialize_dataset(ds)
        again = parse_dataset(text)
        np.testing.assert_array_equal(again.time, ds.time)
        np.testing.assert_array_equal(again.status, ds.status)
        np.testing.assert_array_equal(again.covariates, ds.covariates)
        self.assertEqual(serialize_dataset(again), text)
        self.assertTrue(text.startswith('time,status,z1,z2\n'))


class TestValidation(unittest.TestCase):
    def test_tied_deaths(self):
        ds = SurvivalDataset([1.0, 1.0, 2.0], [1, 1, 0], [[0.0], [1.0], [2.0]])
        verdict = validate_dataset(ds)
        self.assertFalse(verdict)
        self.assertIn('A1', verdict.violations)

    def test_constant_covariate(self):
        ds = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 0], [[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
        verdict = validate_dataset(ds)
        self.assertFalse(verdict.passed)
        self.assertIn('A4', verdict.violations)

    def test_collinear_covariates(self):
        z = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        self.assertIn('A4', validate_dataset(SurvivalDataset([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 0], z)).violations)

    def test_passes(self):
        ds = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 0], [[0.0], [1.0], [0.5]])
        verdict = validate_dataset(ds)
        self.assertTrue(verdict)
        self.assertEqual(verdict.violations, {})

    def test_censored_tie_with_death_is_allowed(self):
        ds = SurvivalDataset([1.0, 1.0, 2.0], [1, 0, 1], [[0.0], [1.0], [0.5]])
        self.assertTrue(validate_dataset(ds))


class TestRiskSets(unittest.TestCase):
    def test_small_example(self):
        rs = build_risk_sets(_small_dataset())
        np.testing.assert_array_equal(rs.distinct_times, [1.0, 3.0])
        np.testing.assert_array_equal(rs.risk_sets[0], [0, 1, 2])
        np.testing.assert_array_equal(rs.risk_sets[1], [2])
        np.testing.assert_array_equal(rs.reduced_risk_sets[0], [1, 2])
        self.assertEqual(len(rs.reduced_risk_sets[1]), 0)
        np.testing.assert_array_equal(rs.death_sets[0], [0])
        np.testing.assert_array_equal(rs.death_index, [0, 2])

    def test_all_censored(self):
        rs = build_risk_sets(SurvivalDataset([1.0, 2.0], [0, 0], [[0.0], [1.0]]))
        self.assertEqual(rs.q, 0)
        self.assertEqual(len(rs.death_sets), 0)

    def test_deaths_precede_censorings(self):
        ds = SurvivalDataset([2.0, 2.0, 3.0], [0, 1, 1], [[0.0], [1.0], [0.5]])
        rs = build_risk_sets(ds)
        np.testing.assert_array_equal(rs.risk_sets[0], [0, 1, 2])
        np.testing.assert_array_equal(rs.reduced_risk_sets[0], [0, 2])
        self.assertEqual(rs.order[0], 1)

    def test_brute_force(self):
        ds = _random_dataset()
        rs = build_risk_sets(ds)
        records = ds.records
        uncensored = sorted({t for t, d, _ in records if d == 1})
        np.testing.assert_array_equal(rs.distinct_times, uncensored)
        for i, t in enumerate(uncensored):
            D = [j for j, (tj, dj, _) in enumerate(records) if tj == t and dj == 1]
            R = [j for j, (tj, _, _) in enumerate(records) if tj >= t]
            np.testing.assert_array_equal(rs.death_sets[i], D)
            np.testing.assert_array_equal(rs.risk_sets[i], R)
            np.testing.assert_array_equal(rs.reduced_risk_sets[i], sorted(set(R) - set(D)))
        for outer, inner in zip(rs.risk_sets, rs.risk_sets[1:]):
            self.assertTrue(set(inner) <= set(outer))

    def test_nelson_aalen(self):
        times, na = nelson_aalen(_small_dataset())
        np.testing.assert_array_equal(times, [1.0, 3.0])
        np.testing.assert_allclose(na, [1 / 3, 4 / 3])


class TestBaselines(unittest.TestCase):
    def test_inverses(self):
        y = np.array([0.1, 0.5, 2.0, 7.0])
        baselines = [
            ConstantHazard(2.0),
            WeibullHazard(scale=0.5, shape=1.7),
            PiecewiseConstantHazard(StepFunction((1.0, 2.0), (0.5, 2.0, 1.0))),
            RateFunctionHazard(lambda t: 1.0 + np.sin(t) ** 2, tau=4.0),
        ]
        for baseline in baselines:
            with self.subTest(baseline=type(baseline).__name__):
                np.testing.assert_allclose(baseline.cumulative(baseline.inverse_cumulative(y)), y, rtol=1e-8)

    def test_piecewise_cumulative(self):
        baseline = PiecewiseConstantHazard(StepFunction((1.0,), (0.5, 2.0)))
        self.assertAlmostEqual(float(baseline.cumulative(2.0)), 2.5)
        self.assertAlmostEqual(float(baseline.survival(1.0)), np.exp(-0.5))

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            ConstantHazard(0.0)
        with self.assertRaises(ConfigurationError):
            WeibullHazard(scale=1.0, shape=-1.0)
        with self.assertRaises(ConfigurationError):
            RateFunctionHazard(lambda t: 1 / t, tau=1.0)
        with self.assertRaises(ConfigurationError):
            TrueModelSpec([0.5, 0.5], ConstantHazard(1.0), NoCensoring(), UniformCovariates(1), tau=1.0)


class TestSimulation(unittest.TestCase):
    def test_deterministic(self):
        spec = TrueModelSpec([0.5, -1.0], WeibullHazard(1.0, 1.5), UniformCensoring(3.0), BernoulliCovariates(2),
                             tau=2.5)
        a, b = simulate_ph_data(spec, 200, seed=11), simulate_ph_data(spec, 200, seed=11)
        np.testing.assert_array_equal(a.time, b.time)
        np.testing.assert_array_equal(a.status, b.status)
        np.testing.assert_array_equal(a.covariates, b.covariates)
        self.assertLessEqual(a.time.max(), 2.5)
        self.assertEqual(a.tau, 2.5)
        self.assertFalse(np.array_equal(a.time, simulate_ph_data(spec, 200, seed=12).time))

    def test_null_model_is_baseline(self):
        spec = TrueModelSpec([0.0], ConstantHazard(1.0), NoCensoring(), UniformCovariates(1), tau=60.0)
        ds = simulate_ph_data(spec, 5000, seed=1)
        self.assertEqual(ds.n_events, 5000)
        self.assertGreater(stats.kstest(ds.time, 'expon').pvalue, 0.01)

    def test_censoring_fraction(self):
        spec = TrueModelSpec([0.0], ConstantHazard(1.0), UniformCensoring(2.0), UniformCovariates(1), tau=2.0)
        n = 5000
        ds = simulate_ph_data(spec, n, seed=5)
        expected = (1 - np.exp(-2.0)) / 2  # P(C < X) for X ~ Exp(1), C ~ U(0, 2)
        se = np.sqrt(expected * (1 - expected) / n)
        self.assertLess(abs(1 - ds.status.mean() - expected), 3 * se)

    def test_nelson_aalen_converges(self):
        spec = TrueModelSpec([0.0], ConstantHazard(1.0), NoCensoring(), UniformCovariates(1), tau=1.0)
        grid = np.linspace(0.0, 1.0, 2001)
        distances = []
        for n in (100, 400, 1600):
            times, na = nelson_aalen(simulate_ph_data(spec, n, seed=n))
            estimate = np.concatenate([[0.0], na])[np.searchsorted(times, grid, side='right')]
            distances.append(np.max(np.abs(estimate - grid)))
        self.assertGreater(distances[0], distances[2])
        self.assertLess(distances[2], 0.1)


if __name__ == '__main__':
    args = get_arg_parser().parse_args()
    run_tests(args, TestSimulation)
