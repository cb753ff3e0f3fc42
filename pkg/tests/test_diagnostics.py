import json
import unittest
from dataclasses import replace

import numpy as np
from scipy import stats

from coxnii.diagnostics import (BetaCheck, BvmReport, CoverageReport, Thresholds, bvm_A_check, bvm_beta_check,
                                covariance_relative_error, coverage_experiment, default_grid, density_dump, emit_report,
                                ks_statistic, ks_threshold, l1_density_distance, make_meta, marginal_ks, parse_report,
                                run_bvm_check, validate_report_dict)
from coxnii.exceptions import DomainError, NumericalError
from coxnii.frequentist import CoxModel, limit_covariance_matrix
from coxnii.posterior import BetaChain, JointDraws, NiiPosterior
from coxnii.priors import beta_process_prior
from coxnii.survival import (ConstantHazard, TrueModelSpec, UniformCensoring, UniformCovariates, simulate_ph_data)
from coxnii.utils.testing import get_arg_parser, run_tests

TRUE_MODEL = TrueModelSpec([0.5], ConstantHazard(1.0), UniformCensoring(4.0), UniformCovariates(1), tau=4.0)


def _report() -> BvmReport:
    meta = make_meta(100, 1, 7, {'family': 'beta', 'c': 1.0, 'lam': 1.0}, Thresholds())
    beta = BetaCheck(ks=[0.012], threshold=0.1, verdict=True, l1=0.03, acceptance_rate=0.41, ess=[1500.0])
    coverage = CoverageReport(n=100, replications=50, level=0.9, rate=[0.88], width=[0.7], skipped=0,
                              beta_hat_mean=[0.51], beta_hat_se=[0.02], verdict=True)
    return BvmReport(meta=meta, beta=beta, coverage=coverage)


class TestDistances(unittest.TestCase):
    def test_ks_examples(self):
        sample = np.random.default_rng(0).normal(size=50)
        self.assertEqual(ks_statistic(sample, sample), 0.0)
        self.assertAlmostEqual(ks_statistic([1.0, 2.0], [1.5, 2.5]), 0.5)
        self.assertAlmostEqual(ks_statistic([1.0, 2.0, 3.0], [10.0, 11.0]), 1.0)

    def test_ks_against_cdf(self):
        sample = np.random.default_rng(1).normal(size=5000)
        self.assertLess(ks_statistic(sample, stats.norm.cdf), 0.03)
        self.assertGreater(ks_statistic(sample + 1, stats.norm.cdf), 0.3)
        with self.assertRaises(DomainError):
            ks_statistic([], stats.norm.cdf)
        with self.assertRaises(DomainError):
            ks_statistic([1.0], [])

    def test_marginal_ks(self):
        rng = np.random.default_rng(2)
        cov = np.array([[4.0, 1.0], [1.0, 1.0]])
        x = rng.multivariate_normal(np.zeros(2), cov, size=4000)
        ks = marginal_ks(x, cov)
        self.assertEqual(len(ks), 2)
        self.assertLess(max(ks), 0.04)

    def test_l1_distance(self):
        rng = np.random.default_rng(3)
        sample = rng.normal(size=100_000)
        self.assertLess(l1_density_distance(sample, stats.norm()), 0.05)
        # 2 (2 Phi(2) - 1) for two unit normals four apart
        expected = 2 * (2 * stats.norm.cdf(2.0) - 1)
        self.assertAlmostEqual(l1_density_distance(sample, stats.norm(loc=4.0)), expected, delta=0.05)
        with self.assertRaises(DomainError):
            l1_density_distance(sample[:10], stats.norm())
        with self.assertRaises(DomainError):
            l1_density_distance(np.ones(500), stats.norm())

    def test_ks_two_sample_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=300), rng.standard_t(3, size=450)
        self.assertAlmostEqual(ks_statistic(a, b), ks_statistic(b, a), delta=1e-15)

    def test_ks_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=400), rng.normal(0.3, 1.2, size=500)
        self.assertAlmostEqual(ks_statistic(np.exp(a), np.exp(b)), ks_statistic(a, b), delta=1e-12)
        self.assertAlmostEqual(ks_statistic(a ** 3, b ** 3), ks_statistic(a, b), delta=1e-12)
        # the reference CDF transformed along with the sample
        lognormal = stats.lognorm(s=1.0).cdf
        self.assertAlmostEqual(ks_statistic(np.exp(a), lognormal), ks_statistic(a, stats.norm.cdf), delta=1e-12)

    def test_l1_invariant_under_location_scale(self):
        sample = np.random.default_rng(7).standard_t(5, size=2000)
        base = l1_density_distance(sample, stats.norm())
        for loc, scale in ((3.0, 1.0), (-2.0, 0.25), (10.0, 40.0)):
            with self.subTest(loc=loc, scale=scale):
                moved = l1_density_distance(loc + scale * sample, stats.norm(loc=loc, scale=scale))
                self.assertAlmostEqual(moved, base, delta=1e-6)

    def test_covariance_relative_error(self):
        lim = np.array([[1.0, 0.2], [0.2, 4.0]])
        self.assertEqual(covariance_relative_error(lim, lim), 0.0)
        emp = lim.copy()
        emp[0, 1] = emp[1, 0] = 0.34
        # an off-diagonal error is measured against that entry, not the diagonal scale
        self.assertAlmostEqual(covariance_relative_error(emp, lim), 0.7)
        with self.assertRaises(ValueError):
            covariance_relative_error(np.eye(3), lim)
        with self.assertRaises(NumericalError):
            covariance_relative_error(lim, np.array([[1.0, 0.0], [0.0, 1.0]]))

    def test_density_dump(self):
        frame = density_dump(np.random.default_rng(4).normal(size=500), stats.norm())
        self.assertEqual(list(frame.columns), ['grid', 'kde', 'reference'])
        self.assertTrue(np.all(np.diff(frame['grid']) > 0))
        self.assertTrue(np.all(frame['kde'] >= 0))

    def test_thresholds(self):
        self.assertAlmostEqual(ks_threshold(1600), 0.05)
        self.assertAlmostEqual(ks_threshold(6400), 0.05)
        self.assertAlmostEqual(ks_threshold(400), 0.1)
        self.assertAlmostEqual(ks_threshold(100, base=0.1), 0.4)


class TestReports(unittest.TestCase):
    def test_emit_parse_emit(self):
        report = _report()
        text = emit_report(report)
        self.assertEqual(emit_report(parse_report(text)), text)
        self.assertEqual(validate_report_dict(json.loads(text)), [])
        self.assertEqual(report.verdicts, {'beta': True, 'coverage': True})
        self.assertTrue(report.passed)

    def test_csv_format(self):
        lines = emit_report(_report(), 'csv').splitlines()
        self.assertEqual(lines[0], 'section,key,value')
        self.assertIn('beta,ks[0],0.012', lines)
        self.assertIn('meta,prior.family,"""beta"""', lines)
        with self.assertRaises(ValueError):
            emit_report(_report(), 'xml')

    def test_schema_problems(self):
        d = _report().to_dict()
        del d['meta']
        self.assertIn("missing required section 'meta'", validate_report_dict(d))
        d = _report().to_dict()
        d['beta']['ks'] = [1.5]
        self.assertIn("'beta.ks' values must lie in [0, 1]", validate_report_dict(d))
        d = _report().to_dict()
        d['coverage']['replications'] = True
        self.assertTrue(validate_report_dict(d))
        d = {'meta': _report().meta}
        self.assertIn("report needs at least one of 'beta', 'hazard', 'coverage'", validate_report_dict(d))
        self.assertEqual(validate_report_dict([]), ['report must be a JSON object'])
        with self.assertRaises(ValueError):
            parse_report('{"meta": ')
        with self.assertRaises(ValueError):
            parse_report(json.dumps({'meta': {}, 'beta': {}}))

    def test_failed_verdict(self):
        report = _report()
        report.coverage.verdict = False
        self.assertFalse(report.passed)


class TestChecks(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = simulate_ph_data(TRUE_MODEL, 100, seed=5)
        cls.prior = beta_process_prior(c=1.0, lam=1.0)

    def test_beta_check_invariant_under_linear_map(self):
        spec = TrueModelSpec([0.5, -0.3], ConstantHazard(1.0), UniformCensoring(4.0), UniformCovariates(2), tau=4.0)
        posterior = NiiPosterior(simulate_ph_data(spec, 200, seed=9), self.prior)
        fit = posterior.fit()
        cov = np.linalg.inv(fit.info_hat)
        draws = fit.beta_hat + np.random.default_rng(10).multivariate_normal(np.zeros(2), cov, size=3000) / np.sqrt(200)
        chain = BetaChain(draws=draws, log_posterior=np.zeros(len(draws)), acceptance_rate=0.3,
                          beta_hat=fit.beta_hat, seed=0)
        base = bvm_beta_check(posterior, chain, fit)

        def mapped(m):
            # beta -> M beta, so the information becomes M^-T I M^-1
            inv = np.linalg.inv(m)
            moved_fit = replace(fit, beta_hat=m @ fit.beta_hat, info_hat=inv.T @ fit.info_hat @ inv)
            moved_chain = replace(chain, draws=draws @ m.T, beta_hat=m @ fit.beta_hat)
            return bvm_beta_check(posterior, moved_chain, moved_fit)

        scaled = mapped(np.diag([3.0, 0.2]))
        np.testing.assert_allclose(scaled.ks, base.ks, atol=1e-9)
        self.assertEqual(scaled.verdict, base.verdict)
        sheared = mapped(np.array([[1.0, 2.0], [-0.5, 3.0]]))
        self.assertAlmostEqual(sheared.mahalanobis_ks, base.mahalanobis_ks, delta=1e-9)

    def test_hazard_check_uses_entrywise_error(self):
        posterior = NiiPosterior(self.dataset, self.prior)
        fit = posterior.fit()
        grid = default_grid(self.dataset)
        lim = limit_covariance_matrix(grid, CoxModel(self.dataset).limit_functionals(fit.beta_hat, fit.breslow))
        # only the variance at the last grid time is off, by 1.3^2 - 1 = 69%
        scale = np.ones(len(grid))
        scale[-1] = 1.3
        target = lim * np.outer(scale, scale)
        white = np.random.default_rng(11).normal(size=(500, len(grid)))
        white -= white.mean(axis=0)
        white = white @ np.linalg.inv(np.linalg.cholesky(np.cov(white, rowvar=False))).T
        centered = white @ np.linalg.cholesky(target).T
        A = fit.breslow(grid) + centered / np.sqrt(posterior.n)
        draws = JointDraws(betas=np.zeros((500, 1)), grid=grid, A=A)
        check = bvm_A_check(posterior, fit, draws)
        self.assertAlmostEqual(check.cov_rel_err, covariance_relative_error(target, lim), delta=1e-8)
        self.assertAlmostEqual(check.cov_rel_err, 0.69, delta=1e-6)
        self.assertLess(check.mean_gap, 1e-10)
        self.assertFalse(check.verdict)


    def test_default_grid(self):
        grid = default_grid(self.dataset)
        self.assertEqual(len(grid), 10)
        self.assertTrue(np.all(np.diff(grid) > 0) and grid[0] > 0)
        self.assertAlmostEqual(grid[-1], np.quantile(self.dataset.time[self.dataset.status == 1], 0.9))

    def test_run_bvm_check(self):
        kwargs = dict(draws=400, burn_in=100, paths=20, seed=3, epsilon=1e-2)
        report, chain, joint = run_bvm_check(self.dataset, self.prior, **kwargs)
        self.assertEqual(chain.draws.shape, (400, 1))
        self.assertEqual(joint.A.shape, (20, 10))
        d = report.to_dict()
        self.assertEqual(validate_report_dict(d), [])
        self.assertEqual(d['meta']['n'], 100)
        self.assertEqual(d['meta']['prior']['beta_prior']['family'], 'gaussian')
        for value in d['beta']['ks'] + [d['beta']['l1'], d['hazard']['mean_gap'], d['hazard']['cov_rel_err']]:
            self.assertTrue(np.isfinite(value))
        again, _, _ = run_bvm_check(self.dataset, self.prior, **kwargs)
        self.assertEqual(emit_report(again), emit_report(report))

    def test_hazard_grid_outside_event_range(self):
        posterior = NiiPosterior(self.dataset, self.prior)
        fit = posterior.fit()
        draws = JointDraws(betas=np.zeros((2, 1)), grid=np.array([0.0, 1.0]), A=np.zeros((2, 2)))
        with self.assertRaises(DomainError):
            bvm_A_check(posterior, fit, draws)

    def test_coverage_experiment(self):
        report = coverage_experiment(TRUE_MODEL, 50, 50, 0.9, seed=1, prior=self.prior, draws=200, burn_in=50,
                                     workers=1)
        self.assertEqual(report.replications, 50)
        self.assertEqual(len(report.rate), 1)
        self.assertTrue(0 <= report.rate[0] <= 1)
        self.assertGreater(report.width[0], 0)
        self.assertLessEqual(report.skipped, 50)
        with self.assertRaises(ValueError):
            coverage_experiment(TRUE_MODEL, 50, 10, 0.9, seed=1, prior=self.prior)
        with self.assertRaises(ValueError):
            coverage_experiment(TRUE_MODEL, 50, 50, 1.5, seed=1, prior=self.prior)


if __name__ == '__main__':
    args = get_arg_parser().parse_args()
    run_tests(args, TestReports)
