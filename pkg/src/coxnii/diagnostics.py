"""Empirical checks of the Bernstein-von Mises limits: distribution distances, the joint (beta, A) law and
frequentist coverage of credible intervals, plus report serialization."""
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import integrate, stats
from tqdm.auto import tqdm

from coxnii.config import get_config
from coxnii.exceptions import ConvergenceError, DomainError, MonotoneLikelihoodError, NumericalError
from coxnii.frequentist import CoxModel, FitResult, limit_covariance_matrix
from coxnii.posterior import BetaChain, GaussianBetaPrior, JointDraws, NiiPosterior
from coxnii.priors import NiiPriorSpec
from coxnii.survival import SurvivalDataset, TrueModelSpec, simulate_ph_data
from coxnii.utils.decorators import timeit_opt
from coxnii.utils.logs import get_logger

log = get_logger('diagnostics')

REFERENCE_N = 1600
L1_MIN_SAMPLE = 100
L1_GRID_POINTS = 1025
REPORT_SECTIONS = ('meta', 'beta', 'hazard', 'coverage')


# Distances

def ks_statistic(sample_a, sample_b_or_cdf) -> float:
    """Sup distance between the empirical CDF of ``sample_a`` and a second sample or an analytic CDF."""
    a = np.asarray(sample_a, dtype=float).ravel()
    if len(a) == 0:
        raise DomainError('ks_statistic needs a nonempty sample')
    if callable(sample_b_or_cdf):
        return float(stats.kstest(a, sample_b_or_cdf).statistic)
    b = np.asarray(sample_b_or_cdf, dtype=float).ravel()
    if len(b) == 0:
        raise DomainError('ks_statistic needs a nonempty sample')
    return float(stats.ks_2samp(a, b).statistic)


def _kde(sample):
    sample = np.asarray(sample, dtype=float).ravel()
    if len(sample) < L1_MIN_SAMPLE:
        raise DomainError(f'density comparison needs at least {L1_MIN_SAMPLE} draws, got {len(sample)}')
    if not np.std(sample) > 0:
        raise DomainError('sample has zero variance')
    return sample, stats.gaussian_kde(sample, bw_method='silverman')


def _l1_grid(sample, kde, reference) -> np.ndarray:
    mu, sd = float(reference.mean()), float(reference.std())
    pad = 4 * kde.factor * float(np.std(sample, ddof=1))
    lo = min(mu - 6 * sd, sample.min() - pad)
    hi = max(mu + 6 * sd, sample.max() + pad)
    return np.linspace(lo, hi, L1_GRID_POINTS)


def l1_density_distance(sample, reference) -> float:
    """L1 distance between a Silverman-bandwidth Gaussian KDE of ``sample`` and a frozen scipy distribution."""
    sample, kde = _kde(sample)
    grid = _l1_grid(sample, kde, reference)
    distance = integrate.trapezoid(np.abs(kde(grid) - reference.pdf(grid)), grid)
    return float(np.clip(distance, 0.0, 2.0))


def density_dump(sample, reference) -> pd.DataFrame:
    """Grid, KDE and reference density, for external plotting."""
    sample, kde = _kde(sample)
    grid = _l1_grid(sample, kde, reference)
    return pd.DataFrame({'grid': grid, 'kde': kde(grid), 'reference': reference.pdf(grid)})


def ks_threshold(n: int, base: float = 0.05) -> float:
    """KS threshold calibrated at n = 1600 and widened as 1/sqrt(n) below it."""
    return base * max(1.0, np.sqrt(REFERENCE_N / n))


def default_grid(dataset: SurvivalDataset, size: int = 10) -> np.ndarray:
    event_times = dataset.time[dataset.status == 1]
    if len(event_times) == 0:
        raise DomainError('no uncensored observations to place a time grid on')
    upper = float(np.quantile(event_times, 0.9))
    return np.linspace(0.0, upper, size + 1)[1:]


def marginal_ks(x: np.ndarray, cov: np.ndarray) -> list[float]:
    """Per-coordinate KS of rows of ``x`` against the N(0, cov) marginals."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return [ks_statistic(x[:, k], stats.norm(scale=np.sqrt(cov[k, k])).cdf) for k in range(x.shape[1])]


def covariance_relative_error(emp, lim) -> float:
    """Largest entrywise |emp - lim| / |lim|."""
    emp, lim = np.atleast_2d(emp), np.atleast_2d(lim)
    if emp.shape != lim.shape:
        raise ValueError(f'covariance shapes differ: {emp.shape} vs {lim.shape}')
    if not np.all(np.abs(lim) > 0):
        raise NumericalError('limiting covariance has zero entries on the grid')
    return float(np.max(np.abs(emp - lim) / np.abs(lim)))


# Reports

@dataclass
class Thresholds:
    ks: float = 0.05
    cov_rel_err: float = 0.15
    mean_gap_factor: float = 5.0


@dataclass
class BetaCheck:
    ks: list[float]
    threshold: float
    verdict: bool
    l1: Optional[float] = None
    mahalanobis_ks: Optional[float] = None
    acceptance_rate: Optional[float] = None
    ess: Optional[list[float]] = None


@dataclass
class HazardCheck:
    grid: list[float]
    mean_gap: float
    mean_gap_bound: float
    cov_rel_err: float
    cov_threshold: float
    verdict: bool


@dataclass
class CoverageReport:
    n: int
    replications: int
    level: float
    rate: list[float]
    width: list[float]
    skipped: int
    beta_hat_mean: list[float]
    beta_hat_se: list[float]
    verdict: bool


@dataclass
class BvmReport:
    meta: dict
    beta: Optional[BetaCheck] = None
    hazard: Optional[HazardCheck] = None
    coverage: Optional[CoverageReport] = None

    @property
    def verdicts(self) -> dict[str, bool]:
        return {name: getattr(self, name).verdict for name in REPORT_SECTIONS[1:] if getattr(self, name) is not None}

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        d = {'meta': self.meta}
        for name in REPORT_SECTIONS[1:]:
            section = getattr(self, name)
            if section is not None:
                d[name] = asdict(section)
        return _plain(d)


def _plain(obj):
    """Convert numpy scalars and arrays to JSON-native types, keeping key order."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def make_meta(n: int, p: int, seed: int, prior: dict, thresholds: Thresholds, **extra) -> dict:
    meta = {'n': n, 'p': p, 'seed': seed, 'prior': prior, 'thresholds': asdict(thresholds)}
    meta.update(extra)
    return _plain(meta)


# Checks

def _require_converged(fit: FitResult):
    if not fit.converged:
        raise ConvergenceError(f'partial-likelihood fit did not converge (|grad|={fit.gradient_norm:.2e})')


def bvm_beta_check(posterior: NiiPosterior, chain: BetaChain, fit: FitResult,
                   thresholds: Optional[Thresholds] = None) -> BetaCheck:
    """Compare sqrt(n)(beta - beta_hat) draws with N(0, I_hat^{-1})."""
    _require_converged(fit)
    thresholds = Thresholds() if thresholds is None else thresholds
    n, p = posterior.n, posterior.dataset.p
    x = np.sqrt(n) * (chain.draws - fit.beta_hat)
    try:
        cov = np.linalg.inv(fit.info_hat)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f'information matrix is singular: {fit.info_hat.tolist()}') from e
    ks = marginal_ks(x, cov)
    threshold = ks_threshold(n, thresholds.ks)
    l1 = mahalanobis = None
    if p == 1:
        l1 = l1_density_distance(x[:, 0], stats.norm(scale=np.sqrt(cov[0, 0])))
    else:
        radius = np.einsum('ij,jk,ik->i', x, fit.info_hat, x)
        mahalanobis = ks_statistic(radius, stats.chi2(p).cdf)
    statistics = ks + ([mahalanobis] if mahalanobis is not None else [])
    check = BetaCheck(ks=ks, threshold=threshold, verdict=bool(max(statistics) < threshold), l1=l1,
                      mahalanobis_ks=mahalanobis, acceptance_rate=chain.acceptance_rate,
                      ess=[float(v) for v in chain.effective_sample_size()] if len(chain.draws) >= 20 else None)
    log.info(f'beta check: ks={np.round(ks, 4).tolist()} threshold={threshold:.4f} verdict={check.verdict}')
    return check


def bvm_A_check(posterior: NiiPosterior, fit: FitResult, draws: JointDraws,
                thresholds: Optional[Thresholds] = None) -> HazardCheck:
    """Posterior mean gap and covariance of sqrt(n)(A - A_hat) on the grid against the limiting covariance."""
    _require_converged(fit)
    thresholds = Thresholds() if thresholds is None else thresholds
    grid = np.asarray(draws.grid, dtype=float)
    times = posterior.risk_sets.distinct_times
    if len(times) == 0 or np.any(grid <= 0) or np.any(grid > times[-1]):
        raise DomainError(f'grid must lie in (0, {times[-1] if len(times) else 0}], the range of event times')
    n = posterior.n
    A_hat = fit.breslow(grid)
    mean_gap = float(np.max(np.abs(draws.A.mean(axis=0) - A_hat)))
    centered = np.sqrt(n) * (draws.A - A_hat)
    emp = np.atleast_2d(np.cov(centered, rowvar=False))
    fn = CoxModel(posterior.dataset).limit_functionals(fit.beta_hat, fit.breslow)
    lim = limit_covariance_matrix(grid, fn)
    cov_rel_err = covariance_relative_error(emp, lim)
    bound = thresholds.mean_gap_factor / n
    check = HazardCheck(grid=grid.tolist(), mean_gap=mean_gap, mean_gap_bound=bound, cov_rel_err=cov_rel_err,
                        cov_threshold=thresholds.cov_rel_err,
                        verdict=bool(mean_gap <= bound and cov_rel_err <= thresholds.cov_rel_err))
    log.info(f'hazard check: mean gap {mean_gap:.3g} (bound {bound:.3g}), covariance error {cov_rel_err:.3f}')
    return check


@timeit_opt
def run_bvm_check(dataset: SurvivalDataset, prior: NiiPriorSpec, draws: int = 20000, burn_in: int = 2000,
                  paths: int = 2000, seed: int = 0, grid=None, thresholds: Optional[Thresholds] = None,
                  log_prior: Optional[Callable] = None, epsilon: Optional[float] = None,
                  meta_extra: Optional[dict] = None) -> tuple[BvmReport, BetaChain, Optional[JointDraws]]:
    """Fit, sample and check both the beta and (when ``paths`` > 0) the hazard limits on one dataset."""
    thresholds = Thresholds() if thresholds is None else thresholds
    log_prior = GaussianBetaPrior() if log_prior is None else log_prior
    posterior = NiiPosterior(dataset, prior, log_prior)
    fit = posterior.fit()
    chain_seed, path_seed = np.random.SeedSequence(seed).generate_state(2)
    chain = posterior.sample_beta_posterior(draws, burn_in=burn_in, seed=int(chain_seed), fit=fit)
    beta_check = bvm_beta_check(posterior, chain, fit, thresholds)
    joint = hazard_check = None
    if paths > 0:
        grid = default_grid(dataset) if grid is None else np.asarray(grid, dtype=float)
        joint = posterior.joint_draws(chain, grid, paths, epsilon=epsilon, seed=int(path_seed))
        hazard_check = bvm_A_check(posterior, fit, joint, thresholds)
    prior_desc = prior.describe()
    if hasattr(log_prior, 'describe'):
        prior_desc['beta_prior'] = log_prior.describe()
    meta = make_meta(dataset.n, dataset.p, seed, prior_desc, thresholds, **(meta_extra or {}))
    return BvmReport(meta=meta, beta=beta_check, hazard=hazard_check), chain, joint


# Coverage

@dataclass(frozen=True)
class _Replication:
    spec: TrueModelSpec
    prior: NiiPriorSpec
    n: int
    level: float
    draws: int
    burn_in: int
    data_seed: int
    chain_seed: int
    prior_scale: float


def _coverage_replication(job: _Replication) -> Optional[dict]:
    dataset = simulate_ph_data(job.spec, job.n, job.data_seed)
    posterior = NiiPosterior(dataset, job.prior, GaussianBetaPrior(job.prior_scale))
    try:
        fit = posterior.fit()
    except (MonotoneLikelihoodError, ConvergenceError) as e:
        log.debug(f'replication with data seed {job.data_seed} skipped: {e}')
        return None
    chain = posterior.sample_beta_posterior(job.draws, burn_in=job.burn_in, seed=job.chain_seed, fit=fit)
    lo, hi = chain.credible_interval(job.level)
    return {
        'covered': ((lo <= job.spec.beta0) & (job.spec.beta0 <= hi)).tolist(),
        'width': (hi - lo).tolist(),
        'beta_hat': fit.beta_hat.tolist(),
    }


@timeit_opt
def coverage_experiment(spec: TrueModelSpec, n: int, replications: int, level: float, seed: int,
                        prior: NiiPriorSpec, draws: int = 2000, burn_in: int = 500,
                        workers: Optional[int] = None) -> CoverageReport:
    """Simulate, fit and sample ``replications`` times; report how often the credible intervals cover beta0.

    Replication k uses the k-th child of ``np.random.SeedSequence(seed)``, whose first two state words seed the
    data and the chain, so results do not depend on the number of workers.
    """
    if replications < 50:
        raise ValueError(f'coverage needs at least 50 replications, got {replications}')
    if not 0 < level < 1:
        raise ValueError(f'level must lie in (0, 1), got {level}')
    workers = get_config().workers if workers is None else workers
    prior_scale = get_config().beta_prior_scale
    jobs = []
    for child in np.random.SeedSequence(seed).spawn(replications):
        data_seed, chain_seed = child.generate_state(2)
        jobs.append(_Replication(spec, prior, n, level, draws, burn_in, int(data_seed), int(chain_seed),
                                 prior_scale))

    show = get_config().show_progress(replications * (draws + burn_in))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_coverage_replication, jobs), total=replications, desc='Coverage',
                                disable=not show))
    else:
        results = [_coverage_replication(job) for job in tqdm(jobs, desc='Coverage', disable=not show)]

    done = [r for r in results if r is not None]
    skipped = replications - len(done)
    if skipped:
        log.warning(f'{skipped} of {replications} replications skipped (monotone likelihood or no convergence)')
    if not done:
        raise NumericalError('every coverage replication failed to produce a finite MLE')
    covered = np.array([r['covered'] for r in done], dtype=float)
    widths = np.array([r['width'] for r in done])
    beta_hats = np.array([r['beta_hat'] for r in done])
    rate = covered.mean(axis=0)
    band = 3 * np.sqrt(level * (1 - level) / len(done))
    report = CoverageReport(
        n=n, replications=replications, level=level, rate=rate.tolist(), width=widths.mean(axis=0).tolist(),
        skipped=skipped, beta_hat_mean=beta_hats.mean(axis=0).tolist(),
        beta_hat_se=(beta_hats.std(axis=0, ddof=1) / np.sqrt(len(done))).tolist(),
        verdict=bool(np.all(np.abs(rate - level) <= band)),
    )
    log.info(f'coverage at level {level}: {np.round(rate, 3).tolist()} over {len(done)} replications')
    return report


# Serialization

def emit_report(report: BvmReport, fmt: str = 'json') -> str:
    d = report.to_dict()
    if fmt == 'json':
        return json.dumps(d, indent=2) + '\n'
    elif fmt == 'csv':
        rows = []
        for section, content in d.items():
            for key, value in _flatten(content):
                rows.append({'section': section, 'key': key, 'value': json.dumps(value)})
        buf = io.StringIO()
        pd.DataFrame(rows, columns=['section', 'key', 'value']).to_csv(buf, index=False, lineterminator='\n')
        return buf.getvalue()
    raise ValueError(f"format must be 'json' or 'csv', got '{fmt}'")


def _flatten(d: dict, prefix: str = ''):
    for key, value in d.items():
        name = f'{prefix}{key}'
        if isinstance(value, dict):
            yield from _flatten(value, prefix=f'{name}.')
        elif isinstance(value, list) and value and not isinstance(value[0], (dict, list)):
            for i, v in enumerate(value):
                yield f'{name}[{i}]', v
        else:
            yield name, value


_SCHEMA = {
    'meta': {'n': int, 'p': int, 'seed': int, 'prior': dict, 'thresholds': dict},
    'beta': {'ks': list, 'threshold': float, 'verdict': bool},
    'hazard': {'grid': list, 'mean_gap': float, 'mean_gap_bound': float, 'cov_rel_err': float,
               'cov_threshold': float, 'verdict': bool},
    'coverage': {'n': int, 'replications': int, 'level': float, 'rate': list, 'width': list, 'skipped': int,
                 'verdict': bool},
}


def validate_report_dict(d: dict) -> list[str]:
    """Problems found when checking a report dict against the documented schema (empty when valid)."""
    problems = []
    if not isinstance(d, dict):
        return ['report must be a JSON object']
    unknown = set(d) - set(REPORT_SECTIONS)
    if unknown:
        problems.append(f'unknown top-level keys: {sorted(unknown)}')
    if 'meta' not in d:
        problems.append("missing required section 'meta'")
    if not any(section in d for section in REPORT_SECTIONS[1:]):
        problems.append("report needs at least one of 'beta', 'hazard', 'coverage'")
    for section, fields_ in _SCHEMA.items():
        if section not in d:
            continue
        content = d[section]
        if not isinstance(content, dict):
            problems.append(f"section '{section}' must be an object")
            continue
        for key, typ in fields_.items():
            if key not in content:
                problems.append(f"'{section}.{key}' is missing")
            elif typ is float and not (isinstance(content[key], (int, float)) and not isinstance(content[key], bool)):
                problems.append(f"'{section}.{key}' must be a number")
            elif typ is not float and (not isinstance(content[key], typ) or
                                       (typ is int and isinstance(content[key], bool))):
                problems.append(f"'{section}.{key}' must be of type {typ.__name__}")
    if isinstance(d.get('beta'), dict):
        ks = d['beta'].get('ks', [])
        if isinstance(ks, list) and any(not 0 <= v <= 1 for v in ks):
            problems.append("'beta.ks' values must lie in [0, 1]")
        l1 = d['beta'].get('l1')
        if l1 is not None and not 0 <= l1 <= 2:
            problems.append("'beta.l1' must lie in [0, 2]")
    if isinstance(d.get('coverage'), dict):
        rate = d['coverage'].get('rate', [])
        if isinstance(rate, list) and any(not 0 <= v <= 1 for v in rate):
            problems.append("'coverage.rate' values must lie in [0, 1]")
    return problems


def parse_report(text: str) -> BvmReport:
    """Inverse of ``emit_report(report, 'json')``."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f'report is not valid JSON: {e}') from e
    problems = validate_report_dict(d)
    if problems:
        raise ValueError(f'report does not match the schema: {"; ".join(problems)}')
    return BvmReport(
        meta=d['meta'],
        beta=BetaCheck(**d['beta']) if 'beta' in d else None,
        hazard=HazardCheck(**d['hazard']) if 'hazard' in d else None,
        coverage=CoverageReport(**d['coverage']) if 'coverage' in d else None,
    )
