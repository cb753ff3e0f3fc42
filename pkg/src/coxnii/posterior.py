"""Exact posterior of (beta, A) under an NII prior on the baseline cumulative hazard.

Given beta, the posterior of A is again neutral to the right: it has a fixed jump at every uncensored time t_i
whose size has density proportional to

    prod_{j in D(t_i)} (1 - (1 - x)^{w_j}) (1 - x)^{sum_{j in R+(t_i)} w_j} g_{t_i}(x) / x,   w_j = exp(beta'Z_j),

and a continuous part with Levy density (1 - x)^{sum_{j in R(t)} w_j} g_t(x) lambda(t) / x. The marginal posterior
of beta is proportional to exp(-rho_n(beta)) prod_i (n lambda(t_i) Z_i(beta)) pi(beta).
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import integrate, special, stats
from tqdm.auto import tqdm

from coxnii import quadrature as quad
from coxnii.config import get_config
from coxnii.exceptions import ConvergenceError, DomainError, NumericalError
from coxnii.frequentist import CoxModel, FitResult
from coxnii.priors import INTEGRATORS, HazardPath, NiiPriorSpec, sample_levy_path
from coxnii.stepfunctions import refine
from coxnii.survival import SurvivalDataset, build_risk_sets
from coxnii.utils.decorators import timeit_opt
from coxnii.utils.logs import get_logger

log = get_logger('posterior')

OPTIMAL_SCALE = 2.38
V_MAX = 50.0
ADAPTIVE_SEED_POINTS = 33
ADAPTIVE_MAX_POINTS = 4097
ADAPTIVE_RTOL = 1e-10
TABLE_V = np.linspace(0.0, 40.0, 2049)
MIN_ESS = 1000


class GaussianBetaPrior:
    """Independent mean-zero normal prior on each coordinate of beta."""

    def __init__(self, scale: Optional[float] = None):
        self.scale = get_config().beta_prior_scale if scale is None else float(scale)
        if not self.scale > 0:
            raise ValueError(f'prior scale must be positive, got {self.scale}')

    def __call__(self, beta) -> float:
        return float(np.sum(stats.norm.logpdf(np.asarray(beta, dtype=float), scale=self.scale)))

    def describe(self) -> dict:
        return {'family': 'gaussian', 'scale': self.scale}

    def __repr__(self):
        return f'{type(self).__name__}(scale={self.scale})'


def _jump_density_u(prior: NiiPriorSpec, c: float, r: float, death_weights, u):
    """Unnormalized fixed-jump density in u = -log(1 - x), Jacobian included."""
    u = np.maximum(np.asarray(u, dtype=float), 1e-300)
    log_phi = np.zeros_like(u)
    for w in np.atleast_1d(death_weights):
        log_phi = log_phi + np.log(-np.expm1(-w * u))
    return np.exp(log_phi - r * u) * prior.kernel(c, u)


class JumpDistribution:
    """Law of the fixed jump at one uncensored time, tabulated on an adaptive grid for inverse-CDF sampling."""

    def __init__(self, index: int, prior: NiiPriorSpec, c: float, r: float, death_weights):
        self.index = index
        self.prior = prior
        self.c = float(c)
        self.r = float(r)
        self.death_weights = np.atleast_1d(np.asarray(death_weights, dtype=float))
        self.rate = self.r + self.c
        self.normalizer = prior.integrate_jump_size(
            self.c, self.r, lambda u: np.prod(-np.expm1(-np.multiply.outer(self.death_weights, u)), axis=0))
        if not (np.isfinite(self.normalizer) and self.normalizer > 0):
            raise NumericalError(f'fixed jump {index}: normalizer {self.normalizer} is not a positive finite number '
                                 f'(c={self.c}, exponent={self.r})')
        self._v, self._cdf = self._tabulate()

    def density_u(self, u):
        return _jump_density_u(self.prior, self.c, self.r, self.death_weights, u)

    def _density_v(self, v):
        return self.density_u(np.asarray(v) / self.rate) / self.rate

    def _tabulate(self):
        k = np.arange(ADAPTIVE_SEED_POINTS)
        v = V_MAX / 2 * (1 - np.cos(np.pi * k / (ADAPTIVE_SEED_POINTS - 1)))
        f = self._density_v(v)
        total = self.normalizer
        while len(v) < ADAPTIVE_MAX_POINTS:
            mid = (v[:-1] + v[1:]) / 2
            f_mid = self._density_v(mid)
            h = np.diff(v)
            trapezoid = h * (f[:-1] + f[1:]) / 2
            simpson = h * (f[:-1] + 4 * f_mid + f[1:]) / 6
            refine_mask = np.abs(simpson - trapezoid) > ADAPTIVE_RTOL * total
            if not refine_mask.any():
                break
            v = np.sort(np.concatenate([v, mid[refine_mask]]))
            f = self._density_v(v)
        cdf = integrate.cumulative_trapezoid(f, v, initial=0.0)
        return v, cdf / cdf[-1]

    def unnormalized_pdf(self, x):
        x = np.asarray(x, dtype=float)
        phi = np.prod([1 - (1 - x) ** w for w in self.death_weights], axis=0)
        with np.errstate(divide='ignore', invalid='ignore'):
            out = phi * (1 - x) ** self.r * self.prior._g(self.c, self.prior.boundary_value(self.c), x) / x
        out = np.where(x > 0, out, 0.0)
        return out if out.ndim else float(out)

    def pdf(self, x):
        return self.unnormalized_pdf(x) / self.normalizer

    def cdf(self, x):
        v = self.rate * quad.u_of_x(np.clip(x, 0.0, 1.0))
        return np.interp(v, self._v, self._cdf)

    def ppf(self, q):
        v = np.interp(q, self._cdf, self._v)
        return quad.x_of_u(v / self.rate)

    def moment(self, k: int = 1) -> float:
        return self.prior.integrate_jump_size(
            self.c, self.r,
            lambda u: quad.x_of_u(u) ** k * np.prod(-np.expm1(-np.multiply.outer(self.death_weights, u)),
                                                    axis=0)) / self.normalizer

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.random(size))

    def __repr__(self):
        return (f'{type(self).__name__}(index={self.index}, c={self.c}, exponent={self.r}, '
                f'deaths={len(self.death_weights)}, normalizer={self.normalizer:.6g})')


def _batch_inverse_cdf(cdf: np.ndarray, grid: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise linear inverse of monotone CDF tables sharing one grid."""
    rows, cols = cdf.shape
    offsets = 2.0 * np.arange(rows)
    flat = (cdf + offsets[:, None]).ravel()
    idx = np.searchsorted(flat, q + offsets, side='right') - 1 - np.arange(rows) * cols
    idx = np.clip(idx, 0, cols - 2)
    row = np.arange(rows)
    lo, hi = cdf[row, idx], cdf[row, idx + 1]
    width = np.where(hi > lo, hi - lo, 1.0)
    frac = np.clip((q - lo) / width, 0.0, 1.0)
    return grid[idx] + frac * (grid[idx + 1] - grid[idx])


def batch_means_se(x, n_batches: int = 20) -> float:
    """Batch-means standard error of the mean of a (possibly autocorrelated) sequence."""
    x = np.asarray(x, dtype=float)
    size = len(x) // n_batches
    if size < 1:
        raise ValueError(f'need at least {n_batches} values for batch means, got {len(x)}')
    batches = x[:size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(batches.std(ddof=1) / np.sqrt(n_batches))


def effective_sample_size(x, n_batches: int = 20) -> float:
    x = np.asarray(x, dtype=float)
    se = batch_means_se(x, n_batches)
    if se == 0:
        return float(len(x))
    return float(x.var(ddof=1) / se ** 2)


@dataclass(frozen=True, eq=False)
class BetaChain:
    draws: np.ndarray
    log_posterior: np.ndarray
    acceptance_rate: float
    beta_hat: np.ndarray
    seed: int

    @property
    def p(self) -> int:
        return self.draws.shape[1]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def batch_se(self, n_batches: int = 20) -> np.ndarray:
        return np.array([batch_means_se(self.draws[:, k], n_batches) for k in range(self.p)])

    def effective_sample_size(self, n_batches: int = 20) -> np.ndarray:
        return np.array([effective_sample_size(self.draws[:, k], n_batches) for k in range(self.p)])

    def credible_interval(self, level: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
        """Equal-tailed interval per coordinate."""
        tail = (1 - level) / 2
        return np.quantile(self.draws, tail, axis=0), np.quantile(self.draws, 1 - tail, axis=0)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.draws, columns=[f'beta_{k + 1}' for k in range(self.p)])
        frame.insert(0, 'draw', np.arange(len(frame)))
        return frame


@dataclass(frozen=True, eq=False)
class JointDraws:
    """Posterior draws of beta with the matching cumulative hazard evaluated on a time grid."""
    betas: np.ndarray  # (m, p)
    grid: np.ndarray  # (g,)
    A: np.ndarray  # (m, g)

    def to_frame(self) -> pd.DataFrame:
        m, g = self.A.shape
        return pd.DataFrame({
            'draw': np.repeat(np.arange(m), g),
            't': np.tile(self.grid, m),
            'A': self.A.ravel(),
        })


class NiiPosterior:
    """Posterior evaluators and samplers for one dataset and one NII prior."""

    def __init__(self, dataset: SurvivalDataset, prior: NiiPriorSpec, log_prior: Optional[Callable] = None,
                 integrator: str = 'closed'):
        if integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {sorted(INTEGRATORS)}, got '{integrator}'")
        self.dataset = dataset
        self.prior = prior
        self.log_prior = GaussianBetaPrior() if log_prior is None else log_prior
        self.integrator = integrator
        self.risk_sets = build_risk_sets(dataset)
        rs = self.risk_sets
        order = np.asarray(rs.order)
        self._time = dataset.time[order]
        self._z = dataset.covariates[order]
        # deaths precede censorings, so the deaths at t_i occupy positions risk_start[i], ... in sorted order
        self._risk_start = np.asarray(rs.risk_start)
        self._death_counts = np.array([len(d) for d in rs.death_sets], dtype=int)
        self._singleton = bool(np.all(self._death_counts == 1))
        self._event_c = np.asarray(prior.c(rs.distinct_times), dtype=float).reshape(-1)
        self._event_lam = np.asarray(prior.lam(rs.distinct_times), dtype=float).reshape(-1)

        upper = float(self._time.max()) if dataset.n else 0.0
        knots = refine([prior.c, prior.lam], 0.0, upper) if upper > 0 else np.array([0.0, 0.0])
        mids = (knots[:-1] + knots[1:]) / 2
        self._rho_c = np.asarray(prior.c(mids), dtype=float).reshape(-1)
        overlap = np.clip(np.minimum(self._time[:, None], knots[None, 1:]) - knots[None, :-1], 0.0, None)
        self._rho_weight = overlap * np.asarray(prior.lam(mids), dtype=float).reshape(1, -1)

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def q(self) -> int:
        return self.risk_sets.q

    @property
    def logger(self):
        return log

    # Weights in sorted order

    def _weights(self, beta) -> np.ndarray:
        return np.exp(self._z @ np.asarray(beta, dtype=float).reshape(self.dataset.p))

    @staticmethod
    def _suffix(w) -> tuple[np.ndarray, np.ndarray]:
        """Sums over positions >= k and > k."""
        incl = np.cumsum(w[::-1])[::-1]
        return incl, np.append(incl[1:], 0.0)

    def _event_terms(self, beta):
        """Per event: exponent sum over R+(t_i) and the death weights (flattened, with offsets)."""
        w = self._weights(beta)
        incl, _ = self._suffix(w)
        start = self._risk_start
        counts = self._death_counts
        death_pos = np.repeat(start, counts) + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
        death_w = w[death_pos]
        # deaths occupy start .. start + count - 1, so the survivors start right after them
        r = np.append(incl, 0.0)[start + counts]
        return r, death_w, counts

    def _death_weight_groups(self, death_w, counts):
        return np.split(death_w, np.cumsum(counts)[:-1])

    # Core quantities

    def rho_n(self, beta) -> float:
        if self.n == 0:
            return 0.0
        w = self._weights(beta)
        _, after = self._suffix(w)
        if self.integrator == 'closed':
            J = self.prior.jump_integral(self._rho_c[None, :], after[:, None], w[:, None])
        else:
            J = np.array([[self.prior.jump_integral(c, a, wi, integrator='quadrature') if weight > 0 else 0.0
                           for c, weight in zip(self._rho_c, weights)]
                          for a, wi, weights in zip(after, w, self._rho_weight)])
        return float(max(np.sum(self._rho_weight * J), 0.0))

    def log_normalizers(self, beta) -> np.ndarray:
        """log Z_i(beta), the normalizers of the fixed-jump densities (without the lambda(t_i) factor)."""
        if self.q == 0:
            return np.zeros(0)
        r, death_w, counts = self._event_terms(beta)
        if self._singleton and self.integrator == 'closed':
            Z = self.prior.jump_integral(self._event_c, r, death_w)
        else:
            groups = self._death_weight_groups(death_w, counts)
            Z = np.array([self._normalizer_quad(c, ri, g) for c, ri, g in zip(self._event_c, r, groups)])
        return np.log(Z)

    def _normalizer_quad(self, c, r, death_weights):
        death_weights = np.atleast_1d(death_weights)
        return self.prior.integrate_jump_size(
            c, r, lambda u: np.prod(-np.expm1(-np.multiply.outer(death_weights, u)), axis=0))

    def h_n(self, beta) -> float:
        log_Z = self.log_normalizers(beta)
        return float(-self.rho_n(beta) + np.sum(np.log(self.n * self._event_lam) + log_Z))

    def log_marginal_posterior(self, beta) -> float:
        """h_n(beta) + log pi(beta), up to an additive constant free of beta."""
        log_pi = self.log_prior(beta)
        if not np.isfinite(log_pi):
            raise NumericalError(f'log prior density is not finite at beta={np.asarray(beta).tolist()}')
        with np.errstate(over='ignore', invalid='ignore'):
            value = self.h_n(beta)
        return value + log_pi if np.isfinite(value) else -np.inf

    # Fixed jumps

    def _check_index(self, i: int):
        if not 0 <= i < self.q:
            raise DomainError(f'event index must lie in [0, {self.q}), got {i}')

    def jump_distribution(self, i: int, beta) -> JumpDistribution:
        """Law of the jump at the i-th distinct uncensored time (0-based)."""
        self._check_index(i)
        r, death_w, counts = self._event_terms(beta)
        groups = self._death_weight_groups(death_w, counts)
        return JumpDistribution(i, self.prior, self._event_c[i], r[i], groups[i])

    def risk_sum(self, i: int, beta) -> float:
        """sum of exp(beta'Z_j) over R(t_i)."""
        self._check_index(i)
        incl, _ = self._suffix(self._weights(beta))
        return float(incl[self._risk_start[i]])

    def jump_moment(self, i: int, beta, k: int = 1, mode: str = 'exact') -> float:
        if isinstance(k, bool) or int(k) != k or k <= 0:
            raise DomainError(f'moment order must be a positive integer, got {k}')
        k = int(k)
        if mode == 'exact':
            return self.jump_distribution(i, beta).moment(k)
        elif mode == 'approx':
            R = self.risk_sum(i, beta)
            return float(np.exp(special.gammaln(k + 1) + special.gammaln(R + 1) - special.gammaln(R + k + 1)))
        raise ValueError(f"mode must be 'exact' or 'approx', got '{mode}'")

    def jump_means(self, beta) -> np.ndarray:
        """First moments of all fixed jumps."""
        if self.q == 0:
            return np.zeros(0)
        r, death_w, counts = self._event_terms(beta)
        if self._singleton and self.integrator == 'closed':
            c = self._event_c
            Z = self.prior.jump_integral(c, r, death_w)
            return (self.prior.partial_mean(c, r) - self.prior.partial_mean(c, r + death_w)) / Z
        return np.array([self.jump_moment(i, beta, 1) for i in range(self.q)])

    def sample_jump(self, i: int, beta, seed=0) -> float:
        return float(self.jump_distribution(i, beta).sample(np.random.default_rng(seed)))

    def _sample_fixed_jumps(self, beta, rng: np.random.Generator) -> np.ndarray:
        """All fixed jumps at once, by inverse CDF against tables on a shared rescaled grid."""
        if self.q == 0:
            return np.zeros(0)
        r, death_w, counts = self._event_terms(beta)
        rate = r + self._event_c
        u = TABLE_V[None, :] / rate[:, None]
        u_safe = np.maximum(u, 1e-300)
        event_of_death = np.repeat(np.arange(self.q), counts)
        log_phi_rows = np.log(-np.expm1(-death_w[:, None] * u_safe[event_of_death]))
        log_phi = np.add.reduceat(log_phi_rows, np.cumsum(counts) - counts, axis=0)
        density = np.exp(log_phi - r[:, None] * u_safe) * self.prior.kernel(self._event_c[:, None], u_safe)
        cdf = integrate.cumulative_trapezoid(density, TABLE_V, axis=1, initial=0.0)
        cdf /= cdf[:, -1:]
        v = _batch_inverse_cdf(cdf, TABLE_V, rng.random(self.q))
        return quad.x_of_u(v / rate)

    # Continuous part

    def _continuous_pieces(self, beta):
        w = self._weights(beta)
        incl, _ = self._suffix(w)
        incl = np.append(incl, 0.0)
        knots = refine([self.prior.c, self.prior.lam], 0.0, self.dataset.tau, extra_breaks=self._time)
        # on (knots[k], knots[k+1]) the risk set is {j: T_j >= knots[k+1]}
        exponents = incl[np.searchsorted(self._time, knots[1:], side='left')]
        return knots, exponents

    def continuous_part_mean(self, beta, t=None):
        """E of the continuous part of A at t (default tau)."""
        knots, a = self._continuous_pieces(beta)
        t = self.dataset.tau if t is None else t
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        mids = (knots[:-1] + knots[1:]) / 2
        rate = np.asarray(self.prior.lam(mids)) * self.prior.partial_mean(np.asarray(self.prior.c(mids)), a)
        lengths = np.clip(np.minimum(t_arr[:, None], knots[None, 1:]) - knots[None, :-1], 0.0, None)
        out = lengths @ rate
        return out if np.ndim(t) else float(out[0])

    def posterior_mean_path(self, beta, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=float)
        jumps = np.concatenate([[0.0], np.cumsum(self.jump_means(beta))])
        idx = np.searchsorted(self.risk_sets.distinct_times, grid, side='right')
        return jumps[idx] + self.continuous_part_mean(beta, grid)

    def sample_posterior_path(self, beta, epsilon: Optional[float] = None, seed=0) -> HazardPath:
        epsilon = get_config().epsilon if epsilon is None else epsilon
        if not 0 < epsilon < 1:
            raise DomainError(f'epsilon must lie in (0, 1), got {epsilon}')
        rng = np.random.default_rng(seed)
        sizes = self._sample_fixed_jumps(beta, rng)
        knots, exponents = self._continuous_pieces(beta)
        path = sample_levy_path(self.prior, knots, exponents, epsilon, rng, self.dataset.tau)
        return path.with_fixed_jumps(self.risk_sets.distinct_times, sizes)

    # beta

    def fit(self) -> FitResult:
        fit = CoxModel(self.dataset).fit_mle()
        if not fit.converged:
            raise ConvergenceError(f'partial-likelihood fit did not converge (|grad|={fit.gradient_norm:.2e})')
        return fit

    @timeit_opt
    def sample_beta_posterior(self, n_draws: int, burn_in: int = 0, seed: int = 0,
                              fit: Optional[FitResult] = None) -> BetaChain:
        """Random-walk Metropolis on the marginal posterior of beta, started at the MLE."""
        if n_draws < 1 or burn_in < 0:
            raise ValueError(f'need n_draws >= 1 and burn_in >= 0, got {n_draws}, {burn_in}')
        fit = self.fit() if fit is None else fit
        p = self.dataset.p
        cov = OPTIMAL_SCALE ** 2 / p * _safe_inverse(fit.info_hat) / self.n
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f'proposal covariance is not positive definite: {cov.tolist()}') from e

        rng = np.random.default_rng(seed)
        total = burn_in + n_draws
        steps = rng.standard_normal((total, p)) @ chol.T
        log_u = np.log(rng.random(total))
        current = np.array(fit.beta_hat, dtype=float)
        current_lp = self.log_marginal_posterior(current)
        draws = np.empty((n_draws, p))
        lps = np.empty(n_draws)
        accepted = 0
        show = get_config().show_progress(total)
        for it in tqdm(range(total), desc='Metropolis', disable=not show):
            proposal = current + steps[it]
            proposal_lp = self.log_marginal_posterior(proposal)
            if log_u[it] < proposal_lp - current_lp:
                current, current_lp = proposal, proposal_lp
                accepted += 1
            if it >= burn_in:
                draws[it - burn_in] = current
                lps[it - burn_in] = current_lp
        chain = BetaChain(draws=draws, log_posterior=lps, acceptance_rate=accepted / total,
                          beta_hat=np.array(fit.beta_hat), seed=seed)
        self.logger.info(f'Metropolis chain: {n_draws} draws after {burn_in} burn-in, '
                         f'acceptance rate {chain.acceptance_rate:.3f}')
        if n_draws >= 20:
            ess = chain.effective_sample_size()
            if np.min(ess) < MIN_ESS:
                self.logger.warning(f'effective sample size {np.min(ess):.0f} is below {MIN_ESS}')
        return chain

    def joint_draws(self, chain: BetaChain, grid, n_paths: int, epsilon: Optional[float] = None,
                    seed: int = 0) -> JointDraws:
        """Pair ``n_paths`` beta draws (evenly thinned from the chain) with a posterior path each."""
        grid = np.asarray(grid, dtype=float)
        if n_paths < 1:
            raise ValueError(f'n_paths must be positive, got {n_paths}')
        picks = np.linspace(0, len(chain.draws) - 1, n_paths).round().astype(int)
        betas = chain.draws[picks]
        seeds = np.random.SeedSequence(seed).spawn(n_paths)
        A = np.empty((n_paths, len(grid)))
        show = get_config().show_progress(n_paths * max(self.q, 1))
        for m in tqdm(range(n_paths), desc='Posterior paths', disable=not show):
            A[m] = self.sample_posterior_path(betas[m], epsilon, seeds[m])(grid)
        return JointDraws(betas=betas, grid=grid, A=A)


def _safe_inverse(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(matrix)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f'information matrix is singular: {matrix.tolist()}') from e


@dataclass(frozen=True, eq=False)
class BetaPosteriorSpec:
    """Dataset, NII prior and the log prior density of beta (Gaussian with scale kappa by default)."""
    dataset: SurvivalDataset
    prior: NiiPriorSpec
    log_prior: Optional[Callable] = None
    integrator: str = 'closed'

    def __post_init__(self):
        if self.log_prior is None:
            object.__setattr__(self, 'log_prior', GaussianBetaPrior())

    @cached_property
    def posterior(self) -> NiiPosterior:
        return NiiPosterior(self.dataset, self.prior, self.log_prior, self.integrator)


def log_marginal_posterior(beta, spec: BetaPosteriorSpec) -> float:
    return spec.posterior.log_marginal_posterior(beta)


def sample_beta_posterior(spec: BetaPosteriorSpec, n_draws: int, burn_in: int = 0, seed: int = 0,
                          fit: Optional[FitResult] = None) -> BetaChain:
    return spec.posterior.sample_beta_posterior(n_draws, burn_in=burn_in, seed=seed, fit=fit)
