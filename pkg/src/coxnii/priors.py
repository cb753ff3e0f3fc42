"""Neutral-to-the-right priors on the cumulative hazard, specified through Levy measures.

A prior is described by a rate function lambda(t) and a jump-size density g_t(x) on [0, 1]; its Levy measure is
``nu(dt, dx) = g_t(x) / x * lambda(t) dx dt``. Both the beta and the gamma process have g_t depending on t only
through a piecewise-constant shape c(t), so every integral over x is evaluated per distinct value of c.
"""
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import special

from coxnii import quadrature as quad
from coxnii.config import get_config
from coxnii.exceptions import DomainError, InvalidPriorError
from coxnii.stepfunctions import StepFunction, refine
from coxnii.utils.logs import get_logger

log = get_logger('priors')

GAMMA_VARSIGMA_SHRINK = 1 - 1e-6
INTEGRATORS = {'closed', 'quadrature'}


class NiiPriorSpec(metaclass=ABCMeta):
    """Levy-measure specification ``(lambda, g)`` with the constants of the regularity conditions.

    ``lam`` is the rate of the Levy measure, so that E A(t) = integral of ``lam`` over [0, t].
    """
    family: str = None

    def __init__(self, c, lam, tau: Optional[float] = None):
        self.c = StepFunction.coerce(c)
        self.lam = StepFunction.coerce(lam)
        self.tau = None if tau is None else float(tau)
        if self.tau is not None and not self.tau > 0:
            raise InvalidPriorError(f'tau must be positive, got {self.tau}')
        upper = np.inf if self.tau is None else self.tau
        if not self.c.inf(upper) > 0:
            raise InvalidPriorError(f'{self.family} process needs inf c > 0, got {self.c.inf(upper)}')
        if not self.lam.inf(upper) > 0:
            raise InvalidPriorError(f'lambda must be strictly positive, got inf lambda = {self.lam.inf(upper)}')

    # Per-family pieces. ``c`` is an array of shape values, ``k`` the matching boundary values g(0+).

    @abstractmethod
    def boundary_value(self, c):
        """k = lim_{x -> 0} g(x) for shape c."""

    @abstractmethod
    def _shape_u(self, u):
        """Decreasing factor of the u-space kernel: g(x)/x * dx/du = k * exp(-c u) * shape(u)."""

    @abstractmethod
    def _g(self, c, k, x):
        pass

    @abstractmethod
    def _jump_integral_closed(self, c, k, a, w):
        pass

    @abstractmethod
    def _partial_mean_closed(self, c, k, a):
        pass

    @abstractmethod
    def _second_moment_closed(self, c, k):
        pass

    @abstractmethod
    def _small_jump_mean_closed(self, c, k, a, epsilon):
        pass

    @property
    @abstractmethod
    def varsigma(self) -> float:
        pass

    @property
    @abstractmethod
    def alpha(self) -> Optional[float]:
        pass

    # Derived quantities

    @property
    def upper(self) -> float:
        return np.inf if self.tau is None else self.tau

    @property
    def k_fn(self) -> StepFunction:
        return StepFunction(self.c.breaks, tuple(float(self.boundary_value(v)) for v in self.c.values))

    @property
    def k_lower(self) -> float:
        return self.k_fn.inf(self.upper)

    @property
    def k_upper(self) -> float:
        return self.k_fn.sup(self.upper)

    @property
    def g_star(self) -> float:
        """sup over (t, x) of (1 - x)^(1 - varsigma) g_t(x), attained as x -> 0 for both families."""
        return self.k_upper

    def kernel(self, c, u):
        """g(x)/x * dx/du at x = 1 - exp(-u)."""
        c = np.asarray(c, dtype=float)
        return self.boundary_value(c) * np.exp(-c * u) * self._shape_u(u)

    def g(self, t, x):
        """Jump-size density g_t(x)."""
        c = np.asarray(self.c(t), dtype=float)
        return self._g(c, self.boundary_value(c), np.asarray(x, dtype=float))

    # Integrals over the jump size

    def integrate_jump_size(self, c: float, a: float, phi=None) -> float:
        """Quadrature of ``phi(u) * (1 - x)^a * g(x) / x dx`` over [0, 1], in the variable u."""
        if phi is None:
            return quad.integrate_log_scale(lambda u: np.exp(-a * u) * self.kernel(c, u), rate=a + c)
        return quad.integrate_log_scale(lambda u: phi(u) * np.exp(-a * u) * self.kernel(c, u), rate=a + c)

    def jump_integral(self, c, a, w, integrator: str = 'closed'):
        """Integral of (1 - x)^a (1 - (1 - x)^w) g(x) / x over [0, 1]."""
        if integrator == 'closed':
            c = np.asarray(c, dtype=float)
            return self._jump_integral_closed(c, self.boundary_value(c), np.asarray(a, dtype=float),
                                              np.asarray(w, dtype=float))
        return _broadcast_quad(lambda ci, ai, wi: self.integrate_jump_size(ci, ai, lambda u: quad.one_minus_pow(u, wi)),
                               c, a, w)

    def partial_mean(self, c, a, integrator: str = 'closed'):
        """Integral of (1 - x)^a g(x) over [0, 1]: the first moment of x under (1 - x)^a g(x)/x."""
        if integrator == 'closed':
            c = np.asarray(c, dtype=float)
            return self._partial_mean_closed(c, self.boundary_value(c), np.asarray(a, dtype=float))
        return _broadcast_quad(lambda ci, ai: self.integrate_jump_size(ci, ai, quad.x_of_u), c, a)

    def second_moment(self, c, integrator: str = 'closed'):
        """Integral of x g(x) over [0, 1]."""
        if integrator == 'closed':
            c = np.asarray(c, dtype=float)
            return self._second_moment_closed(c, self.boundary_value(c))
        return _broadcast_quad(lambda ci: self.integrate_jump_size(ci, 0.0, lambda u: quad.x_of_u(u) ** 2), c)

    def small_jump_mean(self, c, a, epsilon: float):
        """Integral of (1 - x)^a g(x) over [0, epsilon]: mean contribution of jumps below epsilon."""
        c = np.asarray(c, dtype=float)
        return self._small_jump_mean_closed(c, self.boundary_value(c), np.asarray(a, dtype=float), epsilon)

    def envelope_coef(self, c, u_eps: float):
        """Constant B with kernel(c, u) <= B exp(-c u) for u >= u_eps."""
        return self.boundary_value(np.asarray(c, dtype=float)) * self._shape_u(u_eps)

    def describe(self) -> dict:
        d = {'family': self.family, 'c': self.c.to_spec(), 'lam': self.lam.to_spec()}
        if self.tau is not None:
            d['tau'] = self.tau
        return d

    def __repr__(self):
        return f'{type(self).__name__}(c={self.c.to_spec()!r}, lam={self.lam.to_spec()!r}, tau={self.tau})'


def _broadcast_quad(fn, *args):
    arrays = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in args))
    out = np.array([fn(*vals) for vals in zip(*(a.ravel() for a in arrays))], dtype=float)
    return out.reshape(arrays[0].shape) if arrays[0].ndim else float(out[0])


class BetaProcessPrior(NiiPriorSpec):
    """g_t(x) = c(t) (1 - x)^(c(t) - 1)."""
    family = 'beta'

    def boundary_value(self, c):
        return c

    def _shape_u(self, u):
        return quad.inv_x(u)

    def _g(self, c, k, x):
        return k * (1 - x) ** (c - 1)

    def _jump_integral_closed(self, c, k, a, w):
        return k * (special.digamma(a + c + w) - special.digamma(a + c))

    def _partial_mean_closed(self, c, k, a):
        return k / (a + c)

    def _second_moment_closed(self, c, k):
        return 1 / (c + 1)

    def _small_jump_mean_closed(self, c, k, a, epsilon):
        s = a + c
        return k * -np.expm1(s * np.log1p(-epsilon)) / s

    @property
    def varsigma(self) -> float:
        return self.c.inf(self.upper)

    @property
    def alpha(self) -> float:
        return 1.0


@lru_cache(maxsize=1024)
def gamma_normalizer(c: float) -> float:
    """c~ = (integral of x / (-log(1 - x)) (1 - x)^(c - 1) dx)^(-1), by quadrature."""
    integral = quad.integrate_log_scale(lambda u: quad.x_of_u(u) / np.maximum(u, 1e-300) * np.exp(-c * u), rate=c)
    return 1.0 / integral


class GammaProcessPrior(NiiPriorSpec):
    """Cumulative hazard of a gamma process on -log(1 - F) with shape c(t) and mean Lambda.

    g_t(x) = c~(t) x / (-log(1 - x)) (1 - x)^(c(t) - 1); the Levy rate is lambda~ = (c / c~) lambda.
    """
    family = 'gamma'

    def __init__(self, c, lam, tau: Optional[float] = None):
        c = StepFunction.coerce(c)
        base_lam = StepFunction.coerce(lam)
        if any(v <= 0 for v in c.values):
            raise InvalidPriorError(f'gamma process needs c > 0, got {c.values}')
        knots = refine([c, base_lam], 0.0, np.inf)
        breaks = tuple(knots[1:-1])
        # c and lambda are right-continuous, so each piece is probed at its left end
        rate_values = tuple(c(t) / gamma_normalizer(c(t)) * base_lam(t) for t in knots[:-1])
        self.base_lam = base_lam
        super().__init__(c, StepFunction(breaks, rate_values), tau=tau)

    def boundary_value(self, c):
        c = np.asarray(c, dtype=float)
        if c.ndim == 0:
            return gamma_normalizer(float(c))
        values, inverse = np.unique(c, return_inverse=True)
        return np.array([gamma_normalizer(float(v)) for v in values])[inverse].reshape(c.shape)

    def _shape_u(self, u):
        return 1.0 / np.maximum(u, 1e-300)

    def _g(self, c, k, x):
        u = quad.u_of_x(x)
        ratio = np.where(x > 0, x / np.where(u > 0, u, 1.0), 1.0)
        return k * ratio * (1 - x) ** (c - 1)

    def _jump_integral_closed(self, c, k, a, w):
        return k * np.log1p(w / (a + c))

    def _partial_mean_closed(self, c, k, a):
        return k * np.log1p(1 / (a + c))

    def _second_moment_closed(self, c, k):
        return k * np.log((c + 1) ** 2 / (c * (c + 2)))

    def _small_jump_mean_closed(self, c, k, a, epsilon):
        s = a + c
        u_eps = quad.u_of_x(epsilon)
        return k * (np.log1p(1 / s) - special.exp1(s * u_eps) + special.exp1((s + 1) * u_eps))

    def cumulative_base(self, t):
        """Lambda(t), the parameter of the gamma process (not the mean of A)."""
        return self.base_lam.integral(t)

    @property
    def varsigma(self) -> float:
        return self.c.inf(self.upper) / 2 * GAMMA_VARSIGMA_SHRINK

    @property
    def alpha(self) -> Optional[float]:
        return None

    def describe(self) -> dict:
        d = super().describe()
        d['lam'] = self.base_lam.to_spec()
        return d


def beta_process_prior(c=1.0, lam=1.0, tau: Optional[float] = None) -> BetaProcessPrior:
    return BetaProcessPrior(c, lam, tau=tau)


def gamma_process_prior(c=1.0, lam=1.0, tau: Optional[float] = None) -> GammaProcessPrior:
    return GammaProcessPrior(c, lam, tau=tau)


def make_prior(family: str, c=1.0, lam=1.0, tau: Optional[float] = None) -> NiiPriorSpec:
    if family == 'beta':
        return beta_process_prior(c, lam, tau=tau)
    elif family == 'gamma':
        return gamma_process_prior(c, lam, tau=tau)
    else:
        raise InvalidPriorError(f"Unknown prior family '{family}', must be 'beta' or 'gamma'")


def levy_density(spec: NiiPriorSpec, t, x):
    """g_t(x) lambda(t) / x."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(x <= 0) or np.any(x > 1):
        raise DomainError('levy density is defined for jump sizes in (0, 1]')
    if np.any(t < 0) or np.any(t > spec.upper):
        raise DomainError(f'time must lie in [0, {spec.upper}]')
    out = spec.g(t, x) * spec.lam(t) / x
    return out if np.ndim(out) else float(out)


def _pieces(spec: NiiPriorSpec, lower: float, upper: float, extra_breaks=()):
    knots = refine([spec.c, spec.lam], lower, upper, extra_breaks)
    mids = (knots[:-1] + knots[1:]) / 2
    return knots, np.asarray(spec.c(mids)), np.asarray(spec.lam(mids))


def prior_moments(spec: NiiPriorSpec, t: float) -> tuple[float, float]:
    """(E A(t), Var A(t)) for a prior without fixed atoms."""
    if t <= 0:
        return 0.0, 0.0
    knots, c, lam = _pieces(spec, 0.0, t)
    mean = float(spec.lam.integral(t))
    variance = float(np.sum(lam * np.diff(knots) * spec.second_moment(c)))
    return mean, variance


# Condition checks

@dataclass(frozen=True)
class ConditionReport:
    varsigma: float
    g_star: float
    c1_sup: float
    c1_verdict: bool
    k_lower: float
    k_upper: float
    alpha: Optional[float]
    holder_sup: float
    alpha_empirical: Optional[float]
    c2_verdict: bool

    @property
    def passed(self) -> bool:
        return self.c1_verdict and self.c2_verdict

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def check_conditions(spec: NiiPriorSpec, t_points: int = 50, x_points: int = 2000, h_max: float = 0.1,
                     tau: Optional[float] = None) -> ConditionReport:
    tau = tau if tau is not None else (spec.tau if spec.tau is not None else 1.0)
    t_grid = np.linspace(0.0, tau, t_points)[:, None]
    x_grid = np.unique(np.concatenate([np.linspace(0.0, 1.0, x_points, endpoint=False),
                                       1 - np.logspace(-12, -1, 50)]))[None, :]
    varsigma = spec.varsigma
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        weighted = (1 - x_grid) ** (1 - varsigma) * spec.g(t_grid, x_grid)
    c1_sup = float(np.nanmax(weighted))
    c1_verdict = bool(np.isfinite(c1_sup) and c1_sup <= spec.g_star * (1 + 1e-9) and varsigma > 0)

    h = np.geomspace(1e-6, h_max, 200)[None, :]
    k = np.asarray(spec.k_fn(t_grid[:, 0]))[:, None]
    diff = np.abs(spec.g(t_grid, h) - k)
    alpha = spec.alpha if spec.alpha is not None else 1.0
    holder_sup = float(np.max(diff / h ** alpha))

    alpha_empirical = None
    positive = diff.max(axis=0) > 1e-14
    if positive.sum() >= 2:
        slope, _ = np.polyfit(np.log(h[0, positive]), np.log(diff.max(axis=0)[positive]), 1)
        alpha_empirical = float(slope)
    holder_exponent = spec.alpha if spec.alpha is not None else alpha_empirical
    c2_verdict = bool(np.isfinite(holder_sup) and 0 < spec.k_lower <= spec.k_upper < np.inf
                      and (holder_exponent is None or holder_exponent > 0.5))
    report = ConditionReport(varsigma=varsigma, g_star=spec.g_star, c1_sup=c1_sup, c1_verdict=c1_verdict,
                             k_lower=spec.k_lower, k_upper=spec.k_upper, alpha=spec.alpha, holder_sup=holder_sup,
                             alpha_empirical=alpha_empirical, c2_verdict=c2_verdict)
    log.debug(f'condition check for {spec!r}: {report}')
    return report


# Paths

@dataclass(frozen=True, eq=False)
class HazardPath:
    """A cumulative hazard path: jumps plus an optional continuous, piecewise-linear drift."""
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    tau: float
    drift_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    drift_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bounded_jumps: bool = True

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float).ravel()
        sizes = np.asarray(self.jump_sizes, dtype=float).ravel()
        if times.shape != sizes.shape:
            raise ValueError(f'{len(times)} jump times but {len(sizes)} jump sizes')
        if np.any(times <= 0) or np.any(times > self.tau):
            raise ValueError(f'jump times must lie in (0, {self.tau}]')
        if np.any(sizes < 0) or (self.bounded_jumps and np.any(sizes > 1)):
            raise ValueError('jump sizes must lie in [0, 1]' if self.bounded_jumps else 'jump sizes must be >= 0')
        drift_times = np.asarray(self.drift_times, dtype=float).ravel()
        drift_values = np.asarray(self.drift_values, dtype=float).ravel()
        if drift_times.shape != drift_values.shape:
            raise ValueError('drift knots and values must have the same length')
        if len(drift_values) and (drift_values[0] != 0 or np.any(np.diff(drift_values) < 0)):
            raise ValueError('drift must start at 0 and be nondecreasing')
        order = np.argsort(times, kind='stable')
        for name, arr in [('jump_times', times[order]), ('jump_sizes', sizes[order]),
                          ('drift_times', drift_times), ('drift_values', drift_values)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        cum = np.cumsum(self.jump_sizes)
        cum.setflags(write=False)
        object.__setattr__(self, '_cum_jumps', cum)

    @classmethod
    def from_steps(cls, times, increments, tau: float, bounded_jumps: bool = True) -> 'HazardPath':
        return cls(times, increments, tau=tau, bounded_jumps=bounded_jumps)

    def drift(self, t):
        if len(self.drift_times) == 0:
            return np.zeros_like(np.asarray(t, dtype=float))
        return np.interp(t, self.drift_times, self.drift_values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side='right')
        out = np.concatenate([[0.0], self._cum_jumps])[idx] + self.drift(t)
        return out if out.ndim else float(out)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def total(self) -> float:
        return float(self(self.tau))

    def is_nondecreasing(self) -> bool:
        grid = np.union1d(self.jump_times, self.drift_times)
        return bool(np.all(np.diff(self(np.concatenate([[0.0], grid, [self.tau]]))) >= 0))

    def with_fixed_jumps(self, times, sizes) -> 'HazardPath':
        return type(self)(np.concatenate([self.jump_times, times]), np.concatenate([self.jump_sizes, sizes]),
                          tau=self.tau, drift_times=self.drift_times, drift_values=self.drift_values,
                          bounded_jumps=self.bounded_jumps)

    def steps(self) -> np.ndarray:
        """(t, A(t)) at each jump time, as an (m, 2) array."""
        return np.column_stack([self.jump_times, self(self.jump_times)])


def sample_levy_path(spec: NiiPriorSpec, knots, exponents, epsilon: float, rng: np.random.Generator,
                     tau: float) -> HazardPath:
    """Draw a path of the NII process with Levy density (1 - x)^a(t) g_t(x) lambda(t) / x on [knots[0], knots[-1]].

    ``exponents`` holds the value of a(t) on each piece [knots[k], knots[k+1]); lambda and c must be constant
    on each piece. Jumps of size >= epsilon are drawn by thinning a dominating Poisson measure with density
    B exp(-(a + c) u) in u = -log(1 - x); smaller jumps are replaced by their mean as a deterministic drift.
    """
    if not 0 < epsilon < 1:
        raise DomainError(f'epsilon must lie in (0, 1), got {epsilon}')
    knots = np.asarray(knots, dtype=float)
    a = np.asarray(exponents, dtype=float)
    lengths = np.diff(knots)
    mids = (knots[:-1] + knots[1:]) / 2
    c = np.asarray(spec.c(mids), dtype=float)
    lam = np.asarray(spec.lam(mids), dtype=float)
    s = a + c
    u_eps = float(quad.u_of_x(epsilon))

    expected = lam * lengths * spec.envelope_coef(c, u_eps) * np.exp(-s * u_eps) / s
    counts = rng.poisson(expected)
    piece = np.repeat(np.arange(len(lengths)), counts)
    times = knots[piece] + rng.random(len(piece)) * lengths[piece]
    u = u_eps + rng.exponential(1.0 / s[piece])
    keep = rng.random(len(piece)) * spec._shape_u(u_eps) < spec._shape_u(u)
    times, sizes = times[keep], quad.x_of_u(u[keep])
    # A proposal landing exactly on the left end of the horizon has probability zero but would break A(0) = 0
    keep = times > 0
    drift = lam * lengths * spec.small_jump_mean(c, a, epsilon)
    return HazardPath(times[keep], sizes[keep], tau=tau, drift_times=knots,
                      drift_values=np.concatenate([[0.0], np.cumsum(drift)]))


def truncation_drift(spec: NiiPriorSpec, t: float, epsilon: float) -> float:
    """Integral of x nu(ds, dx) over s <= t, x < epsilon."""
    knots, c, lam = _pieces(spec, 0.0, t)
    return float(np.sum(lam * np.diff(knots) * spec.small_jump_mean(c, 0.0, epsilon)))


def sample_prior_path(spec: NiiPriorSpec, epsilon: Optional[float] = None,
                      seed: int | np.random.SeedSequence | np.random.Generator = 0,
                      tau: Optional[float] = None) -> HazardPath:
    epsilon = get_config().epsilon if epsilon is None else epsilon
    if not 0 < epsilon < 1:
        raise DomainError(f'epsilon must lie in (0, 1), got {epsilon}')
    tau = tau if tau is not None else spec.tau
    if tau is None:
        raise DomainError('a horizon tau is needed to sample a prior path')
    knots, _, _ = _pieces(spec, 0.0, tau)
    rng = np.random.default_rng(seed)
    return sample_levy_path(spec, knots, np.zeros(len(knots) - 1), epsilon, rng, tau)


def sample_prior_totals(spec: NiiPriorSpec, n_paths: int, epsilon: Optional[float] = None, seed: int = 0,
                        tau: Optional[float] = None, t: Optional[float] = None) -> np.ndarray:
    """A(t) over ``n_paths`` independent prior paths (t defaults to tau)."""
    epsilon = get_config().epsilon if epsilon is None else epsilon
    tau = tau if tau is not None else spec.tau
    t = tau if t is None else t
    seeds = np.random.SeedSequence(seed).spawn(n_paths)
    return np.array([sample_prior_path(spec, epsilon, s, tau)(t) for s in seeds])
