"""Right-censored proportional-hazards data: the dataset type, risk sets, validation, CSV ingestion and simulation."""
import io
import re
import warnings
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import pandas as pd
from scipy import integrate, optimize

from coxnii.exceptions import ConfigurationError, DatasetParseError
from coxnii.stepfunctions import StepFunction
from coxnii.utils.logs import get_logger

log = get_logger('survival')

RANK_RTOL = 1e-10


def _frozen_array(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SurvivalDataset:
    """Observations (T_i, delta_i, Z_i), stored in input order, with study horizon tau."""
    time: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    tau: Optional[float] = None

    def __post_init__(self):
        time = _frozen_array(self.time).ravel()
        status = np.asarray(self.status)
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(len(time), -1) if len(time) else covariates.reshape(0, 1)
        if covariates.ndim != 2 or covariates.shape[0] != len(time):
            raise ValueError(f'covariates must have shape (n, p) with n={len(time)}, got {covariates.shape}')
        if covariates.shape[1] < 1:
            raise ValueError('at least one covariate column is required')
        if status.shape != time.shape:
            raise ValueError(f'status must have shape {time.shape}, got {status.shape}')
        if not np.all(np.isin(status, (0, 1))):
            raise ValueError('status must be 0 or 1')
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise ValueError('all times must be strictly positive and finite')
        if not np.all(np.isfinite(covariates)):
            raise ValueError('all covariates must be finite')
        max_time = float(time.max()) if len(time) else 0.0
        tau = max_time if self.tau is None else float(self.tau)
        if len(time) and tau < max_time:
            raise ValueError(f'tau={tau} is smaller than the largest observed time {max_time}')
        object.__setattr__(self, 'time', time)
        object.__setattr__(self, 'status', _frozen_array(status, dtype=np.int8))
        object.__setattr__(self, 'covariates', _frozen_array(covariates))
        object.__setattr__(self, 'tau', tau)

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def max_norm(self) -> float:
        """M_z: the largest L1 norm of a covariate vector."""
        if self.n == 0:
            return 0.0
        return float(np.abs(self.covariates).sum(axis=1).max())

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    @property
    def records(self) -> list[tuple[float, int, np.ndarray]]:
        return [(float(t), int(d), z) for t, d, z in zip(self.time, self.status, self.covariates)]

    def linear_predictor(self, beta) -> np.ndarray:
        return self.covariates @ np.asarray(beta, dtype=float).reshape(self.p)

    def permuted(self, perm) -> Self:
        perm = np.asarray(perm)
        return type(self)(self.time[perm], self.status[perm], self.covariates[perm], tau=self.tau)

    def negated(self) -> Self:
        return type(self)(self.time, self.status, -self.covariates, tau=self.tau)

    def with_tau(self, tau: float) -> Self:
        return type(self)(self.time, self.status, self.covariates, tau=tau)

    def __repr__(self) -> str:
        return f'{type(self).__name__}(n={self.n}, p={self.p}, events={self.n_events}, tau={self.tau:g})'


# CSV ingestion

def _header(p: int) -> list[str]:
    return ['time', 'status'] + [f'z{k}' for k in range(1, p + 1)]


def parse_dataset(text: str, tau: Optional[float] = None) -> SurvivalDataset:
    """Parse a ``time,status,z1,...,zp`` table. Rows are numbered from 1 (the first data row)."""
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DatasetParseError('empty input, expected a header row time,status,z1,...,zp')
    except pd.errors.ParserError as e:
        # pandas counts the header as line 1
        match = re.search(r'line (\d+), saw (\d+)', str(e))
        if match is None:
            raise DatasetParseError(f'inconsistent column count ({e})')
        line, seen = map(int, match.groups())
        raise DatasetParseError(f'inconsistent column count: {seen} fields', row=line - 1)
    columns = [c.strip() for c in frame.columns]
    p = len(columns) - 2
    if p < 1 or columns != _header(p):
        raise DatasetParseError(f"header must be 'time,status,z1,...,zp', got '{','.join(columns)}'")

    values = np.empty((len(frame), len(columns)), dtype=float)
    for row, cells in enumerate(frame.itertuples(index=False, name=None), start=1):
        if any(not isinstance(c, str) or c.strip() == '' for c in cells):
            raise DatasetParseError('inconsistent column count or empty cell', row=row)
        for k, (name, cell) in enumerate(zip(columns, cells)):
            try:
                values[row - 1, k] = float(cell)
            except ValueError:
                raise DatasetParseError(f"malformed value '{cell}' in column '{name}'", row=row)
        if values[row - 1, 1] not in (0.0, 1.0):
            raise DatasetParseError('status must be 0 or 1', row=row)
        if not np.isfinite(values[row - 1, 0]) or values[row - 1, 0] <= 0:
            raise DatasetParseError('time must be strictly positive and finite', row=row)
        if not np.all(np.isfinite(values[row - 1, 2:])):
            raise DatasetParseError('covariates must be finite', row=row)

    return SurvivalDataset(values[:, 0], values[:, 1].astype(np.int8), values[:, 2:].reshape(len(frame), p), tau=tau)


def serialize_dataset(ds: SurvivalDataset) -> str:
    frame = pd.DataFrame(ds.covariates, columns=_header(ds.p)[2:])
    frame.insert(0, 'status', ds.status.astype(int))
    frame.insert(0, 'time', ds.time)
    return frame.to_csv(index=False, lineterminator='\n')


# Validation of the regularity conditions that can be checked on a sample

@dataclass(frozen=True)
class ValidationVerdict:
    violations: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.passed

    def summary(self) -> str:
        if self.passed:
            return 'dataset passes all checks'
        return '; '.join(f'{cond}: {msg}' for cond, msg in self.violations.items())


def validate_dataset(ds: SurvivalDataset) -> ValidationVerdict:
    violations = {}
    death_times = ds.time[ds.status == 1]
    unique_deaths, counts = np.unique(death_times, return_counts=True)
    if np.any(counts > 1):
        tied = unique_deaths[counts > 1]
        violations['A1'] = f'{len(tied)} uncensored time(s) are tied, first at t={tied[0]:g}'
    if not np.isfinite(ds.max_norm):
        violations['A3'] = 'covariate norms are not finite'
    centered = ds.covariates - ds.covariates.mean(axis=0) if ds.n else ds.covariates
    if ds.n == 0:
        rank = 0
    else:
        singular_values = np.linalg.svd(centered, compute_uv=False)
        rank = int(np.sum(singular_values > RANK_RTOL * singular_values.max())) if singular_values.max() > 0 else 0
    if rank < ds.p:
        violations['A4'] = f'centered design matrix has rank {rank} < p={ds.p} (constant or collinear covariates)'
    verdict = ValidationVerdict(violations)
    if not verdict.passed:
        log.info(f'validation failed: {verdict.summary()}')
    return verdict


# Risk sets

@dataclass(frozen=True)
class RiskSets:
    distinct_times: np.ndarray
    death_sets: tuple[np.ndarray, ...]
    risk_sets: tuple[np.ndarray, ...]
    reduced_risk_sets: tuple[np.ndarray, ...]
    death_index: np.ndarray
    order: np.ndarray  # record indices sorted by time, deaths before censorings at equal times
    risk_start: np.ndarray  # position in `order` where R_n(t_i) begins

    @property
    def q(self) -> int:
        return len(self.distinct_times)

    def __len__(self) -> int:
        return self.q


def sort_order(ds: SurvivalDataset) -> np.ndarray:
    """Indices sorted ascending by time with deaths preceding censorings at equal times."""
    return np.lexsort((1 - ds.status, ds.time))


def build_risk_sets(ds: SurvivalDataset) -> RiskSets:
    order = sort_order(ds)
    sorted_time = ds.time[order]
    distinct_times = np.unique(ds.time[ds.status == 1])
    risk_start = np.searchsorted(sorted_time, distinct_times, side='left')
    death_sets, risk_sets, reduced = [], [], []
    for t, start in zip(distinct_times, risk_start):
        deaths = np.flatnonzero((ds.time == t) & (ds.status == 1))
        at_risk = np.sort(order[start:])
        death_sets.append(deaths)
        risk_sets.append(at_risk)
        reduced.append(np.setdiff1d(at_risk, deaths, assume_unique=True))
    death_index = np.array([d[0] for d in death_sets], dtype=int)
    return RiskSets(
        distinct_times=_frozen_array(distinct_times),
        death_sets=tuple(death_sets),
        risk_sets=tuple(risk_sets),
        reduced_risk_sets=tuple(reduced),
        death_index=_frozen_array(death_index, dtype=int),
        order=_frozen_array(order, dtype=int),
        risk_start=_frozen_array(risk_start, dtype=int),
    )


def nelson_aalen(ds: SurvivalDataset) -> tuple[np.ndarray, np.ndarray]:
    """Nelson-Aalen cumulative hazard at the distinct uncensored times."""
    rs = build_risk_sets(ds)
    increments = np.array([len(d) / len(r) for d, r in zip(rs.death_sets, rs.risk_sets)])
    return rs.distinct_times.copy(), np.cumsum(increments)


# Data-generating model

class BaselineHazard(metaclass=ABCMeta):
    @abstractmethod
    def rate(self, t):
        pass

    @abstractmethod
    def cumulative(self, t):
        pass

    @abstractmethod
    def inverse_cumulative(self, y):
        pass

    def survival(self, t):
        return np.exp(-self.cumulative(t))

    def cdf(self, t):
        return -np.expm1(-self.cumulative(t))


@dataclass(frozen=True)
class ConstantHazard(BaselineHazard):
    value: float = 1.0

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigurationError(f'baseline hazard rate must be positive, got {self.value}')

    def rate(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.value)

    def cumulative(self, t):
        return self.value * np.asarray(t, dtype=float)

    def inverse_cumulative(self, y):
        return np.asarray(y, dtype=float) / self.value


@dataclass(frozen=True)
class WeibullHazard(BaselineHazard):
    """A_0(t) = (scale * t) ** shape."""
    scale: float = 1.0
    shape: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ConfigurationError(f'Weibull scale and shape must be positive, got {self.scale}, {self.shape}')

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        return self.shape * self.scale * (self.scale * t) ** (self.shape - 1)

    def cumulative(self, t):
        return (self.scale * np.asarray(t, dtype=float)) ** self.shape

    def inverse_cumulative(self, y):
        return np.asarray(y, dtype=float) ** (1 / self.shape) / self.scale


@dataclass(frozen=True)
class PiecewiseConstantHazard(BaselineHazard):
    rates: StepFunction

    def __post_init__(self):
        if any(v <= 0 for v in self.rates.values):
            raise ConfigurationError('piecewise-constant hazard rates must be positive')

    def rate(self, t):
        return self.rates(t)

    def cumulative(self, t):
        return self.rates.integral(t)

    def inverse_cumulative(self, y):
        y = np.asarray(y, dtype=float)
        knots = np.concatenate([[0.0], self.rates.breaks])
        cum = self.rates.integral(knots)
        idx = np.clip(np.searchsorted(cum, y, side='right') - 1, 0, len(knots) - 1)
        return knots[idx] + (y - cum[idx]) / np.asarray(self.rates.values)[idx]


class RateFunctionHazard(BaselineHazard):
    """A generic hazard rate; the cumulative hazard is computed by quadrature and inverted by root finding."""

    def __init__(self, rate_fn: Callable[[float], float], tau: float):
        self._rate_fn = rate_fn
        self.tau = float(tau)
        grid = np.linspace(0.0, self.tau, 65)
        if np.any(np.asarray([rate_fn(t) for t in grid[1:]]) < 0):
            raise ConfigurationError('baseline hazard rate must be nonnegative')
        with warnings.catch_warnings():
            warnings.simplefilter('error', integrate.IntegrationWarning)
            try:
                total, _ = integrate.quad(rate_fn, 0.0, self.tau, limit=200)
            except (integrate.IntegrationWarning, ZeroDivisionError, OverflowError) as e:
                raise ConfigurationError(f'baseline hazard is not integrable on [0, {self.tau}]: {e}') from e
        if not np.isfinite(total):
            raise ConfigurationError(f'baseline hazard is not integrable on [0, {self.tau}]')

    def rate(self, t):
        return np.vectorize(self._rate_fn, otypes=[float])(t)

    def _cumulative_scalar(self, t: float) -> float:
        return integrate.quad(self._rate_fn, 0.0, t, limit=200)[0] if t > 0 else 0.0

    def cumulative(self, t):
        return np.vectorize(self._cumulative_scalar, otypes=[float])(t)

    def _inverse_scalar(self, y: float) -> float:
        upper = self.tau
        while self._cumulative_scalar(upper) < y:
            upper *= 2
            if upper > 1e6 * self.tau:
                return np.inf
        return optimize.brentq(lambda t: self._cumulative_scalar(t) - y, 0.0, upper, xtol=1e-12)

    def inverse_cumulative(self, y):
        return np.vectorize(self._inverse_scalar, otypes=[float])(y)


class CensoringLaw(metaclass=ABCMeta):
    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        pass


@dataclass(frozen=True)
class UniformCensoring(CensoringLaw):
    upper: float
    lower: float = 0.0

    def __post_init__(self):
        if not 0 <= self.lower < self.upper:
            raise ConfigurationError(f'uniform censoring needs 0 <= lower < upper, got [{self.lower}, {self.upper}]')

    def sample(self, rng, n):
        return rng.uniform(self.lower, self.upper, size=n)


@dataclass(frozen=True)
class ExponentialCensoring(CensoringLaw):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigurationError(f'censoring rate must be positive, got {self.rate}')

    def sample(self, rng, n):
        return rng.exponential(1 / self.rate, size=n)


class NoCensoring(CensoringLaw):
    """Only administrative censoring at tau."""

    def sample(self, rng, n):
        return np.full(n, np.inf)


class CovariateLaw(metaclass=ABCMeta):
    p: int

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        pass

    @property
    @abstractmethod
    def bound(self) -> float:
        """Upper bound on the L1 norm of a draw."""


@dataclass(frozen=True)
class UniformCovariates(CovariateLaw):
    p: int = 1
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.p < 1 or not self.low < self.high:
            raise ConfigurationError(f'uniform covariates need p >= 1 and low < high, got {self}')

    def sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, self.p))

    @property
    def bound(self) -> float:
        return self.p * max(abs(self.low), abs(self.high))


@dataclass(frozen=True)
class BernoulliCovariates(CovariateLaw):
    p: int = 1
    prob: float = 0.5

    def __post_init__(self):
        if self.p < 1 or not 0 < self.prob < 1:
            raise ConfigurationError(f'Bernoulli covariates need p >= 1 and 0 < prob < 1, got {self}')

    def sample(self, rng, n):
        return (rng.random(size=(n, self.p)) < self.prob).astype(float)

    @property
    def bound(self) -> float:
        return float(self.p)


@dataclass(frozen=True)
class TrueModelSpec:
    beta0: Sequence[float]
    baseline: BaselineHazard
    censoring: CensoringLaw
    covariates: CovariateLaw
    tau: float

    def __post_init__(self):
        beta0 = _frozen_array(self.beta0).ravel()
        if len(beta0) != self.covariates.p:
            raise ConfigurationError(
                f'beta0 has dimension {len(beta0)} but the covariate law has p={self.covariates.p}')
        if not np.all(np.isfinite(beta0)):
            raise ConfigurationError('beta0 must be finite')
        if not self.tau > 0:
            raise ConfigurationError(f'tau must be positive, got {self.tau}')
        if not np.isfinite(self.baseline.cumulative(self.tau)):
            raise ConfigurationError(f'baseline hazard is not integrable on [0, {self.tau}]')
        object.__setattr__(self, 'beta0', beta0)

    @property
    def p(self) -> int:
        return len(self.beta0)


def simulate_ph_data(spec: TrueModelSpec, n: int, seed: int) -> SurvivalDataset:
    """Draw X_i = A_0^{-1}(E_i / exp(beta0'Z_i)), censor at min(C_i, tau)."""
    if n < 1:
        raise ConfigurationError(f'n must be at least 1, got {n}')
    rng = np.random.default_rng(seed)
    z = spec.covariates.sample(rng, n)
    e = rng.standard_exponential(n)
    x = spec.baseline.inverse_cumulative(e / np.exp(z @ spec.beta0))
    c = np.minimum(spec.censoring.sample(rng, n), spec.tau)
    time = np.minimum(x, c)
    status = (x <= c).astype(np.int8)
    log.debug(f'simulated n={n} records, censoring fraction {1 - status.mean():.3f}')
    return SurvivalDataset(time, status, z, tau=spec.tau)
