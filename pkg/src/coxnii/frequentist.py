"""Partial-likelihood estimation and the empirical functionals of the asymptotic limit."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from coxnii.exceptions import DegenerateRiskSetError, MonotoneLikelihoodError, NumericalError
from coxnii.priors import HazardPath
from coxnii.survival import SurvivalDataset, build_risk_sets
from coxnii.utils.logs import get_logger

log = get_logger('frequentist')

MAX_HALVINGS = 30
MONOTONE_ETA_BOUND = 50.0
STEP_TOL = 1e-6
FLAT_STEPS = 3
COND_LIMIT = 1e12
# relative slack below which a change in l_n is rounding noise
LOGLIK_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    info_hat: np.ndarray
    breslow: HazardPath
    converged: bool
    iterations: int
    gradient_norm: float
    loglik: float

    @property
    def p(self) -> int:
        return len(self.beta_hat)

    def to_dict(self) -> dict:
        return {
            'beta_hat': [float(b) for b in self.beta_hat],
            'info_hat': [float(v) for v in self.info_hat.ravel()],
            'breslow': [[float(t), float(a)] for t, a in self.breslow.steps()],
            'converged': bool(self.converged),
            'iterations': int(self.iterations),
            'gradient_norm': float(self.gradient_norm),
            'loglik': float(self.loglik),
        }


@dataclass(frozen=True, eq=False)
class LimitFunctionals:
    """Empirical plug-ins of S^0, S^1, S^2, e_0, U_0, V and I at a given beta, on the distinct event times."""
    beta: np.ndarray
    distinct_times: np.ndarray
    S0_hat: np.ndarray  # (q,)
    S1_hat: np.ndarray  # (q, p)
    S2_hat: np.ndarray  # (q, p, p)
    dA: np.ndarray  # Breslow increments
    e0_hat: np.ndarray  # cumulative, (q, p)
    U0_hat: np.ndarray  # cumulative, (q,)
    V_hat: np.ndarray  # (q, p, p)
    I_hat: np.ndarray  # (p, p)

    def _index(self, t):
        return np.searchsorted(self.distinct_times, np.asarray(t, dtype=float), side='right')

    def U0(self, t):
        out = np.concatenate([[0.0], self.U0_hat])[self._index(t)]
        return out if np.ndim(out) else float(out)

    def e0(self, t):
        return np.vstack([np.zeros((1, self.e0_hat.shape[1])), self.e0_hat])[self._index(t)]

    def S0(self, t):
        """S^0 just after the last event time at or before t; equals S^0(t) at event times."""
        idx = np.searchsorted(self.distinct_times, np.asarray(t, dtype=float), side='left')
        return self.S0_hat[np.minimum(idx, len(self.S0_hat) - 1)]


class CoxModel:
    """Cox proportional hazards model on a fixed dataset; records are processed in sorted order."""

    def __init__(self, dataset: SurvivalDataset):
        self.dataset = dataset
        self.risk_sets = build_risk_sets(dataset)
        order = self.risk_sets.order
        self._z = dataset.covariates[order]
        self._risk_start = np.asarray(self.risk_sets.risk_start)
        self._death_counts = np.array([len(d) for d in self.risk_sets.death_sets], dtype=float)
        self._z_death = np.array([dataset.covariates[d].sum(axis=0) for d in self.risk_sets.death_sets]).reshape(
            -1, dataset.p)

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def p(self) -> int:
        return self.dataset.p

    @property
    def q(self) -> int:
        return self.risk_sets.q

    @property
    def logger(self):
        return log

    def _check_events(self):
        if self.q == 0:
            raise DegenerateRiskSetError('no uncensored observations: the partial likelihood is undefined')

    def _risk_sums(self, beta, order: int):
        """Shifted risk sums at the event times and the shift (log scale) that was removed."""
        eta = self._z @ np.asarray(beta, dtype=float).reshape(self.p)
        shift = float(eta.max())
        w = np.exp(eta - shift)
        s0 = np.cumsum(w[::-1])[::-1][self._risk_start]
        s1 = s2 = None
        if order >= 1:
            s1 = np.cumsum((w[:, None] * self._z)[::-1], axis=0)[::-1][self._risk_start]
        if order >= 2:
            outer = w[:, None, None] * self._z[:, :, None] * self._z[:, None, :]
            s2 = np.cumsum(outer[::-1], axis=0)[::-1][self._risk_start]
        return s0, s1, s2, shift

    def partial_loglik(self, beta, order: int = 0):
        """l_n(beta) and, for order 1 or 2, its gradient and Hessian."""
        self._check_events()
        beta = np.asarray(beta, dtype=float).reshape(self.p)
        s0, s1, s2, shift = self._risk_sums(beta, order)
        d = self._death_counts
        value = float(np.sum(self._z_death @ beta - d * (np.log(s0) + shift - np.log(self.n))))
        if order == 0:
            return value
        mean = s1 / s0[:, None]
        gradient = np.sum(self._z_death - d[:, None] * mean, axis=0)
        if order == 1:
            return value, gradient
        cov = s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]
        hessian = -np.sum(d[:, None, None] * cov, axis=0)
        return value, gradient, (hessian + hessian.T) / 2

    def _newton_direction(self, gradient, hessian):
        try:
            if np.linalg.cond(-hessian) > COND_LIMIT:
                raise np.linalg.LinAlgError('ill-conditioned Hessian')
            direction = np.linalg.solve(-hessian, gradient)
        except np.linalg.LinAlgError:
            self.logger.debug('Hessian numerically singular, taking a gradient step')
            return gradient, False
        if not np.all(np.isfinite(direction)):
            return gradient, False
        return direction, True

    def fit_mle(self, init=None, tol: float = 1e-8, max_iter: int = 50) -> FitResult:
        """Damped Newton ascent on l_n with step halving."""
        self._check_events()
        beta = np.zeros(self.p) if init is None else np.asarray(init, dtype=float).reshape(self.p).copy()
        max_norm = self.dataset.max_norm
        bound = MONOTONE_ETA_BOUND / max_norm if max_norm > 0 else np.inf
        converged = False
        flat = 0
        iterations = 0
        value, gradient, hessian = self.partial_loglik(beta, order=2)
        for iterations in range(max_iter + 1):
            direction, newton = self._newton_direction(gradient, hessian)
            gradient_norm = float(np.max(np.abs(gradient)))
            if newton and gradient_norm < tol and np.max(np.abs(direction)) < STEP_TOL:
                converged = True
                break
            if iterations == max_iter:
                break
            step = 1.0
            slack = LOGLIK_RTOL * (1 + abs(value))
            for _ in range(MAX_HALVINGS + 1):
                candidate = beta + step * direction
                new_value = self.partial_loglik(candidate)
                if np.isfinite(new_value) and new_value >= value - slack:
                    break
                step /= 2
            else:
                self.logger.warning(f'line search failed at iteration {iterations}, beta={beta}')
                break
            gain = new_value - value
            if step == 1.0 and gain < slack and np.max(np.abs(direction)) >= 0.5:
                flat += 1
            else:
                flat = 0
            beta = candidate
            self.logger.debug(f'iteration {iterations + 1}: l_n={new_value:.12g}, step={step:g}, beta={beta}')
            if np.max(np.abs(beta)) > bound or flat >= FLAT_STEPS:
                raise MonotoneLikelihoodError(
                    f'monotone likelihood: the partial likelihood keeps increasing along beta={beta} '
                    f'(|beta| bound {bound:g}); no finite maximizer exists')
            value, gradient, hessian = self.partial_loglik(beta, order=2)

        gradient_norm = float(np.max(np.abs(gradient)))
        if converged:
            self.logger.info(f'MLE converged in {iterations} iterations: beta_hat={beta}, |grad|={gradient_norm:.2e}')
        else:
            self.logger.warning(f'MLE did not converge in {max_iter} iterations (|grad|={gradient_norm:.2e})')
        info = -hessian / self.n
        return FitResult(beta_hat=beta, info_hat=(info + info.T) / 2, breslow=self.breslow(beta),
                         converged=converged, iterations=iterations, gradient_norm=gradient_norm, loglik=value)

    def breslow(self, beta) -> HazardPath:
        """A(t) = sum over event times t_i <= t of |D(t_i)| / sum_{j in R(t_i)} exp(beta'Z_j)."""
        increments = self.breslow_increments(beta)
        return HazardPath.from_steps(self.risk_sets.distinct_times, increments, tau=self.dataset.tau,
                                     bounded_jumps=False)

    def breslow_increments(self, beta) -> np.ndarray:
        if self.q == 0:
            return np.zeros(0)
        s0, _, _, shift = self._risk_sums(beta, 0)
        return self._death_counts / s0 * np.exp(-shift)

    def limit_functionals(self, beta, breslow_path: Optional[HazardPath] = None) -> LimitFunctionals:
        self._check_events()
        beta = np.asarray(beta, dtype=float).reshape(self.p)
        eta = self._z @ beta
        w = np.exp(eta)
        n = self.n
        S0 = np.cumsum(w[::-1])[::-1][self._risk_start] / n
        S1 = np.cumsum((w[:, None] * self._z)[::-1], axis=0)[::-1][self._risk_start] / n
        outer = w[:, None, None] * self._z[:, :, None] * self._z[:, None, :]
        S2 = np.cumsum(outer[::-1], axis=0)[::-1][self._risk_start] / n
        if np.any(~np.isfinite(S0)) or np.any(S0 <= 0):
            raise DegenerateRiskSetError(f'S0 vanishes or overflows inside [0, tau] at beta={beta}')
        times = self.risk_sets.distinct_times
        if breslow_path is None:
            dA = self._death_counts / (n * S0)
        else:
            at = breslow_path(times)
            dA = np.diff(np.concatenate([[0.0], at]))
        mean = S1 / S0[:, None]
        V = S2 / S0[:, None, None] - mean[:, :, None] * mean[:, None, :]
        info = np.sum(V * (S0 * dA)[:, None, None], axis=0)
        return LimitFunctionals(
            beta=beta,
            distinct_times=np.asarray(times),
            S0_hat=S0, S1_hat=S1, S2_hat=S2, dA=dA,
            e0_hat=np.cumsum(mean * dA[:, None], axis=0),
            U0_hat=np.cumsum(dA / S0),
            V_hat=V,
            I_hat=(info + info.T) / 2,
        )


def _inverse_information(fn: LimitFunctionals) -> np.ndarray:
    try:
        if np.linalg.cond(fn.I_hat) > COND_LIMIT:
            raise np.linalg.LinAlgError('ill-conditioned')
        return np.linalg.inv(fn.I_hat)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f'information matrix is singular: {fn.I_hat.tolist()}') from e


def limit_covariance_A(s: float, t: float, fn: LimitFunctionals) -> float:
    """U_0(s ^ t) + e_0(s)' I^{-1} e_0(t)."""
    inv = _inverse_information(fn)
    return float(fn.U0(min(s, t)) + fn.e0(s) @ inv @ fn.e0(t))


def limit_covariance_matrix(grid, fn: LimitFunctionals) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    inv = _inverse_information(fn)
    e0 = fn.e0(grid)
    u0 = fn.U0(np.minimum.outer(grid, grid))
    return u0 + e0 @ inv @ e0.T


def fit_mle(dataset: SurvivalDataset, init=None, tol: float = 1e-8, max_iter: int = 50) -> FitResult:
    return CoxModel(dataset).fit_mle(init=init, tol=tol, max_iter=max_iter)


def simulate_limit_process(grid, fn: LimitFunctionals, n_draws: int, seed: int = 0) -> np.ndarray:
    """Draws of W(U_0(s)) - X'e_0(s) on ``grid``, with W a Brownian motion and X ~ N(0, I^{-1}) independent.

    Returns an (n_draws, len(grid)) array whose covariance approximates ``limit_covariance_matrix``.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError('grid must be nondecreasing')
    rng = np.random.default_rng(seed)
    inv = _inverse_information(fn)
    variances = np.diff(np.concatenate([[0.0], fn.U0(grid)]))
    w = np.cumsum(rng.standard_normal((n_draws, len(grid))) * np.sqrt(np.maximum(variances, 0.0)), axis=1)
    x = rng.multivariate_normal(np.zeros(len(inv)), inv, size=n_draws)
    return w - x @ fn.e0(grid).T
