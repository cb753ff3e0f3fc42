"""Quadrature on the jump-size scale.

Integrands over x in [0, 1] are written in the variable u = -log(1 - x), which maps the (1 - x)^a boundary
layer at x = 1 onto an exponential tail. Callers pass the integrand in u *including* the Jacobian
dx/du = exp(-u); helpers below supply stable building blocks for that.
"""
import warnings
from typing import Callable

import numpy as np
from scipy import integrate

from coxnii.config import get_config
from coxnii.exceptions import NumericalError
from coxnii.utils.logs import get_logger

log = get_logger('quadrature')

# Tail split in the rescaled variable v = rate * u; exp(-40) is below any tolerance in use
_V_SPLIT = 40.0
_U_FLOOR = 1e-300


def x_of_u(u):
    """x = 1 - exp(-u), computed without cancellation."""
    return -np.expm1(-np.asarray(u, dtype=float))


def u_of_x(x):
    return -np.log1p(-np.asarray(x, dtype=float))


def one_minus_pow(u, w):
    """1 - (1 - x)^w evaluated at u = -log(1 - x)."""
    return -np.expm1(-np.asarray(w, dtype=float) * np.asarray(u, dtype=float))


def inv_x(u):
    """1 / x at u, floored away from the removable singularity at u = 0."""
    return 1.0 / x_of_u(np.maximum(u, _U_FLOOR))


def _quad(func: Callable[[float], float], a: float, b: float) -> tuple[float, float]:
    cfg = get_config()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', integrate.IntegrationWarning)
        value, abserr = integrate.quad(func, a, b, epsabs=cfg.quad_epsabs, epsrel=cfg.quad_epsrel,
                                       limit=cfg.quad_limit)
    if not np.isfinite(value):
        raise NumericalError(f'quadrature over [{a}, {b}] returned a non-finite value ({value})')
    if caught:
        log.debug(f'quadrature over [{a}, {b}]: {caught[-1].message} (abserr={abserr:.2e})')
    return value, abserr


def integrate_log_scale(
        integrand: Callable[[float], float],
        rate: float = 1.0,
        u_lower: float = 0.0,
        u_upper: float = np.inf,
) -> float:
    """Integrate ``integrand(u)`` over [u_lower, u_upper] after rescaling by ``rate``.

    ``rate`` should be the exponential decay rate of the integrand in u (for (1 - x)^a it is about a + 1);
    rescaling keeps the adaptive subdivision working on an O(1) interval whatever the size of the exponent.
    """
    if not rate > 0:
        raise NumericalError(f'rescaling rate must be positive, got {rate}')
    v_upper = np.inf if np.isinf(u_upper) else rate * (u_upper - u_lower)
    if v_upper <= 0:
        return 0.0

    def f(v):
        return float(integrand(u_lower + v / rate))

    head, _ = _quad(f, 0.0, min(v_upper, _V_SPLIT))
    tail = 0.0
    if v_upper > _V_SPLIT:
        tail, _ = _quad(f, _V_SPLIT, v_upper)
    return (head + tail) / rate

