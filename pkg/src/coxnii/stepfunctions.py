from dataclasses import dataclass
from typing import Sequence

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from coxnii.exceptions import ConfigurationError


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous piecewise-constant function on [0, inf).

    ``values[k]`` holds on [breaks[k-1], breaks[k]) with breaks[-1] = 0 and breaks[len] = inf.
    """
    breaks: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        breaks = tuple(float(b) for b in self.breaks)
        values = tuple(float(v) for v in self.values)
        if len(values) != len(breaks) + 1:
            raise ConfigurationError(f'a step function with {len(breaks)} breaks needs {len(breaks) + 1} values')
        if any(b <= 0 for b in breaks) or any(b2 <= b1 for b1, b2 in zip(breaks, breaks[1:])):
            raise ConfigurationError(f'step function breaks must be positive and strictly increasing: {breaks}')
        if not all(np.isfinite(values)):
            raise ConfigurationError(f'step function values must be finite: {values}')
        object.__setattr__(self, 'breaks', breaks)
        object.__setattr__(self, 'values', values)

    @classmethod
    def constant(cls, value: float) -> Self:
        return cls((), (value,))

    @classmethod
    def coerce(cls, spec: 'float | dict | StepFunction') -> Self:
        """Build from a number, a ``{"breaks": [...], "values": [...]}`` mapping or another StepFunction."""
        if isinstance(spec, StepFunction):
            return spec
        if isinstance(spec, dict):
            return cls(tuple(spec['breaks']), tuple(spec['values']))
        return cls.constant(float(spec))

    def to_spec(self) -> float | dict:
        if not self.breaks:
            return self.values[0]
        return {'breaks': list(self.breaks), 'values': list(self.values)}

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1

    def inf(self, upper: float = np.inf) -> float:
        return min(self.values[:self._n_pieces_before(upper)])

    def sup(self, upper: float = np.inf) -> float:
        return max(self.values[:self._n_pieces_before(upper)])

    def _n_pieces_before(self, upper: float) -> int:
        return int(np.searchsorted(self.breaks, upper, side='left')) + 1

    def __call__(self, t):
        idx = np.searchsorted(self.breaks, np.asarray(t, dtype=float), side='right')
        out = np.asarray(self.values)[idx]
        return out if np.ndim(t) else float(out)

    def integral(self, t):
        """Exact integral from 0 to t."""
        t = np.asarray(t, dtype=float)
        knots = np.concatenate([[0.0], self.breaks])
        values = np.asarray(self.values)
        cum = np.concatenate([[0.0], np.cumsum(values[:-1] * np.diff(knots))])
        idx = np.searchsorted(self.breaks, t, side='right')
        out = cum[idx] + values[idx] * (t - knots[idx])
        return out if out.ndim else float(out)

    def scaled(self, factor: float) -> Self:
        return type(self)(self.breaks, tuple(factor * v for v in self.values))


def refine(functions: Sequence[StepFunction], lower: float, upper: float, extra_breaks=()) -> np.ndarray:
    """Knots of the common refinement of several step functions (and extra breakpoints) on [lower, upper]."""
    knots = {lower, upper}
    for fn in functions:
        knots.update(b for b in fn.breaks if lower < b < upper)
    knots.update(float(b) for b in np.asarray(extra_breaks, dtype=float).ravel() if lower < b < upper)
    return np.array(sorted(knots))
