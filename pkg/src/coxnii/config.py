import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

from coxnii.exceptions import ConfigurationError
from coxnii.utils.logs import check_level, set_root_level

PROGRESS_MODES = {'off', 'all', 'large'}
PRIOR_FAMILIES = {'beta', 'gamma'}
CENSORING_LAWS = {'uniform', 'exponential', 'none'}
COVARIATE_LAWS = {'uniform', 'bernoulli'}


@dataclass
class CoxNiiConfig:
    log_level: int = logging.WARNING
    progress_mode: str = 'large'
    progress_threshold: int = 5000  # iterations
    quad_epsabs: float = 1e-10
    quad_epsrel: float = 1e-10
    quad_limit: int = 200
    epsilon: float = 1e-4
    beta_prior_scale: float = 10.0
    workers: int = 1

    @staticmethod
    def check_progress_mode(value) -> str:
        if value is None:
            value = 'off'
        if not isinstance(value, str):
            raise TypeError(f'progress_mode must be a str with one of the following values: {PROGRESS_MODES}')
        elif value.lower() not in PROGRESS_MODES:
            raise ValueError(f"Invalid progress_mode '{value}', must be one of {PROGRESS_MODES}")
        return value.lower()

    def __setattr__(self, name, value):
        if name == 'progress_mode':
            value = self.check_progress_mode(value)
        elif name == 'log_level':
            value = set_root_level(check_level(value))
        elif name == 'epsilon' and not 0 < value < 1:
            raise ValueError(f'epsilon must lie in (0, 1), got {value}')
        elif name in {'quad_epsabs', 'quad_epsrel', 'beta_prior_scale'} and not value > 0:
            raise ValueError(f'{name} must be positive, got {value}')
        elif name in {'quad_limit', 'workers'} and (not isinstance(value, int) or value < 1):
            raise ValueError(f'{name} must be a positive integer, got {value}')
        super().__setattr__(name, value)

    def show_progress(self, total: int) -> bool:
        if self.progress_mode == 'off':
            return False
        return self.progress_mode == 'all' or total >= self.progress_threshold

    def __repr__(self):
        params_str = ', '.join(f'{k}={v!r}' for k, v in asdict(self).items() if v is not None)
        return f'{type(self).__name__}({params_str})'


# Don't overwrite the value of COXNII_CONFIG if it has already been set
global COXNII_CONFIG  # noqa: F824
try:
    COXNII_CONFIG
except NameError:
    COXNII_CONFIG = CoxNiiConfig()


def configure(**config_params) -> CoxNiiConfig:
    for param, value in config_params.items():
        if not hasattr(COXNII_CONFIG, param):
            raise ConfigurationError(f"Unknown configuration parameter '{param}'")
        setattr(COXNII_CONFIG, param, value)
    return COXNII_CONFIG


def get_config() -> CoxNiiConfig:
    return COXNII_CONFIG


# Run configuration (the JSON document read by the command-line front end)

def _check_positive(block: str, **values):
    for name, value in values.items():
        if value is not None and not value > 0:
            raise ConfigurationError(f'{block}.{name} must be positive, got {value}')


def _check_seed(block: str, seed):
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f'{block}.seed must be an unsigned integer, got {seed!r}')


def _check_step_spec(block: str, name: str, value):
    """A rate or scale parameter is a positive number or {"breaks": [...], "values": [...]}."""
    if isinstance(value, dict):
        if set(value) != {'breaks', 'values'}:
            raise ConfigurationError(f'{block}.{name} must have exactly the keys "breaks" and "values"')
        if len(value['values']) != len(value['breaks']) + 1:
            raise ConfigurationError(f'{block}.{name} needs one more value than breaks')
        if any(not v > 0 for v in value['values']):
            raise ConfigurationError(f'{block}.{name} values must be positive')
    elif isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigurationError(f'{block}.{name} must be a positive number or a piecewise-constant spec')


@dataclass
class DataBlock:
    path: Optional[str] = None
    tau: Optional[float] = None

    def __post_init__(self):
        _check_positive('data', tau=self.tau)


@dataclass
class SimulationBlock:
    n: int = 400
    beta0: list[float] = field(default_factory=lambda: [0.5])
    baseline_rate: float = 1.0
    baseline_shape: float = 1.0
    censoring: str = 'uniform'
    censoring_upper: float = 4.0
    censoring_rate: float = 0.3
    covariate_law: str = 'uniform'
    covariate_low: float = -1.0
    covariate_high: float = 1.0
    covariate_prob: float = 0.5
    tau: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.beta0, (int, float)):
            self.beta0 = [float(self.beta0)]
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigurationError(f'simulation.n must be a positive integer, got {self.n!r}')
        if self.censoring not in CENSORING_LAWS:
            raise ConfigurationError(f"simulation.censoring must be one of {sorted(CENSORING_LAWS)}")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ConfigurationError(f"simulation.covariate_law must be one of {sorted(COVARIATE_LAWS)}")
        if not self.covariate_low < self.covariate_high:
            raise ConfigurationError('simulation.covariate_low must be below covariate_high')
        if not 0 < self.covariate_prob < 1:
            raise ConfigurationError('simulation.covariate_prob must lie in (0, 1)')
        _check_positive('simulation', baseline_rate=self.baseline_rate, baseline_shape=self.baseline_shape,
                        censoring_upper=self.censoring_upper, censoring_rate=self.censoring_rate, tau=self.tau)
        _check_seed('simulation', self.seed)


@dataclass
class PriorBlock:
    family: str = 'beta'
    c: float | dict = 1.0
    lam: float | dict = 1.0
    epsilon: float = 1e-4
    beta_prior_scale: float = 10.0

    def __post_init__(self):
        if self.family not in PRIOR_FAMILIES:
            raise ConfigurationError(f"prior.family must be one of {sorted(PRIOR_FAMILIES)}, got '{self.family}'")
        _check_step_spec('prior', 'c', self.c)
        _check_step_spec('prior', 'lam', self.lam)
        if not 0 < self.epsilon < 1:
            raise ConfigurationError(f'prior.epsilon must lie in (0, 1), got {self.epsilon}')
        _check_positive('prior', beta_prior_scale=self.beta_prior_scale)


@dataclass
class ChainBlock:
    draws: int = 20000
    burn_in: int = 2000
    paths: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.draws, int) or self.draws < 1:
            raise ConfigurationError(f'chain.draws must be a positive integer, got {self.draws!r}')
        if not isinstance(self.burn_in, int) or self.burn_in < 0:
            raise ConfigurationError(f'chain.burn_in must be a nonnegative integer, got {self.burn_in!r}')
        if not isinstance(self.paths, int) or self.paths < 0:
            raise ConfigurationError(f'chain.paths must be a nonnegative integer, got {self.paths!r}')
        _check_seed('chain', self.seed)


@dataclass
class DiagnosticBlock:
    grid_size: int = 10
    grid: Optional[list[float]] = None
    ks: float = 0.05
    cov_rel_err: float = 0.15
    mean_gap_factor: float = 5.0

    def __post_init__(self):
        if not isinstance(self.grid_size, int) or self.grid_size < 1:
            raise ConfigurationError(f'diagnostics.grid_size must be a positive integer, got {self.grid_size!r}')
        _check_positive('diagnostics', ks=self.ks, cov_rel_err=self.cov_rel_err, mean_gap_factor=self.mean_gap_factor)
        if self.grid is not None and any(not t > 0 for t in self.grid):
            raise ConfigurationError('diagnostics.grid must contain positive times')


@dataclass
class CoverageBlock:
    replications: int = 200
    level: float = 0.90
    draws: int = 2000
    burn_in: int = 500
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.replications, int) or self.replications < 50:
            raise ConfigurationError(f'coverage.replications must be an integer >= 50, got {self.replications!r}')
        if not 0 < self.level < 1:
            raise ConfigurationError(f'coverage.level must lie in (0, 1), got {self.level}')
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigurationError(f'coverage.workers must be a positive integer, got {self.workers!r}')


@dataclass
class OutputBlock:
    out: Optional[str] = None
    draws: Optional[str] = None
    paths: Optional[str] = None
    format: str = 'json'

    def __post_init__(self):
        if self.format not in {'json', 'csv'}:
            raise ConfigurationError(f"output.format must be 'json' or 'csv', got '{self.format}'")


_BLOCKS = {
    'data': DataBlock,
    'simulation': SimulationBlock,
    'prior': PriorBlock,
    'chain': ChainBlock,
    'diagnostics': DiagnosticBlock,
    'coverage': CoverageBlock,
    'output': OutputBlock,
}


def _build_block(name: str, cls, values):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigurationError(f"config block '{name}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"Unknown key(s) in config block '{name}': {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid config block '{name}': {e}") from e


@dataclass
class RunConfig:
    data: DataBlock = field(default_factory=DataBlock)
    simulation: SimulationBlock = field(default_factory=SimulationBlock)
    prior: PriorBlock = field(default_factory=PriorBlock)
    chain: ChainBlock = field(default_factory=ChainBlock)
    diagnostics: DiagnosticBlock = field(default_factory=DiagnosticBlock)
    coverage: CoverageBlock = field(default_factory=CoverageBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @classmethod
    def from_dict(cls, d: dict) -> Self:
        unknown = set(d) - set(_BLOCKS)
        if unknown:
            raise ConfigurationError(f'Unknown config block(s): {sorted(unknown)}')
        return cls(**{name: _build_block(name, block_cls, d.get(name)) for name, block_cls in _BLOCKS.items()})

    @classmethod
    def load(cls, path: Optional[str | Path]) -> Self:
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f'config file not found: {path}')
        with open(path, 'r', encoding='utf-8') as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f'config file {path} is not valid JSON: {e}') from e
        if not isinstance(d, dict):
            raise ConfigurationError(f'config file {path} must contain a JSON object')
        return cls.from_dict(d)

    def override(self, block: str, **values: Any) -> Self:
        """Return a copy with the given (non-None) values replacing those of one block."""
        current = asdict(getattr(self, block))
        current.update({k: v for k, v in values.items() if v is not None})
        blocks = {name: getattr(self, name) for name in _BLOCKS}
        blocks[block] = _build_block(block, _BLOCKS[block], current)
        return type(self)(**blocks)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _BLOCKS}
