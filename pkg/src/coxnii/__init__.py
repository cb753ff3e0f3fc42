__version__ = '0.1.0'

from .config import configure, get_config
from .survival import SurvivalDataset, TrueModelSpec, parse_dataset, simulate_ph_data, validate_dataset
from .priors import HazardPath, NiiPriorSpec, check_conditions, make_prior, sample_prior_path
from .frequentist import CoxModel, FitResult, fit_mle
from .posterior import BetaPosteriorSpec, NiiPosterior, log_marginal_posterior, sample_beta_posterior
from .diagnostics import BvmReport, coverage_experiment, emit_report, run_bvm_check
