"""Command-line front end: ``coxnii simulate | fit | posterior | bvm-check | coverage``.

Every subcommand reads an optional JSON run configuration (``--config``); flags given on the command line
override the values of the file. Exit codes: 0 success, 1 invalid input or failed verdicts, 2 numerical
failure, 3 I/O failure, 64 usage error.
"""
import json
import sys
from typing import Optional

import click
import numpy as np

from coxnii import io
from coxnii.config import PROGRESS_MODES, PRIOR_FAMILIES, RunConfig, SimulationBlock, configure
from coxnii.diagnostics import BvmReport, Thresholds, coverage_experiment, default_grid, emit_report, make_meta, \
    run_bvm_check
from coxnii.exceptions import CoxNiiError, NumericalError
from coxnii.frequentist import fit_mle
from coxnii.posterior import GaussianBetaPrior, NiiPosterior
from coxnii.priors import NiiPriorSpec, make_prior
from coxnii.survival import (BernoulliCovariates, ConstantHazard, ExponentialCensoring, NoCensoring, SurvivalDataset,
                             TrueModelSpec, UniformCensoring, UniformCovariates, WeibullHazard, serialize_dataset,
                             simulate_ph_data, validate_dataset)
from coxnii.utils.logs import get_logger

log = get_logger('cli')

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3
EXIT_USAGE = 64


class ValidationFailed(CoxNiiError):
    """The input dataset violates a checkable regularity condition."""


# Building library objects from the run configuration

def true_model_spec(sim: SimulationBlock) -> TrueModelSpec:
    p = len(sim.beta0)
    if sim.baseline_shape == 1:
        baseline = ConstantHazard(sim.baseline_rate)
    else:
        baseline = WeibullHazard(scale=sim.baseline_rate, shape=sim.baseline_shape)
    if sim.censoring == 'uniform':
        censoring = UniformCensoring(sim.censoring_upper)
    elif sim.censoring == 'exponential':
        censoring = ExponentialCensoring(sim.censoring_rate)
    else:
        censoring = NoCensoring()
    if sim.covariate_law == 'uniform':
        covariates = UniformCovariates(p, sim.covariate_low, sim.covariate_high)
    else:
        covariates = BernoulliCovariates(p, sim.covariate_prob)
    return TrueModelSpec(sim.beta0, baseline, censoring, covariates, tau=sim.tau)


def load_dataset(cfg: RunConfig, validate: bool = True) -> tuple[SurvivalDataset, dict]:
    """The dataset named by ``data.path``, or one simulated from the ``simulation`` block; plus its provenance."""
    if cfg.data.path is not None:
        dataset = io.read(cfg.data.path, io.DatasetSerializer(tau=cfg.data.tau))
        source = {'data': cfg.data.path}
    else:
        dataset = simulate_ph_data(true_model_spec(cfg.simulation), cfg.simulation.n, cfg.simulation.seed)
        source = {'simulation': cfg.to_dict()['simulation']}
    if validate:
        verdict = validate_dataset(dataset)
        if not verdict:
            raise ValidationFailed(f'dataset failed validation: {verdict.summary()}')
    return dataset, source


def build_prior(cfg: RunConfig, tau: Optional[float]) -> NiiPriorSpec:
    return make_prior(cfg.prior.family, cfg.prior.c, cfg.prior.lam, tau=tau)


def thresholds_of(cfg: RunConfig) -> Thresholds:
    d = cfg.diagnostics
    return Thresholds(ks=d.ks, cov_rel_err=d.cov_rel_err, mean_gap_factor=d.mean_gap_factor)


def _apply_library_config(cfg: RunConfig):
    configure(epsilon=cfg.prior.epsilon, beta_prior_scale=cfg.prior.beta_prior_scale)


def _emit_json(d: dict, out: Optional[str]):
    if out is None:
        click.echo(json.dumps(d, indent=2))
    else:
        io.write(d, out, 'json')


def _emit_report(report: BvmReport, out: Optional[str], fmt: str):
    if out is None:
        click.echo(emit_report(report, fmt), nl=False)
    else:
        io.write(report, out, io.ReportSerializer(fmt))


def _load(config: Optional[str], **blocks) -> RunConfig:
    cfg = RunConfig.load(config)
    for block, values in blocks.items():
        cfg = cfg.override(block, **values)
    _apply_library_config(cfg)
    return cfg


def _tuple_or_none(values):
    return list(values) if values else None


# Shared options

def config_option(f):
    return click.option('--config', 'config', type=click.Path(dir_okay=False),
                        help='JSON run configuration; flags override its values.')(f)


def data_options(f):
    f = click.option('--tau', type=float, default=None, help='End of the observation window (default: max time).')(f)
    f = click.option('--data', 'data_path', type=click.Path(dir_okay=False), default=None,
                     help='Survival CSV (time,status,z1..zp). Without it, data are simulated.')(f)
    return f


def prior_options(f):
    f = click.option('--epsilon', type=float, default=None, help='Jump-size truncation for path sampling.')(f)
    f = click.option('--lam', type=float, default=None, help='Constant rate lambda of the Levy measure.')(f)
    f = click.option('--c', 'c', type=float, default=None, help='Constant shape c of the prior.')(f)
    f = click.option('--family', type=click.Choice(sorted(PRIOR_FAMILIES)), default=None, help='NII prior family.')(f)
    return f


def chain_options(f):
    f = click.option('--seed', type=click.IntRange(min=0), default=None, help='Seed of the sampler.')(f)
    f = click.option('--paths', type=click.IntRange(min=0), default=None,
                     help='Number of posterior hazard paths (0 skips the hazard part).')(f)
    f = click.option('--burn-in', 'burn_in', type=click.IntRange(min=0), default=None,
                     help='Metropolis iterations discarded.')(f)
    f = click.option('--draws', type=click.IntRange(min=1), default=None, help='Metropolis draws kept.')(f)
    return f


def output_options(f):
    f = click.option('--paths-out', 'paths_out', type=click.Path(dir_okay=False), default=None,
                     help='CSV of the sampled hazard paths on the grid.')(f)
    f = click.option('--draws-out', 'draws_out', type=click.Path(dir_okay=False), default=None,
                     help='CSV of the beta draws.')(f)
    f = click.option('--out', type=click.Path(dir_okay=False), default=None,
                     help='Output file (default: standard output).')(f)
    return f


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.option('--log-level', default=None, help='Logging level of the coxnii loggers (e.g. INFO, DEBUG).')
@click.option('--progress', type=click.Choice(sorted(PROGRESS_MODES)), default=None,
              help='Progress bars: off, all, or only for large loops.')
def cli(log_level: Optional[str], progress: Optional[str]):
    """Bayesian Cox regression with neutral-to-the-right priors and Bernstein-von Mises diagnostics."""
    params = {'log_level': log_level, 'progress_mode': progress}
    configure(**{k: v for k, v in params.items() if v is not None})


@cli.command()
@config_option
@click.option('--n', 'n', type=click.IntRange(min=1), default=None, help='Number of records.')
@click.option('--beta0', type=float, multiple=True, help='True coefficient; repeat for each covariate.')
@click.option('--tau', type=float, default=None, help='Administrative censoring time.')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Seed of the simulation.')
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='Dataset CSV (default: standard output).')
def simulate(config, n, beta0, tau, seed, out):
    """Simulate a right-censored proportional hazards dataset."""
    cfg = _load(config, simulation={'n': n, 'beta0': _tuple_or_none(beta0), 'tau': tau, 'seed': seed},
                output={'out': out})
    dataset = simulate_ph_data(true_model_spec(cfg.simulation), cfg.simulation.n, cfg.simulation.seed)
    log.info(f'simulated {dataset.n} records with {dataset.n_events} events')
    if cfg.output.out is None:
        click.echo(serialize_dataset(dataset), nl=False)
    else:
        io.write(dataset, cfg.output.out)
    return EXIT_OK


@cli.command()
@config_option
@data_options
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='Fit JSON (default: standard output).')
def fit(config, data_path, tau, out):
    """Maximum partial likelihood estimate, information matrix and Breslow estimator."""
    cfg = _load(config, data={'path': data_path, 'tau': tau}, output={'out': out})
    dataset, _ = load_dataset(cfg)
    result = fit_mle(dataset)
    _emit_json(result.to_dict(), cfg.output.out)
    return EXIT_OK if result.converged else EXIT_NUMERICAL


@cli.command()
@config_option
@data_options
@prior_options
@chain_options
@click.option('--level', type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.9, show_default=True,
              help='Level of the equal-tailed credible intervals.')
@output_options
def posterior(config, data_path, tau, family, c, lam, epsilon, draws, burn_in, paths, seed, level, out, draws_out,
              paths_out):
    """Sample the marginal posterior of beta and, optionally, posterior hazard paths."""
    cfg = _load(config, data={'path': data_path, 'tau': tau},
                prior={'family': family, 'c': c, 'lam': lam, 'epsilon': epsilon},
                chain={'draws': draws, 'burn_in': burn_in, 'paths': paths, 'seed': seed},
                output={'out': out, 'draws': draws_out, 'paths': paths_out})
    dataset, source = load_dataset(cfg)
    prior = build_prior(cfg, dataset.tau)
    post = NiiPosterior(dataset, prior, GaussianBetaPrior(cfg.prior.beta_prior_scale))
    result = post.fit()
    chain_seed, path_seed = np.random.SeedSequence(cfg.chain.seed).generate_state(2)
    chain = post.sample_beta_posterior(cfg.chain.draws, burn_in=cfg.chain.burn_in, seed=int(chain_seed), fit=result)
    lower, upper = chain.credible_interval(level)
    grid = (np.asarray(cfg.diagnostics.grid, dtype=float) if cfg.diagnostics.grid is not None
            else default_grid(dataset, cfg.diagnostics.grid_size))
    summary = {
        'n': dataset.n,
        'p': dataset.p,
        'seed': cfg.chain.seed,
        'prior': prior.describe(),
        **source,
        'beta_hat': result.beta_hat.tolist(),
        'posterior_mean': chain.mean().tolist(),
        'posterior_se': chain.batch_se().tolist() if cfg.chain.draws >= 20 else None,
        'credible_interval': {'level': level, 'lower': lower.tolist(), 'upper': upper.tolist()},
        'acceptance_rate': chain.acceptance_rate,
        'grid': grid.tolist(),
        'A_mean_at_posterior_mean': post.posterior_mean_path(chain.mean(), grid).tolist(),
    }
    if cfg.chain.paths > 0:
        joint = post.joint_draws(chain, grid, cfg.chain.paths, seed=int(path_seed))
        summary['A_mean'] = joint.A.mean(axis=0).tolist()
        if cfg.output.paths is not None:
            io.write(joint.to_frame(), cfg.output.paths)
    if cfg.output.draws is not None:
        io.write(chain.to_frame(), cfg.output.draws)
    _emit_json(summary, cfg.output.out)
    return EXIT_OK


@cli.command('bvm-check')
@config_option
@data_options
@prior_options
@chain_options
@output_options
@click.option('--format', 'fmt', type=click.Choice(['json', 'csv']), default=None, help='Report format.')
@click.option('--no-assert', 'no_assert', is_flag=True, help='Exit 0 even when a verdict fails.')
def bvm_check(config, data_path, tau, family, c, lam, epsilon, draws, burn_in, paths, seed, out, draws_out,
              paths_out, fmt, no_assert):
    """Check the posterior of (beta, A) against its Bernstein-von Mises limit on one dataset."""
    cfg = _load(config, data={'path': data_path, 'tau': tau},
                prior={'family': family, 'c': c, 'lam': lam, 'epsilon': epsilon},
                chain={'draws': draws, 'burn_in': burn_in, 'paths': paths, 'seed': seed},
                output={'out': out, 'draws': draws_out, 'paths': paths_out, 'format': fmt})
    dataset, source = load_dataset(cfg)
    prior = build_prior(cfg, dataset.tau)
    grid = (np.asarray(cfg.diagnostics.grid, dtype=float) if cfg.diagnostics.grid is not None
            else default_grid(dataset, cfg.diagnostics.grid_size))
    report, chain, joint = run_bvm_check(
        dataset, prior, draws=cfg.chain.draws, burn_in=cfg.chain.burn_in, paths=cfg.chain.paths,
        seed=cfg.chain.seed, grid=grid, thresholds=thresholds_of(cfg),
        log_prior=GaussianBetaPrior(cfg.prior.beta_prior_scale), epsilon=cfg.prior.epsilon, meta_extra=source)
    if cfg.output.draws is not None:
        io.write(chain.to_frame(), cfg.output.draws)
    if joint is not None and cfg.output.paths is not None:
        io.write(joint.to_frame(), cfg.output.paths)
    _emit_report(report, cfg.output.out, cfg.output.format)
    return _verdict_exit(report, no_assert)


@cli.command()
@config_option
@click.option('--n', 'n', type=click.IntRange(min=1), default=None, help='Records per replication.')
@click.option('--beta0', type=float, multiple=True, help='True coefficient; repeat for each covariate.')
@click.option('--replications', type=click.IntRange(min=50), default=None, help='Number of replications.')
@click.option('--level', type=float, default=None, help='Nominal level of the credible intervals.')
@click.option('--draws', type=click.IntRange(min=1), default=None, help='Metropolis draws per replication.')
@click.option('--burn-in', 'burn_in', type=click.IntRange(min=0), default=None, help='Burn-in per replication.')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Master seed split across replications.')
@click.option('--workers', type=click.IntRange(min=1), default=None, help='Worker processes running replications.')
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='Report file (default: standard output).')
@click.option('--format', 'fmt', type=click.Choice(['json', 'csv']), default=None, help='Report format.')
@click.option('--no-assert', 'no_assert', is_flag=True, help='Exit 0 even when the coverage verdict fails.')
def coverage(config, n, beta0, replications, level, draws, burn_in, seed, workers, out, fmt, no_assert):
    """Frequentist coverage of equal-tailed credible intervals over simulated replications."""
    cfg = _load(config, simulation={'n': n, 'beta0': _tuple_or_none(beta0), 'seed': seed},
                coverage={'replications': replications, 'level': level, 'draws': draws, 'burn_in': burn_in,
                          'workers': workers},
                output={'out': out, 'format': fmt})
    sim, cov = cfg.simulation, cfg.coverage
    spec = true_model_spec(sim)
    prior = build_prior(cfg, sim.tau)
    report = coverage_experiment(spec, sim.n, cov.replications, cov.level, sim.seed, prior, draws=cov.draws,
                                 burn_in=cov.burn_in, workers=cov.workers)
    prior_desc = prior.describe()
    prior_desc['beta_prior'] = GaussianBetaPrior(cfg.prior.beta_prior_scale).describe()
    meta = make_meta(sim.n, spec.p, sim.seed, prior_desc, thresholds_of(cfg), simulation=cfg.to_dict()['simulation'])
    full = BvmReport(meta=meta, coverage=report)
    _emit_report(full, cfg.output.out, cfg.output.format)
    return _verdict_exit(full, no_assert)


def _verdict_exit(report: BvmReport, no_assert: bool) -> int:
    failed = [name for name, ok in report.verdicts.items() if not ok]
    if failed:
        log.warning(f'failed verdicts: {failed}')
        click.echo(f'verdicts failed: {", ".join(failed)}', err=True)
        if not no_assert:
            return EXIT_INVALID
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    """Run the command line and return its exit code."""
    try:
        code = cli.main(args=argv, prog_name='coxnii', standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo('Aborted!', err=True)
        return EXIT_INVALID
    except NumericalError as e:
        click.echo(f'numerical failure: {e}', err=True)
        return EXIT_NUMERICAL
    except (CoxNiiError, ValueError) as e:
        click.echo(f'error: {e}', err=True)
        return EXIT_INVALID
    except OSError as e:
        click.echo(f'I/O failure: {e}', err=True)
        return EXIT_IO
    except click.ClickException as e:
        e.show()
        return e.exit_code
    return EXIT_OK if code is None else int(code)


if __name__ == '__main__':
    sys.exit(main())
