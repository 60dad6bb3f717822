"""Command line entry point: simulate, dropout-sim, impute, synthetic-rct, spectrum, evaluate.

Every output directory gets a manifest.json echoing the effective
configuration, seed and schema version. Exit codes: 0 success,
2 validation error, 3 I/O error, 4 numerical failure.
"""
import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from prometheus_client import REGISTRY, disable_created_metrics, generate_latest
from pydantic import BaseModel, ValidationError

import settings
from dataset import TrialDataset, counterfactual_targets, dropout_targets
from dgp import simulate_dropouts, simulate_trial
from errors import DataValidationError, StorageError, TrialError
from evaluation import dropout_trajectories, run_dropout_study, run_synthetic_rct_study
from schemas.config import ESTIMATORS, MECHANISMS, CliConfig
from spectra import arm_energy_profiles
from storage import (OutputSession, load_dataset, read_json, write_dataset, write_dropouts, write_frame,
                     write_ground_truth, write_json)
from worker import PREDICTION_COLUMNS, build_predictors, mechanism_rng, predict_targets

logger = logging.getLogger("snntrials")

# no *_created timestamps in metrics.prom
disable_created_metrics()


class TrialArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors share the JSON error line."""

    def error(self, message):
        raise DataValidationError(f"{self.prog}: {message}")


def _override(model: BaseModel, **updates) -> BaseModel:
    updates = {key: value for key, value in updates.items() if value is not None}
    if not updates:
        return model
    return type(model).model_validate({**model.model_dump(), **updates})


def _parse_rho(text: str) -> Dict[int, float]:
    rho = {}
    for item in text.split(','):
        visit, _, rate = item.partition(':')
        try:
            rho[int(visit)] = float(rate)
        except ValueError:
            raise DataValidationError(f"--rho entries must look like 'visit:rate', got '{item}'")
    return rho


def _split(text: Optional[str]) -> Optional[List[str]]:
    return [item.strip() for item in text.split(',') if item.strip()] if text else None


def resolve_config(args) -> CliConfig:
    """File configuration, then command-line flags on top."""
    config = CliConfig.model_validate(read_json(args.config)) if args.config else CliConfig()
    alpha = getattr(args, 'alpha', None)
    if alpha is not None and not 0.0 < alpha < 1.0:
        raise DataValidationError(f"--alpha must lie in (0, 1), got {alpha}")
    snn = _override(config.snn, alpha=alpha, n_subgroups=getattr(args, 'subgroups', None),
                    rank_mode=getattr(args, 'rank_mode', None), seed=args.seed,
                    noise_sqrt_denominator=True if getattr(args, 'sqrt_noise', False) else None)
    matching = _override(config.matching, n_neighbors=getattr(args, 'neighbors', None))
    rho = getattr(args, 'rho', None)
    schedule = _override(config.schedule, rho=_parse_rho(rho) if rho else None)
    factor_model = _override(
        config.factor_model, n_patients=getattr(args, 'patients', None), n_visits=getattr(args, 'visits', None),
        n_arms=getattr(args, 'arms', None), n_covariates=getattr(args, 'covariates_count', None),
        rank=getattr(args, 'rank', None), outcome_noise_std=getattr(args, 'noise', None),
        covariate_noise_std=getattr(args, 'covariate_noise', None),
        factor_distribution=getattr(args, 'factors', None))
    study = _override(
        config.study, n_repeats=getattr(args, 'repeats', None), mechanisms=_split(getattr(args, 'mechanisms', None)),
        estimators=_split(getattr(args, 'estimators', None)), eval_visit=getattr(args, 'eval_visit', None),
        all_visits=True if getattr(args, 'all_visits', False) else None, workers=getattr(args, 'workers', None),
        seed=args.seed)
    study = study.model_copy(update={'snn': snn, 'matching': matching, 'schedule': schedule})
    return CliConfig(snn=snn, matching=matching, schedule=schedule, factor_model=factor_model, study=study)


def _seed(config: CliConfig) -> int:
    return config.study.seed


def _manifest(session: OutputSession, args, config: CliConfig, outputs: List[str], **extra) -> None:
    payload = {
        'schema_version': settings.SCHEMA_VERSION,
        'command': args.command,
        'seed': _seed(config),
        'config': config.model_dump(mode='json'),
        'outputs': outputs,
    }
    payload.update(extra)
    write_json(payload, session.path('manifest.json'))


def _load(args) -> TrialDataset:
    return load_dataset(args.outcomes, args.covariates)


def _inputs(args) -> dict:
    return {'outcomes': args.outcomes, 'covariates': args.covariates}


def cmd_simulate(args, config: CliConfig) -> None:
    dataset, ground_truth = simulate_trial(config.factor_model, np.random.default_rng(_seed(config)))
    names = ['outcomes.csv', 'covariates.csv', 'ground_truth.csv']
    with OutputSession(args.out) as session:
        outcome_path, covariate_path, truth_path = session.paths(names)
        write_dataset(dataset, outcome_path, covariate_path)
        write_ground_truth(dataset, ground_truth, truth_path)
        _manifest(session, args, config, names)
    logger.info(json.dumps({"event": "simulated", "patients": dataset.n_patients, "visits": dataset.n_visits,
                            "arms": dataset.n_arms, "out": args.out}))


def cmd_dropout_sim(args, config: CliConfig) -> None:
    dataset = _load(args)
    mechanism = args.mechanism.upper()
    if mechanism not in MECHANISMS:
        raise DataValidationError(f"--mechanism must be one of {MECHANISMS}, got '{args.mechanism}'")
    masked, dropout_sets = simulate_dropouts(dataset, mechanism, config.schedule,
                                             mechanism_rng(_seed(config), mechanism), args.baseline_column)
    names = ['outcomes.csv', 'covariates.csv', f'dropouts.{args.format}']
    with OutputSession(args.out) as session:
        outcome_path, covariate_path, dropout_path = session.paths(names)
        write_dataset(masked, outcome_path, covariate_path)
        write_dropouts(masked, dropout_sets, mechanism, dropout_path, fmt=args.format)
        _manifest(session, args, config, names, inputs=_inputs(args), mechanism=mechanism,
                  baseline_column=args.baseline_column)
    logger.info(json.dumps({"event": "dropouts_simulated", "mechanism": mechanism,
                            "dropouts": sum(len(s) for s in dropout_sets.values())}))


def _predict_and_write(args, config: CliConfig, dataset: TrialDataset, targets, estimators: List[str]) -> None:
    predictors = build_predictors(estimators, config.study, config.snn.seed)
    records = predict_targets(dataset, targets, predictors)
    frame = pd.DataFrame(records, columns=PREDICTION_COLUMNS)
    names = [f'predictions.{args.format}']
    with OutputSession(args.out) as session:
        write_frame(frame, session.path(names[0]), args.format)
        _manifest(session, args, config, names, inputs=_inputs(args), estimators=estimators)
    logger.info(json.dumps({"event": "predicted", "command": args.command, "targets": len(targets),
                            "estimators": estimators}))


def _estimators(args, allowed) -> List[str]:
    names = [name.lower() for name in _split(args.estimator) or []]
    unknown = [name for name in names if name not in allowed]
    if unknown or not names:
        raise DataValidationError(f"--estimator must be drawn from {list(allowed)}, got {args.estimator}")
    return list(dict.fromkeys(names))


def cmd_impute(args, config: CliConfig) -> None:
    dataset = _load(args)
    _predict_and_write(args, config, dataset, dropout_targets(dataset), _estimators(args, ESTIMATORS))


def cmd_synthetic_rct(args, config: CliConfig) -> None:
    dataset = _load(args)
    estimators = _estimators(args, [name for name in ESTIMATORS if name != 'locf'])
    _predict_and_write(args, config, dataset, counterfactual_targets(dataset), estimators)


def cmd_spectrum(args, config: CliConfig) -> None:
    if args.top < 1:
        raise DataValidationError(f"--top must be >= 1, got {args.top}")
    dataset = _load(args)
    raw = arm_energy_profiles(dataset, args.top)
    standardized = arm_energy_profiles(dataset, args.top, standardized=True)
    names = [f'spectrum.{args.format}', f'spectrum_standardized.{args.format}']
    with OutputSession(args.out) as session:
        raw_path, standardized_path = session.paths(names)
        write_frame(raw, raw_path, args.format)
        write_frame(standardized, standardized_path, args.format)
        _manifest(session, args, config, names, inputs=_inputs(args), top=args.top)


def _study_dataset(args, config: CliConfig) -> TrialDataset:
    if args.outcomes or args.covariates:
        if not (args.outcomes and args.covariates):
            raise DataValidationError("--outcomes and --covariates must be given together")
        return _load(args)
    dataset, _ = simulate_trial(config.factor_model, np.random.default_rng(_seed(config)))
    return dataset


def cmd_evaluate(args, config: CliConfig) -> None:
    dataset = _study_dataset(args, config)
    studies = ['dropout', 'synthetic-rct'] if args.study == 'both' else [args.study]
    reports = []
    if 'dropout' in studies:
        reports.append(run_dropout_study(dataset, config.study))
    if 'synthetic-rct' in studies:
        reports.append(run_synthetic_rct_study(dataset, config.study))

    rows = pd.concat([report.rows for report in reports], ignore_index=True)
    split = pd.concat([report.diagnostics_split for report in reports], ignore_index=True)
    predictions = pd.concat([report.predictions for report in reports], ignore_index=True)
    trajectories = {}
    if args.trajectories and 'dropout' in studies:
        for mechanism in config.study.mechanisms:
            trajectories[f'trajectories_{mechanism}.csv'] = dropout_trajectories(dataset, config.study, mechanism)

    names = []
    with OutputSession(args.out) as session:
        def output(name: str) -> str:
            names.append(name)
            return session.path(name)

        write_frame(rows, output('report.csv'))
        write_json({'schema_version': settings.SCHEMA_VERSION,
                    'studies': {report.study: report.to_json() for report in reports}}, output('report.json'))
        write_frame(split, output(f'diagnostics.{args.format}'), args.format)
        write_frame(predictions, output(f'predictions.{args.format}'), args.format)
        for name, frame in trajectories.items():
            write_frame(frame, output(name))
        if args.metrics:
            with open(output('metrics.prom'), 'wb') as f:
                f.write(generate_latest(REGISTRY))
        _manifest(session, args, config, names,
                  inputs=_inputs(args) if args.outcomes else {'simulated': True}, study=args.study)
    for report in reports:
        logger.info(json.dumps({"event": "evaluated", "study": report.study, **{
            key: report.summary()[key] for key in ('relative_improvement', 'diagnostics_gap')}}))


def _add_data_flags(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument('--outcomes', required=required, help='long-format outcome CSV')
    parser.add_argument('--covariates', required=required, help='covariate CSV')


def _add_snn_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--alpha', type=float, help='diagnostic tolerance in (0, 1)')
    parser.add_argument('--subgroups', type=int, help='number of donor subgroups K')
    parser.add_argument('--rank-mode', help="universal, fixed:<b> or energy:<fraction>")
    parser.add_argument('--sqrt-noise', action='store_true', help='divide the noise scale by sqrt(|T| + d)')
    parser.add_argument('--neighbors', type=int, help='matching neighbours')


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--config', help='JSON configuration file')
    shared.add_argument('--seed', type=int, help='base seed')
    shared.add_argument('--out', default='out', help='output directory')
    shared.add_argument('--format', choices=['csv', 'json'], default='csv')

    parser = TrialArgumentParser(prog='snn-trials', description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest='command', parser_class=TrialArgumentParser)
    commands.required = True

    simulate = commands.add_parser('simulate', parents=[shared], help='generate a synthetic trial')
    simulate.add_argument('--patients', type=int)
    simulate.add_argument('--visits', type=int)
    simulate.add_argument('--arms', type=int)
    simulate.add_argument('--covariates', dest='covariates_count', type=int)
    simulate.add_argument('--rank', type=int)
    simulate.add_argument('--noise', type=float, help='outcome noise std')
    simulate.add_argument('--covariate-noise', type=float)
    simulate.add_argument('--factors', choices=['uniform', 'gaussian'])
    simulate.set_defaults(handler=cmd_simulate)

    dropout = commands.add_parser('dropout-sim', parents=[shared], help='withdraw patients from a complete trial')
    _add_data_flags(dropout)
    dropout.add_argument('--mechanism', default='MCAR', help='MCAR, MAR or MNAR')
    dropout.add_argument('--rho', help="dropout schedule, e.g. '2:0.10,3:0.08,4:0.06,5:0.04'")
    dropout.add_argument('--baseline-column', default=settings.BASELINE_COLUMN)
    dropout.set_defaults(handler=cmd_dropout_sim)

    impute = commands.add_parser('impute', parents=[shared], help='predict every post-withdrawal outcome')
    _add_data_flags(impute)
    impute.add_argument('--estimator', default='snn', help='comma list of snn, naive, locf, matching')
    _add_snn_flags(impute)
    impute.set_defaults(handler=cmd_impute)

    rct = commands.add_parser('synthetic-rct', parents=[shared], help='predict every unassigned arm outcome')
    _add_data_flags(rct)
    rct.add_argument('--estimator', default='snn,naive,matching', help='comma list of snn, naive, matching')
    _add_snn_flags(rct)
    rct.set_defaults(handler=cmd_synthetic_rct)

    spectrum = commands.add_parser('spectrum', parents=[shared], help='per-arm cumulative spectral energy')
    _add_data_flags(spectrum)
    spectrum.add_argument('--top', type=int, default=9)
    spectrum.set_defaults(handler=cmd_spectrum)

    evaluate = commands.add_parser('evaluate', parents=[shared], help='run the NMSE studies')
    _add_data_flags(evaluate, required=False)
    evaluate.add_argument('--study', choices=['dropout', 'synthetic-rct', 'both'], default='both')
    evaluate.add_argument('--repeats', type=int)
    evaluate.add_argument('--mechanisms', help='comma list of mcar, mar, mnar')
    evaluate.add_argument('--estimators', help='comma list of snn, naive, locf, matching')
    evaluate.add_argument('--eval-visit', type=int)
    evaluate.add_argument('--all-visits', action='store_true')
    evaluate.add_argument('--workers', type=int)
    evaluate.add_argument('--rho', help="dropout schedule, e.g. '2:0.10,3:0.08,4:0.06,5:0.04'")
    evaluate.add_argument('--trajectories', action='store_true', help='write per-dropout SNN trajectories')
    evaluate.add_argument('--metrics', action='store_true', help='write prometheus counters to metrics.prom')
    _add_snn_flags(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)
    return parser


def _fail(error: TrialError) -> int:
    print(json.dumps(error.to_dict()), file=sys.stderr)
    return error.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL)
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        args.handler(args, config)
    except ValidationError as e:
        first = e.errors()[0]
        location = '.'.join(str(part) for part in first['loc'])
        return _fail(DataValidationError(f"invalid configuration: {location}: {first['msg']}"))
    except OSError as e:
        return _fail(StorageError(str(e)))
    except TrialError as e:
        return _fail(e)
    return 0


if __name__ == '__main__':
    sys.exit(main())
