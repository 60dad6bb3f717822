"""NMSE evaluation of the dropout-imputation and synthetic-RCT studies."""
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import settings
from dataset import TargetTuple, TrialDataset
from dgp import simulate_dropouts
from errors import DataValidationError
from models.snn_model import SNNPredictor, SnnPrediction
from schemas.config import StudyConfig
from worker import (PREDICTION_COLUMNS, RepeatResult, job_dropout_repeat, job_synthetic_rct_repeat, mechanism_rng,
                    repeat_seed, run_repeats)

logger = logging.getLogger("snntrials")

CELL_KEYS = ['repeat', 'mechanism', 'arm', 'visit']
REPORT_COLUMNS = ['study'] + CELL_KEYS + ['estimator', 'nmse', 'n_targets']
SPLIT_COLUMNS = ['study'] + CELL_KEYS + ['passed_nmse', 'failed_nmse', 'n_passed', 'n_failed']
TRAJECTORY_COLUMNS = ['patient_id', 'visit', 'observed', 'predicted', 'lower', 'upper']
IMPROVEMENT_DEFINITION = "1 - mean NMSE(snn) / mean NMSE(best baseline), means over all report cells"


def nmse(truth: Sequence[float], predictions: Sequence[float]) -> float:
    """Squared prediction error normalized by the squared truth."""
    truth = np.asarray(truth, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if truth.shape != predictions.shape:
        raise DataValidationError(f"nmse length mismatch: {truth.size} truths, {predictions.size} predictions")
    if truth.size == 0:
        raise DataValidationError("nmse of an empty set")
    denominator = float(np.sum(truth ** 2))
    if denominator == 0:
        raise DataValidationError("nmse undefined: all true outcomes are zero")
    return float(np.sum((truth - predictions) ** 2) / denominator)


def split_nmse(truth: Sequence[float], estimates: Sequence[float],
               passed: Sequence[bool]) -> Tuple[Optional[float], Optional[float], Dict[str, int]]:
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    passed = np.asarray(passed, dtype=bool)
    passed_nmse = nmse(truth[passed], estimates[passed]) if passed.any() else None
    failed_nmse = nmse(truth[~passed], estimates[~passed]) if (~passed).any() else None
    return passed_nmse, failed_nmse, {'passed': int(passed.sum()), 'failed': int((~passed).sum())}


def split_by_diagnostics(predictions: Sequence[SnnPrediction],
                         truth: Sequence[float]) -> Tuple[Optional[float], Optional[float], Dict[str, int]]:
    """NMSE over passed and failed tuples separately; an empty side is None."""
    return split_nmse(truth, [p.estimate for p in predictions], [p.passed for p in predictions])


@dataclass
class StudyReport:
    study: str
    rows: pd.DataFrame
    diagnostics_split: pd.DataFrame
    predictions: pd.DataFrame
    counts: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    def mean_nmse(self) -> pd.Series:
        return self.rows.groupby('estimator', sort=False)['nmse'].mean()

    def summary(self) -> dict:
        means = self.mean_nmse()
        baselines = means.drop('snn', errors='ignore').dropna()
        best = baselines.idxmin() if len(baselines) else None
        improvement = None
        if 'snn' in means and best is not None and baselines[best] > 0 and pd.notna(means['snn']):
            improvement = 1.0 - means['snn'] / baselines[best]

        split = self.diagnostics_split.dropna(subset=['passed_nmse', 'failed_nmse'])
        mean_passed = split['passed_nmse'].mean() if len(split) else None
        mean_failed = split['failed_nmse'].mean() if len(split) else None
        gap = 1.0 - mean_passed / mean_failed if len(split) and mean_failed > 0 else None
        return {
            'mean_nmse': means.to_dict(),
            'best_baseline': best,
            'relative_improvement': improvement,
            'relative_improvement_definition': IMPROVEMENT_DEFINITION,
            'mean_passed_nmse': mean_passed,
            'mean_failed_nmse': mean_failed,
            'diagnostics_gap': gap,
        }

    def to_json(self) -> dict:
        return {
            'schema_version': settings.SCHEMA_VERSION,
            'study': self.study,
            'metadata': self.metadata,
            'summary': self.summary(),
            'rows': self.rows.to_dict(orient='records'),
            'diagnostics_split': self.diagnostics_split.to_dict(orient='records'),
            'counts': self.counts.to_dict(orient='records'),
        }


def _groups(frame: pd.DataFrame, keys: List[str]) -> dict:
    if frame.empty:
        return {}
    return {key: group for key, group in frame.groupby(keys, sort=False)}


def nmse_rows(study: str, frame: pd.DataFrame, cells: List[tuple], estimators: Sequence[str]) -> pd.DataFrame:
    """One row per (cell, estimator); cells without targets get nmse None."""
    groups = _groups(frame, CELL_KEYS + ['estimator'])
    rows = []
    for cell, estimator in itertools.product(cells, estimators):
        group = groups.get(cell + (estimator,))
        row = dict(zip(CELL_KEYS, cell), study=study, estimator=estimator)
        if group is None:
            row.update(nmse=None, n_targets=0)
        else:
            row.update(nmse=nmse(group['truth'], group['estimate']), n_targets=len(group))
        rows.append(row)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def split_rows(study: str, frame: pd.DataFrame, cells: List[tuple]) -> pd.DataFrame:
    snn = frame[frame['estimator'] == 'snn'] if not frame.empty else frame
    groups = _groups(snn, CELL_KEYS)
    rows = []
    for cell in cells:
        group = groups.get(cell)
        row = dict(zip(CELL_KEYS, cell), study=study)
        if group is None:
            row.update(passed_nmse=None, failed_nmse=None, n_passed=0, n_failed=0)
        else:
            passed_nmse, failed_nmse, counts = split_nmse(group['truth'], group['estimate'],
                                                          group['passed'].astype(bool))
            row.update(passed_nmse=passed_nmse, failed_nmse=failed_nmse,
                       n_passed=counts['passed'], n_failed=counts['failed'])
        rows.append(row)
    return pd.DataFrame(rows, columns=SPLIT_COLUMNS)


def _prediction_frame(results: List[RepeatResult]) -> pd.DataFrame:
    columns = ['study', 'repeat', 'mechanism'] + PREDICTION_COLUMNS + ['truth']
    records = [record for result in results for record in result.records]
    return pd.DataFrame(records, columns=columns) if records else pd.DataFrame(columns=columns)


def _metadata(dataset: TrialDataset, config: StudyConfig, results: List[RepeatResult], eval_visit: int) -> dict:
    return {
        'config': config.model_dump(mode='json'),
        'seeds': [result.seed for result in results],
        'eval_visit': eval_visit,
        'n_patients': dataset.n_patients,
        'n_visits': dataset.n_visits,
        'arms': list(dataset.arm_labels),
    }


def _require_complete(dataset: TrialDataset) -> None:
    assigned = dataset.arm_assignment >= 0
    if not assigned.any():
        raise DataValidationError("dataset has no patients with outcomes")
    if dataset.dropout[assigned].any():
        raise DataValidationError("studies need a fully observed dataset; remove real dropouts first")


def _build_report(study: str, dataset: TrialDataset, config: StudyConfig, results: List[RepeatResult],
                  mechanisms: List[str], visits: List[int], estimators: List[str], eval_visit: int) -> StudyReport:
    frame = _prediction_frame(results)
    cells = list(itertools.product(range(config.n_repeats), mechanisms, dataset.arm_labels, visits))
    report = StudyReport(
        study=study,
        rows=nmse_rows(study, frame, cells, estimators),
        diagnostics_split=split_rows(study, frame, cells) if 'snn' in estimators
        else pd.DataFrame(columns=SPLIT_COLUMNS),
        predictions=frame,
        counts=pd.DataFrame([count for result in results for count in result.counts]),
        metadata=_metadata(dataset, config, results, eval_visit),
    )
    logger.info(json.dumps({"event": "study_done", "study": study, "repeats": config.n_repeats,
                            "predictions": len(frame),
                            "relative_improvement": report.summary()['relative_improvement']}))
    return report


def run_dropout_study(dataset: TrialDataset, config: StudyConfig) -> StudyReport:
    """Simulate dropouts per repeat and mechanism, then impute each dropout's eval-visit outcome."""
    _require_complete(dataset)
    eval_visit = config.resolve_eval_visit(dataset.n_visits)
    results = run_repeats(job_dropout_repeat, dataset, config, 'dropout')
    if config.all_visits:
        first = min([v for v in config.schedule.visits() if v <= dataset.n_visits] or [dataset.n_visits])
        visits = list(range(first, dataset.n_visits + 1))
    else:
        visits = [eval_visit]
    return _build_report('dropout', dataset, config, results, list(config.mechanisms), visits,
                         list(config.estimators), eval_visit)


def run_synthetic_rct_study(dataset: TrialDataset, config: StudyConfig) -> StudyReport:
    """Withhold a random half of every arm and predict their outcomes from covariates alone."""
    _require_complete(dataset)
    eval_visit = config.resolve_eval_visit(dataset.n_visits)
    estimators = [name for name in config.estimators if name != 'locf']
    if len(estimators) < len(config.estimators):
        logger.info(json.dumps({"event": "estimator_skipped", "estimator": "locf",
                                "reason": "no pre-treatment outcomes in a synthetic RCT"}))
    if not estimators:
        raise DataValidationError("synthetic RCT needs at least one of snn, naive, matching")
    results = run_repeats(job_synthetic_rct_repeat, dataset, config, 'synthetic-rct')
    visits = list(range(1, dataset.n_visits + 1)) if config.all_visits else [eval_visit]
    return _build_report('synthetic-rct', dataset, config, results, ['none'], visits, estimators, eval_visit)


def dropout_trajectories(dataset: TrialDataset, config: StudyConfig, mechanism: str,
                         repeat: int = 0) -> pd.DataFrame:
    """Full-trajectory SNN imputations for every simulated dropout of one repeat."""
    seed = repeat_seed(config, repeat)
    masked, dropout_sets = simulate_dropouts(dataset, mechanism.upper(), config.schedule,
                                             mechanism_rng(seed, mechanism.upper()), settings.BASELINE_COLUMN)
    predictor = SNNPredictor(config.snn.model_copy(update={'seed': seed}))
    rows = []
    for arm, selected in dropout_sets.items():
        for patient, first_missing in selected:
            for visit in range(1, dataset.n_visits + 1):
                row = {'patient_id': dataset.patient_ids[patient], 'visit': visit,
                       'observed': dataset.outcome(patient, visit, arm),
                       'predicted': None, 'lower': None, 'upper': None}
                if visit >= first_missing:
                    prediction = predictor.predict(masked, TargetTuple(patient, visit, arm))
                    row['predicted'] = prediction.estimate
                    if prediction.interval is not None:
                        row['lower'], row['upper'] = prediction.interval
                rows.append(row)
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
