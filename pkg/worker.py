"""Per-repeat study jobs and the process pool that runs them."""
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np
from prometheus_client import REGISTRY, Counter

import settings
from dataset import TargetTuple, TrialDataset
from dgp import simulate_dropouts
from errors import DataValidationError, TrialError
from models.locf_model import LOCFPredictor
from models.matching_model import MatchingPredictor
from models.naive_model import NaivePredictor
from models.snn_model import PREDICTIONS, SUBGROUP_REDUCTIONS, SNNPredictor, SnnPrediction
from schemas.config import MECHANISMS, StudyConfig

logger = logging.getLogger("snntrials")

STUDY_JOBS = Counter('study_jobs_total', 'Study repeat jobs completed', ['study'])
JOB_FAILURES = Counter('study_job_failures_total', 'Study repeat jobs failed', ['study'])

# counters incremented inside SNNPredictor; pool processes report them as deltas
MODEL_COUNTERS = {'snn_predictions_total': PREDICTIONS, 'snn_subgroup_reductions_total': SUBGROUP_REDUCTIONS}
MODEL_SAMPLES = (
    ('snn_predictions_total', {'passed': 'true'}),
    ('snn_predictions_total', {'passed': 'false'}),
    ('snn_subgroup_reductions_total', {}),
)

PREDICTION_COLUMNS = ['estimator', 'patient_id', 'visit', 'arm', 'estimate', 'lower', 'upper',
                      'interval_kind', 'passed', 'theta_max', 'phi_max', 'n_retained']


@dataclass
class RepeatResult:
    repeat: int
    seed: int
    records: List[dict] = field(default_factory=list)
    # dropout study: one entry per (mechanism, arm, visit); synthetic RCT: one per arm
    counts: List[dict] = field(default_factory=list)
    counter_deltas: List[float] = field(default_factory=list)


def repeat_seed(config: StudyConfig, repeat: int) -> int:
    return config.seed + repeat


def mechanism_rng(seed: int, mechanism: str) -> np.random.Generator:
    return np.random.default_rng([seed, MECHANISMS.index(mechanism)])


def build_predictors(estimators: Iterable[str], config: StudyConfig, seed: int) -> Dict[str, object]:
    factories = {
        'snn': lambda: SNNPredictor(config.snn.model_copy(update={'seed': seed})),
        'naive': NaivePredictor,
        'locf': LOCFPredictor,
        'matching': lambda: MatchingPredictor(config.matching),
    }
    return {name: factories[name]() for name in estimators}


def prediction_record(estimator: str, dataset: TrialDataset, target: TargetTuple, result) -> dict:
    if isinstance(result, SnnPrediction):
        return result.to_record(dataset)
    return {
        'estimator': estimator,
        'patient_id': dataset.patient_ids[target.patient],
        'visit': target.visit,
        'arm': dataset.arm_labels[target.arm],
        'estimate': float(result),
        'lower': None,
        'upper': None,
        'interval_kind': 'none',
        'passed': None,
        'theta_max': None,
        'phi_max': None,
        'n_retained': None,
    }


def predict_targets(masked: TrialDataset, targets: Iterable[TargetTuple], predictors: Dict[str, object],
                    truth: Optional[TrialDataset] = None, context: Optional[dict] = None) -> List[dict]:
    """One record per (estimator, target); ``truth`` adds the held-out outcome."""
    records = []
    for target in targets:
        actual = truth.outcome(target.patient, target.visit, target.arm) if truth is not None else None
        for name, predictor in predictors.items():
            record = prediction_record(name, masked, target, predictor.predict(masked, target))
            record.update(context or {})
            record['patient'] = target.patient
            record['arm_index'] = target.arm
            record['truth'] = actual
            records.append(record)
    return records


def evaluation_visits(first_missing: int, n_visits: int, eval_visit: int, all_visits: bool) -> List[int]:
    if all_visits:
        return list(range(first_missing, n_visits + 1))
    return [eval_visit] if eval_visit >= first_missing else []


def job_dropout_repeat(dataset: TrialDataset, config: StudyConfig, repeat: int) -> RepeatResult:
    seed = repeat_seed(config, repeat)
    eval_visit = config.resolve_eval_visit(dataset.n_visits)
    predictors = build_predictors(config.estimators, config, seed)
    result = RepeatResult(repeat=repeat, seed=seed)
    for mechanism in config.mechanisms:
        masked, dropout_sets = simulate_dropouts(dataset, mechanism, config.schedule,
                                                 mechanism_rng(seed, mechanism), settings.BASELINE_COLUMN)
        for arm, selected in dropout_sets.items():
            for visit in config.schedule.visits():
                if visit <= dataset.n_visits:
                    result.counts.append({'repeat': repeat, 'mechanism': mechanism,
                                          'arm': dataset.arm_labels[arm], 'visit': visit,
                                          'count': sum(1 for _, v in selected if v == visit)})
            targets = [TargetTuple(patient, visit, arm) for patient, first_missing in selected
                       for visit in evaluation_visits(first_missing, dataset.n_visits, eval_visit,
                                                      config.all_visits)]
            result.records.extend(predict_targets(
                masked, targets, predictors, truth=dataset,
                context={'study': 'dropout', 'repeat': repeat, 'mechanism': mechanism}))
    return result


def split_arm(members: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random test half of an arm, floor(N_a / 2) patients, ascending."""
    if members.size < 2:
        raise DataValidationError(f"synthetic RCT split needs at least 2 patients per arm, got {members.size}")
    return np.sort(rng.choice(members, members.size // 2, replace=False))


def job_synthetic_rct_repeat(dataset: TrialDataset, config: StudyConfig, repeat: int) -> RepeatResult:
    seed = repeat_seed(config, repeat)
    eval_visit = config.resolve_eval_visit(dataset.n_visits)
    rng = np.random.default_rng(seed)
    tests = {arm: split_arm(dataset.arm_patients(arm), rng) for arm in range(dataset.n_arms)}
    masked = dataset.withhold(np.concatenate(list(tests.values())))
    estimators = [name for name in config.estimators if name != 'locf']
    predictors = build_predictors(estimators, config, seed)
    visits = list(range(1, dataset.n_visits + 1)) if config.all_visits else [eval_visit]

    result = RepeatResult(repeat=repeat, seed=seed)
    for arm, test in tests.items():
        result.counts.append({'repeat': repeat, 'arm': dataset.arm_labels[arm],
                              'n_test': int(test.size), 'n_train': int(dataset.arm_patients(arm).size - test.size)})
        targets = [TargetTuple(int(patient), visit, arm) for patient in test for visit in visits]
        result.records.extend(predict_targets(
            masked, targets, predictors, truth=dataset,
            context={'study': 'synthetic-rct', 'repeat': repeat, 'mechanism': 'none'}))
    return result


def _timed(job: Callable[[int], RepeatResult], study: str, repeat: int) -> RepeatResult:
    started = time.perf_counter()
    try:
        result = job(repeat)
    except TrialError as e:
        logger.error(json.dumps({"event": "repeat_failed", "study": study, "repeat": repeat, "error": e.detail}))
        raise
    logger.info(json.dumps({"event": "repeat_done", "study": study, "repeat": repeat,
                            "predictions": len(result.records),
                            "latency_ms": int((time.perf_counter() - started) * 1000)}))
    return result


def model_counter_values() -> List[float]:
    return [REGISTRY.get_sample_value(name, labels) or 0.0 for name, labels in MODEL_SAMPLES]


def _pooled(job: Callable[[int], RepeatResult], study: str, repeat: int) -> RepeatResult:
    """Runs in a pool process; ships the model counter increments back with the result."""
    before = model_counter_values()
    result = _timed(job, study, repeat)
    result.counter_deltas = [after - start for after, start in zip(model_counter_values(), before)]
    return result


def merge_counter_deltas(results: Iterable[RepeatResult]) -> None:
    for result in results:
        for (name, labels), delta in zip(MODEL_SAMPLES, result.counter_deltas):
            if delta:
                counter = MODEL_COUNTERS[name]
                (counter.labels(**labels) if labels else counter).inc(delta)


def run_repeats(job: Callable[[TrialDataset, StudyConfig, int], RepeatResult], dataset: TrialDataset,
                config: StudyConfig, study: str) -> List[RepeatResult]:
    """Run ``job`` for every repeat, in repeat order; a pool is used when workers > 1."""
    bound = partial(job, dataset, config)
    try:
        if config.workers <= 1 or config.n_repeats == 1:
            results = [_timed(bound, study, repeat) for repeat in range(config.n_repeats)]
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as executor:
                results = list(executor.map(partial(_pooled, bound, study), range(config.n_repeats)))
            merge_counter_deltas(results)
    except TrialError:
        JOB_FAILURES.labels(study=study).inc()
        raise
    STUDY_JOBS.labels(study=study).inc(len(results))
    return results
