"""Synthetic trials from a low-rank latent factor model, and simulated dropouts.

Mean outcomes are <u_i, v_t(a)>, covariates <u_i, w_l>. Dropout mechanisms
withdraw a scheduled share of every arm at each visit, either uniformly
(MCAR) or with a logistic propensity of the patient's worsening relative to
the baseline covariate (MAR looks back, MNAR looks forward).
"""
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

import settings
from dataset import TrialDataset
from errors import DataValidationError, EstimationError
from schemas.config import MECHANISMS, DropoutRateSchedule, FactorModelConfig

logger = logging.getLogger("snntrials")

MAX_SAMPLING_PASSES = 10000


@dataclass(frozen=True)
class LatentFactorModel:
    rank: int
    patient_factors: np.ndarray     # N x r
    visit_arm_factors: np.ndarray   # T x A x r
    covariate_factors: np.ndarray   # d x r
    outcome_noise_std: float = 0.0
    covariate_noise_std: float = 0.0
    factor_distribution: str = 'uniform'

    @classmethod
    def sample(cls, config: FactorModelConfig, rng: np.random.Generator) -> 'LatentFactorModel':
        draw = _factor_sampler(config.factor_distribution, rng)
        return cls(
            rank=config.rank,
            patient_factors=draw((config.n_patients, config.rank)),
            visit_arm_factors=draw((config.n_visits, config.n_arms, config.rank)),
            covariate_factors=draw((config.n_covariates, config.rank)),
            outcome_noise_std=config.outcome_noise_std,
            covariate_noise_std=config.covariate_noise_std,
            factor_distribution=config.factor_distribution,
        )

    def mean_outcomes(self) -> np.ndarray:
        """T x N x A tensor of <u_i, v_t(a)>."""
        return np.einsum('ir,tar->tia', self.patient_factors, self.visit_arm_factors)

    def mean_covariates(self) -> np.ndarray:
        return self.patient_factors @ self.covariate_factors.T


def _factor_sampler(distribution: str, rng: np.random.Generator):
    if distribution == 'uniform':
        return lambda shape: rng.uniform(-1.0, 1.0, size=shape)
    if distribution == 'gaussian':
        return lambda shape: rng.standard_normal(size=shape)
    raise DataValidationError(f"unknown factor distribution '{distribution}'")


def assign_arms(n_patients: int, n_arms: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced randomization: arm sizes differ by at most one."""
    if n_patients < 1 or n_arms < 1:
        raise DataValidationError(f"need positive counts, got {n_patients} patients and {n_arms} arms")
    base, extra = divmod(n_patients, n_arms)
    sizes = [base + (1 if a < extra else 0) for a in range(n_arms)]
    return rng.permutation(np.repeat(np.arange(n_arms), sizes))


def generate_trial(n_patients: int, n_visits: int, n_arms: int, n_covariates: int, model: LatentFactorModel,
                   rng: np.random.Generator,
                   covariate_labels: Optional[Sequence[str]] = None) -> Tuple[TrialDataset, np.ndarray]:
    """Fully observed trial plus its noiseless T x N x A mean-outcome tensor."""
    expected = {
        'patient_factors': (n_patients, model.rank),
        'visit_arm_factors': (n_visits, n_arms, model.rank),
        'covariate_factors': (n_covariates, model.rank),
    }
    for name, shape in expected.items():
        if getattr(model, name).shape != shape:
            raise DataValidationError(f"{name} has shape {getattr(model, name).shape}, expected {shape}")

    arms = assign_arms(n_patients, n_arms, rng)
    ground_truth = model.mean_outcomes()
    assigned = ground_truth[:, np.arange(n_patients), arms]
    if model.outcome_noise_std > 0:
        assigned = assigned + rng.normal(0.0, model.outcome_noise_std, size=assigned.shape)
    covariates = model.mean_covariates()
    if model.covariate_noise_std > 0:
        covariates = covariates + rng.normal(0.0, model.covariate_noise_std, size=covariates.shape)

    dataset = TrialDataset.observe(assigned, covariates, arms, np.zeros((n_patients, n_visits), dtype=np.int8),
                                   n_arms, covariate_labels=covariate_labels)
    return dataset, ground_truth


def simulate_trial(config: FactorModelConfig, rng: np.random.Generator) -> Tuple[TrialDataset, np.ndarray]:
    model = LatentFactorModel.sample(config, rng)
    return generate_trial(config.n_patients, config.n_visits, config.n_arms, config.n_covariates, model, rng,
                          covariate_labels=config.labels())


def ewm(values: Sequence[float], span: int) -> float:
    """Exponentially weighted mean, heaviest weight on the last element."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataValidationError("ewm of an empty sequence")
    if span < 1:
        raise DataValidationError(f"ewm span must be >= 1, got {span}")
    return float(pd.Series(values).ewm(span=span, adjust=True).mean().iloc[-1])


def dropout_probability(deltas: Sequence[float], span: int) -> float:
    return float(expit(ewm(deltas, span)))


def dropout_quota(rate: float, arm_size: int) -> int:
    # round half up
    return int(np.floor(rate * arm_size + 0.5))


def withdrawal_propensity(assigned: np.ndarray, baseline: np.ndarray, patient: int, visit: int,
                          mechanism: str) -> float:
    """b_i(t) from visits before ``visit`` (MAR) or from visit-1 to the end (MNAR)."""
    n_visits = assigned.shape[0]
    if mechanism == 'MAR':
        deltas = assigned[:visit - 1, patient] - baseline[patient]
        span = visit - 1
    else:
        deltas = assigned[visit - 2:, patient] - baseline[patient]
        span = n_visits - (visit - 1)
    return dropout_probability(deltas, span)


def _bernoulli_passes(candidates: np.ndarray, probabilities: Dict[int, float], quota: int,
                      rng: np.random.Generator) -> List[int]:
    chosen: List[int] = []
    remaining = np.asarray(candidates, dtype=int)
    for _ in range(MAX_SAMPLING_PASSES):
        order = rng.permutation(remaining)
        draws = rng.random(order.size)
        hits = order[draws < np.array([probabilities[i] for i in order])]
        chosen.extend(int(i) for i in hits[:quota - len(chosen)])
        if len(chosen) == quota:
            return chosen
        remaining = np.setdiff1d(remaining, hits)
    raise EstimationError(f"dropout quota {quota} not met after {MAX_SAMPLING_PASSES} sampling passes")


def simulate_dropouts(dataset: TrialDataset, mechanism: str, schedule: DropoutRateSchedule,
                      rng: np.random.Generator,
                      baseline_column: str = settings.BASELINE_COLUMN,
                      ) -> Tuple[TrialDataset, Dict[int, List[Tuple[int, int]]]]:
    """Withdraw round(rho(t) * N_a) still-active patients of every arm at each scheduled visit.

    Returns the masked dataset and, per arm, (patient, first missing visit) pairs.
    """
    mechanism = mechanism.upper()
    if mechanism not in MECHANISMS:
        raise DataValidationError(f"unknown missingness mechanism '{mechanism}', expected one of {MECHANISMS}")
    assigned_rows = dataset.arm_assignment >= 0
    if dataset.dropout[assigned_rows].any():
        raise DataValidationError("dropout simulation needs a fully observed dataset")

    assigned = dataset.assigned_outcomes()
    baseline = dataset.covariates[:, dataset.column(baseline_column)] if mechanism != 'MCAR' else None
    dropout = np.array(dataset.dropout)
    dropout_sets: Dict[int, List[Tuple[int, int]]] = {}

    for arm in range(dataset.n_arms):
        members = dataset.arm_patients(arm)
        active = np.array(members)
        selected: List[Tuple[int, int]] = []
        for visit in schedule.visits():
            if visit > dataset.n_visits:
                continue
            quota = dropout_quota(schedule.rate(visit), members.size)
            if quota == 0:
                continue
            if quota > active.size:
                raise EstimationError(
                    f"arm {dataset.arm_labels[arm]}: dropout quota {quota} at visit {visit} exceeds "
                    f"{active.size} active patients")
            if mechanism == 'MCAR':
                chosen = [int(i) for i in rng.choice(active, quota, replace=False)]
            else:
                probabilities = {int(i): withdrawal_propensity(assigned, baseline, int(i), visit, mechanism)
                                 for i in active}
                chosen = _bernoulli_passes(active, probabilities, quota, rng)
            dropout[chosen, visit - 1:] = 1
            active = np.setdiff1d(active, chosen)
            selected.extend((i, visit) for i in chosen)
        dropout_sets[arm] = sorted(selected, key=lambda pair: (pair[1], pair[0]))

    logger.debug(json.dumps({"event": "dropouts_simulated", "mechanism": mechanism,
                             "counts": {dataset.arm_labels[a]: len(s) for a, s in dropout_sets.items()}}))
    return dataset.with_dropout(dropout), dropout_sets
