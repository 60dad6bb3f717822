"""Synthetic Nearest Neighbors: PCR over random donor subgroups with diagnostics.

For a target (i, t, a) the donors are the arm-a patients observed at visit t.
They are split into K subgroups; each subgroup learns linear weights beta
that rebuild the target's features [X_i, Y_iT] from its own rows, restricted
to the top singular subspace. The subgroup estimate is <Y_{P_k t}, beta>.
"""
import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from prometheus_client import Counter

from dataset import (TargetTuple, FeatureVector, TrialDataset, donor_matrix, donor_outcomes, donor_set,
                     feature_vector, observed_visits)
from errors import DataValidationError, EstimationError
from schemas.config import SnnConfig
from spectra import ColumnScaling, SpectralDecomposition, numerical_rank, select_rank, standardize_columns, svd

logger = logging.getLogger("snntrials")

PREDICTIONS = Counter('snn_predictions_total', 'SNN tuple predictions', ['passed'])
SUBGROUP_REDUCTIONS = Counter('snn_subgroup_reductions_total', 'Targets whose subgroup count was reduced')

SINGULAR_FLOOR = 1e-12
PERCENTILES = (2.5, 97.5)


@dataclass(frozen=True)
class SubgroupModel:
    donor_indices: np.ndarray
    beta: np.ndarray
    rank: int
    theta: float
    phi: float
    decomposition: SpectralDecomposition  # truncated, of the scaled donor matrix
    standardization: ColumnScaling
    target_features: np.ndarray           # scaled Z_iT
    donor_outcomes: np.ndarray            # raw Y_{P_k t}
    point_estimate: float

    def passes(self, alpha: float) -> bool:
        return self.theta < alpha and self.phi < alpha


@dataclass(frozen=True)
class SnnPrediction:
    target: TargetTuple
    estimate: float
    per_model: Tuple[SubgroupModel, ...]
    retained: Tuple[int, ...]
    passed: bool
    interval: Optional[Tuple[float, float]]
    interval_kind: str  # ensemble-quantile | regression-formula | none
    noise_std: Optional[float] = None
    mean_interval: Optional[Tuple[float, float]] = None

    @property
    def theta_max(self) -> float:
        return max(m.theta for m in self.per_model)

    @property
    def phi_max(self) -> float:
        return max(m.phi for m in self.per_model)

    @property
    def per_model_estimates(self) -> np.ndarray:
        return np.array([m.point_estimate for m in self.per_model])

    def to_record(self, dataset: TrialDataset) -> dict:
        lower, upper = self.interval if self.interval is not None else (None, None)
        return {
            'estimator': 'snn',
            'patient_id': dataset.patient_ids[self.target.patient],
            'visit': self.target.visit,
            'arm': dataset.arm_labels[self.target.arm],
            'estimate': self.estimate,
            'lower': lower,
            'upper': upper,
            'interval_kind': self.interval_kind,
            'passed': self.passed,
            'theta_max': self.theta_max,
            'phi_max': self.phi_max,
            'n_retained': len(self.retained),
        }


def partition_donors(donors: Sequence[int], n_subgroups: int, rng: np.random.Generator,
                     min_subgroup_size: int = 1) -> List[np.ndarray]:
    """Random balanced split of the donors into K disjoint subgroups.

    K shrinks to floor(|donors| / min_subgroup_size) (at least 1) when the
    subgroups would otherwise fall below the floor.
    """
    donors = np.asarray(donors, dtype=int)
    if donors.size == 0:
        raise EstimationError("cannot partition an empty donor set")
    if n_subgroups < 1:
        raise DataValidationError(f"number of subgroups must be >= 1, got {n_subgroups}")
    k = n_subgroups
    if donors.size / k < min_subgroup_size:
        k = max(1, donors.size // min_subgroup_size)
        SUBGROUP_REDUCTIONS.inc()
        logger.debug(json.dumps({"event": "subgroups_reduced", "requested": n_subgroups, "used": k,
                                 "donors": int(donors.size), "min_subgroup_size": min_subgroup_size}))
    shuffled = rng.permutation(donors)
    return [np.sort(part) for part in np.array_split(shuffled, k)]


def _check_floor(decomposition: SpectralDecomposition) -> None:
    if decomposition.singular_values.size and decomposition.singular_values[-1] < SINGULAR_FLOOR:
        raise EstimationError(
            f"retained singular value {decomposition.singular_values[-1]:.3e} below {SINGULAR_FLOOR}: "
            "rank exceeds the numerical rank of the donor matrix")


def _scaled(matrix: np.ndarray) -> Tuple[np.ndarray, ColumnScaling]:
    """Scale-only standardization; a single row keeps identity scaling."""
    if matrix.shape[0] >= 2:
        return standardize_columns(matrix, with_mean=False)
    width = matrix.shape[1]
    return matrix, ColumnScaling(np.zeros(width), np.ones(width), np.zeros(width, dtype=bool))


def pcr_weights(target_features: np.ndarray, decomposition: SpectralDecomposition) -> np.ndarray:
    """beta = U_b Sigma_b^-1 V_b^T z for an already truncated decomposition."""
    _check_floor(decomposition)
    coefficients = (decomposition.right_vectors.T @ target_features) / decomposition.singular_values
    return decomposition.left_vectors @ coefficients


def fit_pcr(target_features: np.ndarray, donor_matrix: np.ndarray, rank: int) -> np.ndarray:
    """Least squares ||z - Z^T beta|| with beta restricted to the top-``rank`` left singular subspace."""
    donor_matrix = np.asarray(donor_matrix, dtype=float)
    target_features = np.asarray(target_features, dtype=float)
    if donor_matrix.shape[1] != target_features.size:
        raise DataValidationError(
            f"target has {target_features.size} features, donor matrix has {donor_matrix.shape[1]} columns")
    if not 1 <= rank <= min(donor_matrix.shape):
        raise DataValidationError(f"rank {rank} outside 1..{min(donor_matrix.shape)}")
    return pcr_weights(target_features, svd(donor_matrix).truncate(rank))


def compute_diagnostics(target_features: np.ndarray, donor_outcomes_at_t: np.ndarray,
                        decomposition: SpectralDecomposition) -> Tuple[float, float]:
    """theta: target distance from the donor row space; phi: outcome distance from the column space."""
    z = np.asarray(target_features, dtype=float)
    y = np.asarray(donor_outcomes_at_t, dtype=float)
    z_norm = np.linalg.norm(z)
    y_norm = np.linalg.norm(y)
    if z_norm == 0:
        raise EstimationError("diagnostics undefined for a zero target feature vector")
    if y_norm == 0:
        raise EstimationError("diagnostics undefined for a zero donor outcome vector")
    v = decomposition.right_vectors
    u = decomposition.left_vectors
    theta = np.linalg.norm(z - v @ (v.T @ z)) / z_norm
    phi = np.linalg.norm(y - u @ (u.T @ y)) / y_norm
    return float(np.clip(theta, 0.0, 1.0)), float(np.clip(phi, 0.0, 1.0))


def estimate_noise_std(theta: float, target_features, sqrt_denominator: bool = False) -> float:
    """nu = theta * ||Z_iT|| / (|T| + d), or over sqrt(|T| + d) when ``sqrt_denominator``."""
    values = target_features.values if isinstance(target_features, FeatureVector) else np.asarray(target_features)
    width = values.size
    if width == 0:
        return 0.0
    denominator = np.sqrt(width) if sqrt_denominator else width
    return float(theta * np.linalg.norm(values) / denominator)


def prediction_interval_ensemble(per_model_estimates: Sequence[float]) -> Tuple[float, float]:
    estimates = np.asarray(per_model_estimates, dtype=float)
    if estimates.size < 2:
        raise DataValidationError("ensemble interval needs at least 2 estimates; use the single-model formula")
    lower, upper = np.percentile(estimates, PERCENTILES)
    return float(lower), float(upper)


def interval_quadratic_form(model: SubgroupModel) -> float:
    """<z, V_b Sigma_b^-2 V_b^T z> for the model's scaled target; equals ||beta||^2."""
    _check_floor(model.decomposition)
    projected = (model.decomposition.right_vectors.T @ model.target_features) / model.decomposition.singular_values
    return float(projected @ projected)


def prediction_interval_single(model: SubgroupModel, donor_outcomes_at_t: np.ndarray, z_ci: float,
                               noise_std: float) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Homoskedastic (mean, outcome) intervals around <Y_{Pt}, beta>."""
    if noise_std < 0:
        raise DataValidationError(f"noise_std must be >= 0, got {noise_std}")
    q = interval_quadratic_form(model)
    center = float(np.asarray(donor_outcomes_at_t, dtype=float) @ model.beta)
    mean_half = z_ci * noise_std * np.sqrt(q)
    outcome_half = z_ci * noise_std * np.sqrt(1.0 + q)
    return (center - mean_half, center + mean_half), (center - outcome_half, center + outcome_half)


class SNNPredictor:
    name = 'snn'

    def __init__(self, config: Optional[SnnConfig] = None):
        self.config = config or SnnConfig()

    def target_rng(self, target: TargetTuple) -> np.random.Generator:
        # independent of evaluation order
        return np.random.default_rng([self.config.seed, target.patient, target.visit, target.arm])

    def create_features(self, dataset: TrialDataset, target: TargetTuple) -> Tuple[FeatureVector, np.ndarray]:
        donors = donor_set(dataset, target.visit, target.arm)
        donors = donors[donors != target.patient]
        visits = observed_visits(dataset, target.patient, target.arm, before=target.visit)
        return feature_vector(dataset, target.patient, visits, target.arm), donors

    def donor_rank(self, dataset: TrialDataset, target: TargetTuple, donors: np.ndarray) -> int:
        """Rank read once per target from all donors' covariates and outcomes at visits 1..t.

        Subgroups reuse it, capped by their own shape and numerical rank.
        """
        mode = self.config.rank_mode
        if mode.kind == 'fixed':
            return mode.rank
        scaled, _ = _scaled(donor_matrix(dataset, donors, range(1, target.visit + 1), target.arm))
        m, n = scaled.shape
        return select_rank(svd(scaled).singular_values, m, n, mode)

    def fit_subgroup(self, dataset: TrialDataset, target: TargetTuple, donors: np.ndarray,
                     features: FeatureVector, rank: int) -> SubgroupModel:
        matrix = donor_matrix(dataset, donors, features.visit_set, target.arm)
        scaled, record = _scaled(matrix)
        z = record.transform(features.values)
        decomposition = svd(scaled)
        m, n = scaled.shape
        rank = min(rank, m, n)
        if self.config.rank_mode.kind != 'fixed':
            rank = max(1, min(rank, numerical_rank(decomposition.singular_values, m, n)))
        truncated = decomposition.truncate(rank)
        beta = pcr_weights(z, truncated)
        outcomes = donor_outcomes(dataset, donors, target.visit, target.arm)
        theta, phi = compute_diagnostics(z, outcomes, truncated)
        return SubgroupModel(
            donor_indices=np.asarray(donors), beta=beta, rank=rank, theta=theta, phi=phi,
            decomposition=truncated, standardization=record, target_features=z,
            donor_outcomes=outcomes, point_estimate=float(outcomes @ beta),
        )

    def predict(self, dataset: TrialDataset, target: TargetTuple) -> SnnPrediction:
        features, donors = self.create_features(dataset, target)
        if donors.size == 0:
            raise EstimationError(
                f"no donors observed at visit {target.visit} in arm {dataset.arm_labels[target.arm]}")
        if len(features) == 0:
            raise EstimationError("degenerate feature vector: no covariates and no observed visits")
        groups = partition_donors(donors, self.config.n_subgroups, self.target_rng(target),
                                  self.config.subgroup_floor(len(features)))
        rank = self.donor_rank(dataset, target, donors)
        models = tuple(self.fit_subgroup(dataset, target, group, features, rank) for group in groups)

        retained = tuple(k for k, model in enumerate(models) if model.passes(self.config.alpha))
        passed = len(retained) > 0
        used = retained if passed else tuple(range(len(models)))
        estimates = np.array([models[k].point_estimate for k in used])
        estimate = float(estimates.mean())

        interval, kind, noise, mean_interval = None, 'none', None, None
        if len(used) >= 2:
            interval, kind = prediction_interval_ensemble(estimates), 'ensemble-quantile'
        elif passed:
            model = models[used[0]]
            noise = estimate_noise_std(model.theta, features, self.config.noise_sqrt_denominator)
            mean_interval, interval = prediction_interval_single(model, model.donor_outcomes, self.config.z_ci, noise)
            kind = 'regression-formula'

        PREDICTIONS.labels(passed=str(passed).lower()).inc()
        if not passed:
            logger.debug(json.dumps({"event": "diagnostics_failed", "patient": target.patient,
                                     "visit": target.visit, "arm": target.arm,
                                     "theta_max": max(m.theta for m in models),
                                     "phi_max": max(m.phi for m in models)}))
        return SnnPrediction(target=target, estimate=estimate, per_model=models, retained=retained,
                             passed=passed, interval=interval, interval_kind=kind, noise_std=noise,
                             mean_interval=mean_interval)


def predict(dataset: TrialDataset, target: TargetTuple, config: Optional[SnnConfig] = None) -> SnnPrediction:
    return SNNPredictor(config).predict(dataset, target)
