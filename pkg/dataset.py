"""Trial data model: the partially observed patient x visit x arm tensor.

Outcomes are stored as a T x N x A float array with NaN marking a missing
entry. Visits are numbered 1..T in every public function; arrays are indexed
with ``visit - 1``. Patients and arms are dense 0-based indices.
"""
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import DataValidationError

UNASSIGNED = -1


@dataclass(frozen=True)
class TargetTuple:
    patient: int
    visit: int
    arm: int


@dataclass(frozen=True)
class FeatureVector:
    """Z_iT = [X_i, Y_iT]: covariates first, then outcomes in visit order."""

    values: np.ndarray
    visit_set: Tuple[int, ...]
    n_covariates: int

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class MaskTensor:
    entries: np.ndarray  # T x N x A bool

    def observed(self, patient: int, visit: int, arm: int) -> bool:
        return bool(self.entries[visit - 1, patient, arm])


def _readonly(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TrialDataset:
    outcomes: np.ndarray          # T x N x A, NaN = missing
    covariates: np.ndarray        # N x d
    arm_assignment: np.ndarray    # N, UNASSIGNED for patients without outcome rows
    dropout: np.ndarray           # N x T, 1 = withdrawn at or before visit t
    patient_ids: Tuple[str, ...]
    covariate_labels: Tuple[str, ...]
    arm_labels: Tuple[str, ...]
    _mask: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'outcomes', _readonly(self.outcomes, float))
        object.__setattr__(self, 'covariates', _readonly(self.covariates, float))
        object.__setattr__(self, 'arm_assignment', _readonly(self.arm_assignment, int))
        object.__setattr__(self, 'dropout', _readonly(self.dropout, np.int8))
        object.__setattr__(self, 'patient_ids', tuple(str(p) for p in self.patient_ids))
        object.__setattr__(self, 'covariate_labels', tuple(self.covariate_labels))
        object.__setattr__(self, 'arm_labels', tuple(self.arm_labels))
        object.__setattr__(self, '_mask', _readonly(~np.isnan(self.outcomes), bool))

    @property
    def n_visits(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_patients(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_arms(self) -> int:
        return self.outcomes.shape[2]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def mask(self) -> MaskTensor:
        return MaskTensor(self._mask)

    def observed(self, patient: int, visit: int, arm: int) -> bool:
        return bool(self._mask[visit - 1, patient, arm])

    def outcome(self, patient: int, visit: int, arm: int) -> float:
        return float(self.outcomes[visit - 1, patient, arm])

    def arm_patients(self, arm: int) -> np.ndarray:
        return np.flatnonzero(self.arm_assignment == arm)

    def column(self, label: str) -> int:
        try:
            return self.covariate_labels.index(label)
        except ValueError:
            raise DataValidationError(f"covariate column '{label}' not found; have {list(self.covariate_labels)}")

    @classmethod
    def observe(
        cls,
        assigned_outcomes: np.ndarray,
        covariates: np.ndarray,
        arm_assignment: Sequence[int],
        dropout: np.ndarray,
        n_arms: int,
        patient_ids: Optional[Sequence[str]] = None,
        covariate_labels: Optional[Sequence[str]] = None,
        arm_labels: Optional[Sequence[str]] = None,
    ) -> 'TrialDataset':
        """Apply the observation rule to a T x N matrix of assigned-arm outcomes.

        Entry (i, t, a) is kept iff arm_assignment[i] == a and dropout[i, t] == 0.
        """
        assigned_outcomes = np.asarray(assigned_outcomes, dtype=float)
        n_visits, n_patients = assigned_outcomes.shape
        arms = np.asarray(arm_assignment, dtype=int)
        dropout = np.asarray(dropout, dtype=np.int8)
        outcomes = np.full((n_visits, n_patients, n_arms), np.nan)
        assigned = arms >= 0
        keep = (dropout.T == 0) & assigned[None, :]
        t_idx, i_idx = np.nonzero(keep)
        outcomes[t_idx, i_idx, arms[i_idx]] = assigned_outcomes[t_idx, i_idx]
        covariates = np.asarray(covariates, dtype=float)
        if patient_ids is None:
            patient_ids = [f"P{i + 1:04d}" for i in range(n_patients)]
        if covariate_labels is None:
            covariate_labels = [f"cov_{k + 1}" for k in range(covariates.shape[1])]
        if arm_labels is None:
            arm_labels = [f"arm_{a}" for a in range(n_arms)]
        dataset = cls(outcomes, covariates, arms, dropout, tuple(patient_ids),
                      tuple(covariate_labels), tuple(arm_labels))
        dataset.validate()
        return dataset

    def assigned_outcomes(self) -> np.ndarray:
        """T x N matrix of each patient's assigned-arm outcomes (NaN where missing)."""
        out = np.full((self.n_visits, self.n_patients), np.nan)
        assigned = np.flatnonzero(self.arm_assignment >= 0)
        out[:, assigned] = self.outcomes[:, assigned, self.arm_assignment[assigned]]
        return out

    def with_dropout(self, dropout: np.ndarray) -> 'TrialDataset':
        """Copy with a new dropout matrix; outcomes at dropped entries are removed.

        Dropout can only hide entries, never reveal them.
        """
        dropout = np.maximum(np.asarray(dropout, dtype=np.int8), self.dropout)
        return TrialDataset.observe(
            self.assigned_outcomes(), self.covariates, self.arm_assignment, dropout,
            self.n_arms, self.patient_ids, self.covariate_labels, self.arm_labels,
        )

    def withhold(self, patients: Iterable[int]) -> 'TrialDataset':
        """Copy where ``patients`` keep only their covariates (withdrawn before visit 1)."""
        dropout = np.array(self.dropout)
        dropout[list(patients), :] = 1
        return self.with_dropout(dropout)

    def validate(self) -> None:
        n_visits, n_patients, n_arms = self.outcomes.shape
        if self.covariates.shape[0] != n_patients:
            raise DataValidationError(
                f"covariates have {self.covariates.shape[0]} rows for {n_patients} patients")
        if self.dropout.shape != (n_patients, n_visits):
            raise DataValidationError(f"dropout matrix shape {self.dropout.shape} != {(n_patients, n_visits)}")
        if self.arm_assignment.shape != (n_patients,):
            raise DataValidationError("arm assignment must have one entry per patient")
        if len(self.patient_ids) != n_patients or len(set(self.patient_ids)) != n_patients:
            raise DataValidationError("patient ids must be unique, one per patient")
        if len(self.covariate_labels) != self.covariates.shape[1]:
            raise DataValidationError("one covariate label per covariate column required")
        if len(self.arm_labels) != n_arms:
            raise DataValidationError("one arm label per arm required")
        if not np.all(np.isfinite(self.covariates)):
            i, k = np.argwhere(~np.isfinite(self.covariates))[0]
            raise DataValidationError(
                f"covariate '{self.covariate_labels[k]}' missing for patient {self.patient_ids[i]}")
        if np.any(self.arm_assignment >= n_arms) or np.any(self.arm_assignment < UNASSIGNED):
            raise DataValidationError("arm assignment out of range")
        if np.any(np.diff(self.dropout, axis=1) < 0):
            i = int(np.argwhere(np.diff(self.dropout, axis=1) < 0)[0][0])
            raise DataValidationError(f"dropout is not absorbing for patient {self.patient_ids[i]}")
        if np.any(np.isinf(self.outcomes)):
            raise DataValidationError("outcomes must be finite")
        expected = (
            (self.arm_assignment[None, :, None] == np.arange(n_arms)[None, None, :])
            & (self.dropout.T[:, :, None] == 0)
        )
        mismatch = np.argwhere(expected != self._mask)
        if len(mismatch):
            t, i, a = mismatch[0]
            raise DataValidationError(
                f"observation rule violated at patient {self.patient_ids[i]}, visit {t + 1}, "
                f"arm {self.arm_labels[a]}")


def donor_set(dataset: TrialDataset, visit: int, arm: int) -> np.ndarray:
    """Patients of ``arm`` whose outcome at ``visit`` is recorded, ascending."""
    return np.flatnonzero(dataset.mask().entries[visit - 1, :, arm])


def compliers(dataset: TrialDataset, arm: int) -> np.ndarray:
    return donor_set(dataset, dataset.n_visits, arm)


def observed_visits(dataset: TrialDataset, patient: int, arm: int, before: int) -> Tuple[int, ...]:
    """Visits tau < before with an outcome recorded for (patient, arm)."""
    column = dataset.mask().entries[: max(before - 1, 0), patient, arm]
    return tuple(int(t) + 1 for t in np.flatnonzero(column))


def feature_vector(dataset: TrialDataset, patient: int, visit_set: Sequence[int], arm: int) -> FeatureVector:
    visits = tuple(sorted(int(v) for v in visit_set))
    for visit in visits:
        if not 1 <= visit <= dataset.n_visits or not dataset.observed(patient, visit, arm):
            raise DataValidationError(
                f"visit {visit} is not observed for patient {dataset.patient_ids[patient]} "
                f"in arm {dataset.arm_labels[arm]}")
    outcomes = [dataset.outcome(patient, v, arm) for v in visits]
    values = np.concatenate([dataset.covariates[patient], np.asarray(outcomes, dtype=float)])
    return FeatureVector(values=values, visit_set=visits, n_covariates=dataset.n_covariates)


def donor_matrix(dataset: TrialDataset, donors: Sequence[int], visit_set: Sequence[int], arm: int) -> np.ndarray:
    """Z_{P T} = [X_P, Y_{P T}], one row per donor."""
    donors = np.asarray(donors, dtype=int)
    visits = sorted(int(v) for v in visit_set)
    outcomes = dataset.outcomes[np.asarray(visits, dtype=int) - 1][:, donors, arm].T if visits else \
        np.empty((len(donors), 0))
    if np.isnan(outcomes).any():
        raise DataValidationError("donor outcomes missing for a requested visit")
    return np.hstack([dataset.covariates[donors], outcomes])


def donor_outcomes(dataset: TrialDataset, donors: Sequence[int], visit: int, arm: int) -> np.ndarray:
    values = dataset.outcomes[visit - 1, np.asarray(donors, dtype=int), arm]
    if np.isnan(values).any():
        raise DataValidationError(f"donor outcomes missing at visit {visit}")
    return np.array(values)


def dropout_targets(dataset: TrialDataset) -> Tuple[TargetTuple, ...]:
    """(i, t, A(i)) for every visit a patient missed after withdrawing."""
    patients, visits = np.nonzero((dataset.dropout == 1) & (dataset.arm_assignment[:, None] >= 0))
    return tuple(TargetTuple(int(i), int(t) + 1, int(dataset.arm_assignment[i])) for i, t in zip(patients, visits))


def counterfactual_targets(dataset: TrialDataset) -> Tuple[TargetTuple, ...]:
    """(i, t, b) for every visit and every arm b other than A(i); unassigned patients get every arm."""
    return tuple(
        TargetTuple(int(i), visit, arm)
        for i in range(dataset.n_patients)
        for arm in range(dataset.n_arms) if arm != dataset.arm_assignment[i]
        for visit in range(1, dataset.n_visits + 1)
    )
