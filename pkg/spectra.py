"""Spectral kernel: SVD, rank selection, spectral energy and column scaling."""
import json
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from dataset import compliers, donor_matrix
from errors import DataValidationError, EstimationError
from schemas.config import RankMode

logger = logging.getLogger("snntrials")

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class SpectralDecomposition:
    left_vectors: np.ndarray     # m x q
    singular_values: np.ndarray  # q, nonincreasing
    right_vectors: np.ndarray    # n x q

    @property
    def shape(self) -> Tuple[int, int]:
        return self.left_vectors.shape[0], self.right_vectors.shape[0]

    def truncate(self, rank: int) -> 'SpectralDecomposition':
        return SpectralDecomposition(
            self.left_vectors[:, :rank], self.singular_values[:rank], self.right_vectors[:, :rank])

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def svd(matrix: np.ndarray) -> SpectralDecomposition:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.size == 0:
        raise DataValidationError(f"svd needs a non-empty 2-d matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise DataValidationError("svd input has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise EstimationError(f"SVD did not converge: {e}")
    return SpectralDecomposition(u, s, vt.T)


def omega(beta: float) -> float:
    """Cubic approximation of the optimal hard-threshold coefficient."""
    return 0.56 * beta ** 3 - 0.95 * beta ** 2 + 1.82 * beta + 1.43


def universal_threshold(singular_values: np.ndarray, m: int, n: int) -> float:
    beta = min(m, n) / max(m, n)
    return omega(beta) * float(np.median(singular_values))


def numerical_rank(singular_values: np.ndarray, m: int, n: int) -> int:
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0 or s[0] <= 0:
        return 0
    tol = s[0] * max(m, n) * np.finfo(float).eps
    return int(np.sum(s > tol))


def select_rank(singular_values: np.ndarray, m: int, n: int, mode: RankMode) -> int:
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0:
        raise DataValidationError("cannot select a rank from an empty spectrum")
    if m < 1 or n < 1:
        raise DataValidationError(f"matrix dimensions must be positive, got {m}x{n}")
    upper = min(m, n, s.size)

    if mode.kind == 'fixed':
        rank = mode.rank
    elif mode.kind == 'energy':
        energy = s ** 2
        total = energy.sum()
        if total <= 0:
            rank = 1
        else:
            cumulative = np.cumsum(energy) / total
            rank = int(np.searchsorted(cumulative, mode.fraction - 1e-12) + 1)
    else:
        rank = int(np.sum(s > universal_threshold(s, m, n)))
        # round-off singular values of an exactly low-rank matrix never count
        rank = min(rank, numerical_rank(s, m, n))
    return int(min(max(rank, 1), upper))


def spectral_energy_profile(matrix: np.ndarray, top_k: int) -> np.ndarray:
    """Cumulative fraction of squared singular values captured by the top k components."""
    decomposition = svd(matrix)
    m, n = decomposition.shape
    if not 1 <= top_k <= min(m, n):
        raise DataValidationError(f"top_k={top_k} must lie in 1..{min(m, n)}")
    energy = decomposition.singular_values ** 2
    total = energy.sum()
    if total <= 0:
        raise EstimationError("spectral energy undefined for a zero matrix")
    return np.cumsum(energy)[:top_k] / total


@dataclass(frozen=True)
class ColumnScaling:
    """Per-column affine record; ``flagged`` columns were centered only."""

    mean: np.ndarray
    scale: np.ndarray
    flagged: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.scale


def standardize_columns(matrix: np.ndarray, with_mean: bool = True) -> Tuple[np.ndarray, ColumnScaling]:
    """Scale each column to unit population deviation, centering it when ``with_mean``.

    Columns whose deviation is below 1e-12 keep scale 1 and are flagged.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise DataValidationError(f"standardization needs at least 2 rows, got shape {matrix.shape}")
    scaler = StandardScaler(with_mean=with_mean).fit(matrix)
    deviation = np.sqrt(scaler.var_)
    flagged = deviation < SCALE_FLOOR
    scale = np.where(flagged, 1.0, deviation)
    mean = scaler.mean_ if with_mean else np.zeros(matrix.shape[1])
    record = ColumnScaling(mean=np.array(mean), scale=scale, flagged=flagged)
    return record.transform(matrix), record


def arm_energy_profiles(dataset, top_k: int, standardized: bool = False) -> pd.DataFrame:
    """Cumulative energy of each arm's complier matrix [X, Y_1..Y_T], one row per (arm, k).

    ``top_k`` is clamped to the matrix's smaller dimension; arms without
    enough compliers are skipped.
    """
    rows = []
    visits = range(1, dataset.n_visits + 1)
    for arm, label in enumerate(dataset.arm_labels):
        patients = compliers(dataset, arm)
        if patients.size < (2 if standardized else 1):
            logger.info(json.dumps({"event": "spectrum_skipped", "arm": label, "compliers": int(patients.size)}))
            continue
        matrix = donor_matrix(dataset, patients, visits, arm)
        if standardized:
            matrix, _ = standardize_columns(matrix)
        k = min(top_k, *matrix.shape)
        for index, energy in enumerate(spectral_energy_profile(matrix, k), start=1):
            rows.append({'arm': label, 'k': index, 'cumulative_energy': float(energy)})
    return pd.DataFrame(rows, columns=['arm', 'k', 'cumulative_energy'])
