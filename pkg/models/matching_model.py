"""K-nearest-neighbour matching on the same features SNN regresses on."""
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import pairwise_distances

from dataset import (TargetTuple, TrialDataset, donor_matrix, donor_outcomes, donor_set, feature_vector,
                     observed_visits)
from errors import EstimationError
from schemas.config import MatchingConfig
from spectra import standardize_columns


def nearest_donors(dataset: TrialDataset, target: TargetTuple, donor_pool: Sequence[int],
                   n_neighbors: int) -> np.ndarray:
    """The n_neighbors donors closest to the target in standardized feature space.

    Ties go to the lower patient index.
    """
    pool = np.unique(np.asarray(donor_pool, dtype=int))
    pool = pool[pool != target.patient]
    if pool.size == 0:
        raise EstimationError(
            f"empty matching pool for patient {dataset.patient_ids[target.patient]} at visit {target.visit}")
    if pool.size <= n_neighbors:
        return pool
    visits = observed_visits(dataset, target.patient, target.arm, before=target.visit)
    features = feature_vector(dataset, target.patient, visits, target.arm)
    scaled, record = standardize_columns(donor_matrix(dataset, pool, visits, target.arm))
    distances = pairwise_distances(record.transform(features.values)[None, :], scaled, metric='euclidean')[0]
    order = np.argsort(distances, kind='stable')
    return np.sort(pool[order[:n_neighbors]])


def matching_predict(dataset: TrialDataset, target: TargetTuple, donor_pool: Sequence[int],
                     config: Optional[MatchingConfig] = None) -> float:
    config = config or MatchingConfig()
    nearest = nearest_donors(dataset, target, donor_pool, config.n_neighbors)
    return float(donor_outcomes(dataset, nearest, target.visit, target.arm).mean())


class MatchingPredictor:
    name = 'matching'

    def __init__(self, config: Optional[MatchingConfig] = None, donor_pool: Optional[Sequence[int]] = None):
        self.config = config or MatchingConfig()
        # None -> every arm patient observed at the target visit
        self.donor_pool = donor_pool

    def predict(self, dataset: TrialDataset, target: TargetTuple) -> float:
        pool = donor_set(dataset, target.visit, target.arm) if self.donor_pool is None else self.donor_pool
        return matching_predict(dataset, target, pool, self.config)
