"""Naive baseline: the arm mean over compliers, shared by every target."""
from typing import Optional, Sequence

import numpy as np

from dataset import TargetTuple, TrialDataset, compliers as arm_compliers, donor_outcomes
from errors import EstimationError


def naive_predict(dataset: TrialDataset, visit: int, arm: int, compliers: Sequence[int]) -> float:
    compliers = np.asarray(compliers, dtype=int)
    if compliers.size == 0:
        raise EstimationError(f"no compliers in arm {dataset.arm_labels[arm]} to average at visit {visit}")
    return float(donor_outcomes(dataset, compliers, visit, arm).mean())


class NaivePredictor:
    name = 'naive'

    def __init__(self, compliers: Optional[Sequence[int]] = None):
        # None -> patients of the arm observed at the final visit
        self.compliers = compliers

    def predict(self, dataset: TrialDataset, target: TargetTuple) -> float:
        pool = arm_compliers(dataset, target.arm) if self.compliers is None else np.asarray(self.compliers)
        pool = pool[pool != target.patient]
        return naive_predict(dataset, target.visit, target.arm, pool)
