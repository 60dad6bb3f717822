"""Last observation carried forward."""
from dataset import TargetTuple, TrialDataset, observed_visits
from errors import EstimationError


def locf_predict(dataset: TrialDataset, patient: int, arm: int, target_visit: int) -> float:
    visits = observed_visits(dataset, patient, arm, before=target_visit)
    if not visits:
        raise EstimationError(
            f"LOCF undefined: patient {dataset.patient_ids[patient]} has no outcome in arm "
            f"{dataset.arm_labels[arm]} before visit {target_visit}")
    return dataset.outcome(patient, visits[-1], arm)


class LOCFPredictor:
    name = 'locf'

    def predict(self, dataset: TrialDataset, target: TargetTuple) -> float:
        return locf_predict(dataset, target.patient, target.arm, target.visit)
