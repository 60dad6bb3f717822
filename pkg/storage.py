import json
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dataset import TrialDataset, UNASSIGNED
from errors import DataValidationError, StorageError

OUTCOME_COLUMNS = ['patient_id', 'visit', 'arm', 'value']


def _read_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise StorageError(f"{path}: file not found")
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"{path}: file is empty")
    except (OSError, pd.errors.ParserError) as e:
        raise StorageError(f"{path}: failed to read: {e}")


def _row(index: int) -> int:
    # header is line 1
    return int(index) + 2


def _parse_numbers(frame: pd.DataFrame, column: str, path: str, integer: bool = False) -> pd.Series:
    parsed = pd.to_numeric(frame[column].str.strip(), errors='coerce')
    bad = parsed.isna() | ~np.isfinite(parsed.astype(float))
    if integer:
        bad |= parsed.fillna(0) % 1 != 0
    if bad.any():
        index = bad.idxmax()
        raise DataValidationError(
            f"{path}: row {_row(index)}: malformed {column} '{frame.at[index, column]}'")
    return parsed.astype(int) if integer else parsed.astype(float)


def load_covariates(covariate_path: str) -> Tuple[List[str], List[str], np.ndarray]:
    frame = _read_csv(covariate_path)
    columns = list(frame.columns)
    if not columns or columns[0] != 'patient_id' or len(columns) < 2:
        raise DataValidationError(
            f"{covariate_path}: header must be 'patient_id,<cov_1>,...,<cov_d>', got {','.join(columns)}")
    ids = frame['patient_id'].str.strip()
    if (ids == '').any():
        raise DataValidationError(f"{covariate_path}: row {_row((ids == '').idxmax())}: empty patient_id")
    if ids.duplicated().any():
        index = ids.duplicated().idxmax()
        raise DataValidationError(f"{covariate_path}: row {_row(index)}: duplicate patient '{ids[index]}'")
    labels = columns[1:]
    values = np.column_stack([_parse_numbers(frame, label, covariate_path).to_numpy() for label in labels])
    return list(ids), labels, values


def load_dataset(outcome_path: str, covariate_path: str, n_visits: Optional[int] = None) -> TrialDataset:
    """Read the long-format outcome CSV and the covariate CSV into a TrialDataset.

    Arm assignment and dropout are reconstructed from which rows are present.
    Patients listed only in the covariate file are kept with no outcomes.
    """
    patient_ids, labels, covariates = load_covariates(covariate_path)
    position = {pid: i for i, pid in enumerate(patient_ids)}

    frame = _read_csv(outcome_path)
    if list(frame.columns) != OUTCOME_COLUMNS:
        raise DataValidationError(
            f"{outcome_path}: header must be '{','.join(OUTCOME_COLUMNS)}', got '{','.join(frame.columns)}'")
    frame['patient_id'] = frame['patient_id'].str.strip()
    frame['arm'] = frame['arm'].str.strip()
    for column in ('patient_id', 'arm'):
        if (frame[column] == '').any():
            raise DataValidationError(
                f"{outcome_path}: row {_row((frame[column] == '').idxmax())}: empty {column}")
    visits = _parse_numbers(frame, 'visit', outcome_path, integer=True)
    values = _parse_numbers(frame, 'value', outcome_path)
    if (visits < 1).any():
        raise DataValidationError(f"{outcome_path}: row {_row((visits < 1).idxmax())}: visits start at 1")
    frame = frame.assign(visit=visits, value=values)

    unknown = ~frame['patient_id'].isin(position)
    if unknown.any():
        index = unknown.idxmax()
        raise DataValidationError(
            f"{outcome_path}: row {_row(index)}: patient '{frame.at[index, 'patient_id']}' "
            f"not in covariate file {covariate_path}")
    duplicated = frame.duplicated(['patient_id', 'visit', 'arm'])
    if duplicated.any():
        index = duplicated.idxmax()
        raise DataValidationError(
            f"{outcome_path}: row {_row(index)}: duplicate entry for patient "
            f"'{frame.at[index, 'patient_id']}', visit {frame.at[index, 'visit']}, arm '{frame.at[index, 'arm']}'")
    two_arms = frame.duplicated(['patient_id', 'visit'])
    if two_arms.any():
        index = two_arms.idxmax()
        raise DataValidationError(
            f"{outcome_path}: row {_row(index)}: SUTVA violation, patient '{frame.at[index, 'patient_id']}' "
            f"observed under two arms at visit {frame.at[index, 'visit']}")
    arms_per_patient = frame.groupby('patient_id', sort=False)['arm'].nunique()
    if (arms_per_patient > 1).any():
        pid = arms_per_patient[arms_per_patient > 1].index[0]
        index = frame.index[frame['patient_id'] == pid][0]
        raise DataValidationError(
            f"{outcome_path}: row {_row(index)}: patient '{pid}' appears under more than one arm")

    arm_labels = list(dict.fromkeys(frame['arm']))
    arm_index = {label: a for a, label in enumerate(arm_labels)}
    max_visit = int(frame['visit'].max()) if len(frame) else 1
    if n_visits is None:
        n_visits = max_visit
    elif max_visit > n_visits:
        raise DataValidationError(f"{outcome_path}: visit {max_visit} exceeds n_visits={n_visits}")

    n_patients = len(patient_ids)
    assigned = np.full((n_visits, n_patients), np.nan)
    arm_assignment = np.full(n_patients, UNASSIGNED, dtype=int)
    dropout = np.ones((n_patients, n_visits), dtype=np.int8)
    for pid, rows in frame.groupby('patient_id', sort=False):
        i = position[pid]
        seen = np.sort(rows['visit'].to_numpy())
        if not np.array_equal(seen, np.arange(1, len(seen) + 1)):
            index = rows.index[0]
            raise DataValidationError(
                f"{outcome_path}: row {_row(index)}: patient '{pid}' has visits {seen.tolist()}; "
                "dropout must be absorbing (observed visits must be 1..m)")
        arm_assignment[i] = arm_index[rows['arm'].iloc[0]]
        dropout[i, :len(seen)] = 0
        assigned[rows['visit'].to_numpy() - 1, i] = rows['value'].to_numpy()

    return TrialDataset.observe(assigned, covariates, arm_assignment, dropout, len(arm_labels),
                                patient_ids, labels, arm_labels)


def outcome_frame(dataset: TrialDataset) -> pd.DataFrame:
    t_idx, i_idx, a_idx = np.nonzero(dataset.mask().entries)
    frame = pd.DataFrame({
        'patient_id': np.asarray(dataset.patient_ids, dtype=object)[i_idx],
        'visit': t_idx + 1,
        'arm': np.asarray(dataset.arm_labels, dtype=object)[a_idx],
        'value': dataset.outcomes[t_idx, i_idx, a_idx],
        '_order': i_idx,
    })
    return frame.sort_values(['_order', 'visit'], kind='stable').drop(columns='_order').reset_index(drop=True)


def covariate_frame(dataset: TrialDataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.covariates, columns=list(dataset.covariate_labels))
    frame.insert(0, 'patient_id', list(dataset.patient_ids))
    return frame


def write_dataset(dataset: TrialDataset, outcome_path: str, covariate_path: str) -> None:
    write_frame(outcome_frame(dataset), outcome_path)
    write_frame(covariate_frame(dataset), covariate_path)


def write_ground_truth(dataset: TrialDataset, ground_truth: np.ndarray, path: str) -> None:
    """Noiseless mean outcomes for every (patient, visit, arm), arms included even if unassigned."""
    n_visits, n_patients, n_arms = ground_truth.shape
    i_idx, t_idx, a_idx = np.meshgrid(np.arange(n_patients), np.arange(n_visits), np.arange(n_arms),
                                      indexing='ij')
    frame = pd.DataFrame({
        'patient_id': np.asarray(dataset.patient_ids, dtype=object)[i_idx.ravel()],
        'visit': t_idx.ravel() + 1,
        'arm': np.asarray(dataset.arm_labels, dtype=object)[a_idx.ravel()],
        'mean_outcome': ground_truth[t_idx.ravel(), i_idx.ravel(), a_idx.ravel()],
    })
    write_frame(frame, path)


def write_dropouts(dataset: TrialDataset, dropout_sets: Dict[int, List[Tuple[int, int]]],
                   mechanism: str, path: str, fmt: str = 'csv') -> None:
    rows = [
        {'patient_id': dataset.patient_ids[i], 'arm': dataset.arm_labels[arm],
         'first_missing_visit': visit, 'mechanism': mechanism}
        for arm in sorted(dropout_sets) for i, visit in dropout_sets[arm]
    ]
    write_frame(pd.DataFrame(rows, columns=['patient_id', 'arm', 'first_missing_visit', 'mechanism']), path, fmt)


def write_frame(frame: pd.DataFrame, path: str, fmt: str = 'csv') -> None:
    try:
        if fmt == 'json':
            records = frame.astype(object).where(frame.notna(), None).to_dict(orient='records')
            write_json(records, path)
        else:
            frame.to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise StorageError(f"{path}: failed to write: {e}")


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(payload, path: str) -> None:
    try:
        with open(path, 'w') as f:
            json.dump(_clean(payload), f, indent=2, sort_keys=True)
            f.write('\n')
    except OSError as e:
        raise StorageError(f"{path}: failed to write: {e}")


def read_json(path: str):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise StorageError(f"{path}: file not found")
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path}: invalid JSON: {e}")


class OutputSession:
    """Tracks files written into ``out_dir``; removes them if the block raises."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.written: List[str] = []
        self._created_dir = False

    def __enter__(self) -> 'OutputSession':
        try:
            if not os.path.isdir(self.out_dir):
                os.makedirs(self.out_dir)
                self._created_dir = True
        except OSError as e:
            raise StorageError(f"{self.out_dir}: cannot create output directory: {e}")
        return self

    def path(self, name: str) -> str:
        path = os.path.join(self.out_dir, name)
        self.written.append(path)
        return path

    def paths(self, names: Sequence[str]) -> List[str]:
        return [self.path(name) for name in names]

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            return False
        for path in self.written:
            try:
                if os.path.exists(path):
                    os.remove(path)
            except OSError:
                pass
        if self._created_dir:
            try:
                os.rmdir(self.out_dir)
            except OSError:
                pass
        return False
