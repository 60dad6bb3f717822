import os
import sys
import tempfile

import numpy as np
import pandas as pd

# Ensure project root is on path
CURRENT_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from dataset import (UNASSIGNED, TrialDataset, counterfactual_targets, donor_matrix, donor_set, dropout_targets,
                     feature_vector, observed_visits)
from errors import DataValidationError, StorageError
from storage import OutputSession, load_dataset, write_dataset


def _write(directory, name, text):
    path = os.path.join(directory, name)
    with open(path, 'w') as f:
        f.write(text)
    return path


def small_trial():
    """Four patients, three visits, two arms; P0002 withdraws before visit 3."""
    assigned = np.array([
        [10.0, 20.0, 30.0, 40.0],
        [11.0, 21.0, 31.0, 41.0],
        [12.0, 22.0, 32.0, 42.0],
    ])
    covariates = np.array([[70, 1, 25, 22], [65, 0, 30, 20], [80, 1, 20, 25], [72, 0, 28, 21]], dtype=float)
    dropout = np.zeros((4, 3), dtype=np.int8)
    dropout[1, 2] = 1
    return TrialDataset.observe(assigned, covariates, [0, 0, 1, 1], dropout, 2,
                                covariate_labels=['age', 'sex', 'baseline_adascog', 'baseline_mmse'])


def test_observation_rule_and_mask():
    dataset = small_trial()
    assert dataset.observed(0, 1, 0) and not dataset.observed(0, 1, 1)
    assert dataset.observed(1, 2, 0) and not dataset.observed(1, 3, 0)
    # one arm slice per (i, t)
    assert dataset.mask().entries.sum(axis=2).max() == 1
    assert dataset.outcome(3, 3, 1) == 42.0


def test_dataset_is_immutable():
    dataset = small_trial()
    try:
        dataset.outcomes[0, 0, 0] = 1.0
        assert False, "outcomes should be read-only"
    except ValueError:
        pass


def test_validate_rejects_non_absorbing_dropout():
    dropout = np.zeros((2, 3), dtype=np.int8)
    dropout[0] = [0, 1, 0]
    try:
        TrialDataset.observe(np.ones((3, 2)), np.ones((2, 1)), [0, 0], dropout, 1)
        assert False, "expected DataValidationError"
    except DataValidationError as e:
        assert 'absorbing' in e.detail


def test_donor_set_monotone_and_disjoint():
    dataset = small_trial()
    assert donor_set(dataset, 2, 0).tolist() == [0, 1]
    assert donor_set(dataset, 3, 0).tolist() == [0]
    assert donor_set(dataset, 3, 1).tolist() == [2, 3]
    assert set(donor_set(dataset, 1, 0)).isdisjoint(donor_set(dataset, 1, 1))
    empty = TrialDataset.observe(np.ones((2, 2)), np.ones((2, 1)), [0, 0], np.zeros((2, 2)), 2)
    assert donor_set(empty, 1, 1).size == 0


def test_observed_visits():
    dataset = small_trial()
    assert observed_visits(dataset, 1, 0, before=3) == (1, 2)
    assert observed_visits(dataset, 1, 0, before=4) == (1, 2)
    assert observed_visits(dataset, 0, 1, before=3) == ()
    assert observed_visits(dataset, 0, 0, before=1) == ()


def test_feature_vector_concatenates_covariates_then_outcomes():
    dataset = small_trial()
    z = feature_vector(dataset, 0, [1], 0)
    assert np.allclose(z.values, [70, 1, 25, 22, 10.0])
    assert len(feature_vector(dataset, 0, [1, 2], 0)) == 6
    assert np.allclose(feature_vector(dataset, 0, [], 1).values, dataset.covariates[0])
    try:
        feature_vector(dataset, 1, [3], 0)
        assert False, "visit 3 is unobserved for P0002"
    except DataValidationError:
        pass


def test_donor_matrix_rows_match_feature_vectors():
    dataset = small_trial()
    matrix = donor_matrix(dataset, [0, 1], [1, 2], 0)
    assert matrix.shape == (2, 6)
    assert np.allclose(matrix[1], feature_vector(dataset, 1, [1, 2], 0).values)


def test_targets():
    dataset = small_trial()
    assert [(t.patient, t.visit, t.arm) for t in dropout_targets(dataset)] == [(1, 3, 0)]
    # 4 patients x 1 other arm x 3 visits
    assert len(counterfactual_targets(dataset)) == 12


def test_load_dataset_reconstructs_assignment_and_dropout():
    with tempfile.TemporaryDirectory() as d:
        outcomes = "patient_id,visit,arm,value\n" + "".join(
            f"A,{t},placebo,{20 + t}\n" for t in range(1, 6)) + "".join(
            f"B,{t},drug,{30 + t}\n" for t in range(1, 4))
        covariates = "patient_id,age,sex\nA,70,1\nB,65,0\nC,80,1\n"
        dataset = load_dataset(_write(d, 'o.csv', outcomes), _write(d, 'c.csv', covariates))
    assert dataset.arm_labels == ('placebo', 'drug')
    assert dataset.arm_assignment.tolist() == [0, 1, UNASSIGNED]
    assert dataset.dropout[0].tolist() == [0, 0, 0, 0, 0]
    assert dataset.dropout[1].tolist() == [0, 0, 0, 1, 1]
    assert dataset.dropout[2].tolist() == [1, 1, 1, 1, 1]
    assert dataset.outcome(1, 3, 1) == 33.0
    # C has no arm and is a target in both
    assert len(counterfactual_targets(dataset)) == 5 + 5 + 2 * 5


def _load_error(outcomes, covariates="patient_id,age\nA,70\nB,60\n"):
    with tempfile.TemporaryDirectory() as d:
        try:
            load_dataset(_write(d, 'o.csv', outcomes), _write(d, 'c.csv', covariates))
        except DataValidationError as e:
            return e.detail
    raise AssertionError("expected DataValidationError")


def test_load_dataset_errors_carry_row_context():
    sutva = "patient_id,visit,arm,value\nA,1,x,1\nA,2,x,2\nA,2,y,3\n"
    assert 'SUTVA' in _load_error(sutva) and 'row 4' in _load_error(sutva)
    assert 'duplicate' in _load_error("patient_id,visit,arm,value\nA,1,x,1\nA,1,x,2\n")
    assert 'malformed value' in _load_error("patient_id,visit,arm,value\nA,1,x,abc\n")
    assert 'absorbing' in _load_error("patient_id,visit,arm,value\nA,1,x,1\nA,3,x,2\n")
    assert 'not in covariate file' in _load_error("patient_id,visit,arm,value\nZ,1,x,1\n")
    assert 'more than one arm' in _load_error("patient_id,visit,arm,value\nA,1,x,1\nA,2,y,2\n")
    assert 'header' in _load_error("patient,visit,arm,value\nA,1,x,1\n")


def test_missing_file_is_storage_error():
    try:
        load_dataset('/nonexistent/outcomes.csv', '/nonexistent/covariates.csv')
        assert False, "expected StorageError"
    except StorageError as e:
        assert e.exit_code == 3


def test_write_then_load_round_trip():
    dataset = small_trial()
    with tempfile.TemporaryDirectory() as d:
        outcome_path, covariate_path = os.path.join(d, 'o.csv'), os.path.join(d, 'c.csv')
        write_dataset(dataset, outcome_path, covariate_path)
        loaded = load_dataset(outcome_path, covariate_path)
        assert list(pd.read_csv(outcome_path).columns) == ['patient_id', 'visit', 'arm', 'value']
    assert np.array_equal(loaded.mask().entries, dataset.mask().entries)
    assert np.allclose(np.nan_to_num(loaded.outcomes), np.nan_to_num(dataset.outcomes))
    assert np.allclose(loaded.covariates, dataset.covariates)
    assert loaded.covariate_labels == dataset.covariate_labels


def test_output_session_removes_partial_outputs():
    with tempfile.TemporaryDirectory() as d:
        out = os.path.join(d, 'run')
        try:
            with OutputSession(out) as session:
                with open(session.path('a.csv'), 'w') as f:
                    f.write('x\n')
                raise DataValidationError("boom")
        except DataValidationError:
            pass
        assert not os.path.exists(out)


if __name__ == "__main__":
    test_observation_rule_and_mask()
    test_dataset_is_immutable()
    test_validate_rejects_non_absorbing_dropout()
    test_donor_set_monotone_and_disjoint()
    test_observed_visits()
    test_feature_vector_concatenates_covariates_then_outcomes()
    test_donor_matrix_rows_match_feature_vectors()
    test_targets()
    test_load_dataset_reconstructs_assignment_and_dropout()
    test_load_dataset_errors_carry_row_context()
    test_missing_file_is_storage_error()
    test_write_then_load_round_trip()
    test_output_session_removes_partial_outputs()
    print("Dataset tests passed")
