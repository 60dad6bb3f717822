import os
import sys

import numpy as np
import pandas as pd

# Ensure project root is on path
CURRENT_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from dataset import TrialDataset
from dgp import simulate_trial
from errors import DataValidationError
from evaluation import (REPORT_COLUMNS, dropout_trajectories, nmse, run_dropout_study, run_synthetic_rct_study,
                        split_nmse)
from schemas.config import FactorModelConfig, StudyConfig
from worker import job_synthetic_rct_repeat, model_counter_values, split_arm


def trial(n_patients=120, noise=0.0, seed=0):
    config = FactorModelConfig(n_patients=n_patients, outcome_noise_std=noise, covariate_noise_std=noise)
    dataset, _ = simulate_trial(config, np.random.default_rng(seed))
    return dataset


def test_nmse_examples():
    assert nmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert np.isclose(nmse([2.0], [1.0]), 0.25)
    truth, predictions = np.array([1.0, -2.0, 3.0]), np.array([0.5, -1.0, 2.0])
    assert np.isclose(nmse(4.0 * truth, 4.0 * predictions), nmse(truth, predictions))
    for bad in (([], []), ([1.0], [1.0, 2.0]), ([0.0, 0.0], [1.0, 1.0])):
        try:
            nmse(*bad)
            assert False, "expected DataValidationError"
        except DataValidationError:
            pass


def test_split_nmse_partitions_the_error():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=40)
    estimates = truth + rng.normal(scale=0.3, size=40)
    passed = rng.random(40) < 0.6
    passed_nmse, failed_nmse, counts = split_nmse(truth, estimates, passed)
    assert counts == {'passed': int(passed.sum()), 'failed': int((~passed).sum())}
    total = passed_nmse * np.sum(truth[passed] ** 2) + failed_nmse * np.sum(truth[~passed] ** 2)
    assert np.isclose(total / np.sum(truth ** 2), nmse(truth, estimates))
    assert split_nmse([1.0], [1.0], [True])[1] is None


def test_noiseless_dropout_study_recovers_exactly():
    config = StudyConfig(n_repeats=1, estimators=['snn'], all_visits=True, seed=3)
    report = run_dropout_study(trial(), config)
    assert list(report.rows.columns) == REPORT_COLUMNS
    assert (report.rows['n_targets'] > 0).all()
    assert report.rows['nmse'].max() <= 1e-10


def test_noiseless_synthetic_rct_recovers_exactly():
    config = StudyConfig(n_repeats=1, estimators=['snn'], all_visits=True, seed=3)
    report = run_synthetic_rct_study(trial(), config)
    assert report.rows['nmse'].max() <= 1e-10
    assert set(report.rows['mechanism']) == {'none'}


def test_identical_trajectories_make_naive_exact():
    rng = np.random.default_rng(1)
    arms = np.repeat([0, 1], 30)
    outcomes = np.array([[(t + 1) * (arm + 1) for arm in arms] for t in range(5)], dtype=float)
    dataset = TrialDataset.observe(outcomes, rng.normal(size=(60, 2)), arms, np.zeros((60, 5)), 2)
    report = run_dropout_study(dataset, StudyConfig(n_repeats=2, mechanisms=['MCAR'], estimators=['naive']))
    assert (report.rows['nmse'] == 0.0).all()


def test_report_grid_and_counts():
    config = StudyConfig(n_repeats=2, estimators=['naive', 'locf', 'matching'], seed=1)
    report = run_dropout_study(trial(n_patients=120, noise=0.1), config)
    # repeats x mechanisms x arms x estimators, one eval visit
    assert len(report.rows) == 2 * 3 * 3 * 3
    assert report.diagnostics_split.empty
    # 40 patients per arm: round(0.1, 0.08, 0.06, 0.04 of 40)
    per_visit = report.counts.groupby('visit')['count'].agg(lambda c: sorted(set(c)))
    assert per_visit.tolist() == [[4], [3], [2], [2]]
    assert len(report.counts) == 2 * 3 * 3 * 4
    assert (report.rows['n_targets'] == 11).all()


def test_all_visits_widens_the_grid():
    config = StudyConfig(n_repeats=1, mechanisms=['MCAR'], estimators=['naive'], all_visits=True)
    report = run_dropout_study(trial(noise=0.1), config)
    assert sorted(report.rows['visit'].unique().tolist()) == [2, 3, 4, 5]
    # dropouts accumulate: 4 at visit 2, 11 by visit 5
    assert report.rows.groupby('visit')['n_targets'].first().tolist() == [4, 7, 9, 11]


def test_synthetic_rct_split_sizes():
    members = np.arange(11)
    test = split_arm(members, np.random.default_rng(0))
    assert test.size == 5 and np.all(np.diff(test) > 0)
    result = job_synthetic_rct_repeat(trial(n_patients=33), StudyConfig(estimators=['naive']), 0)
    assert [(c['n_test'], c['n_train']) for c in result.counts] == [(5, 6)] * 3
    try:
        split_arm(np.arange(1), np.random.default_rng(0))
        assert False, "expected DataValidationError"
    except DataValidationError:
        pass


def test_synthetic_rct_skips_locf():
    report = run_synthetic_rct_study(trial(noise=0.1), StudyConfig(n_repeats=1, estimators=['naive', 'locf']))
    assert set(report.rows['estimator']) == {'naive'}


def test_snn_beats_baselines_on_dropouts():
    # noise at about a tenth of the signal spread
    dataset = trial(n_patients=300, noise=0.047, seed=11)
    report = run_dropout_study(dataset, StudyConfig(n_repeats=10, seed=11))
    per_mechanism = report.rows.groupby(['mechanism', 'estimator'])['nmse'].mean().unstack()
    assert sorted(per_mechanism.index) == ['MAR', 'MCAR', 'MNAR']
    for mechanism, means in per_mechanism.iterrows():
        for baseline in ('naive', 'locf', 'matching'):
            assert means['snn'] < means[baseline], (mechanism, baseline)
    summary = report.summary()
    assert summary['relative_improvement'] > 0
    assert summary['best_baseline'] in ('naive', 'locf', 'matching')


def test_snn_beats_baselines_on_synthetic_rct():
    means = []
    for seed in range(10, 16):
        dataset = trial(n_patients=300, noise=0.047, seed=seed)
        config = StudyConfig(n_repeats=10, estimators=['snn', 'naive', 'matching'], seed=seed)
        seed_means = run_synthetic_rct_study(dataset, config).mean_nmse()
        assert seed_means['snn'] < seed_means['naive']
        means.append(seed_means)
    pooled = pd.DataFrame(means).mean()
    assert pooled['snn'] < pooled['matching']


def test_passed_tuples_are_more_accurate_than_failed():
    dataset = trial(n_patients=300, noise=0.047, seed=13)
    rng = np.random.default_rng(13)
    outliers = rng.choice(300, 30, replace=False)
    covariates = np.array(dataset.covariates)
    covariates[outliers] += rng.normal(scale=0.6, size=(30, dataset.n_covariates))
    noisy = TrialDataset.observe(dataset.assigned_outcomes(), covariates, dataset.arm_assignment, dataset.dropout,
                                 dataset.n_arms, covariate_labels=dataset.covariate_labels)
    report = run_dropout_study(noisy, StudyConfig(n_repeats=3, mechanisms=['MCAR'], estimators=['snn'], seed=13))
    frame = report.predictions
    passed_nmse, failed_nmse, counts = split_nmse(frame['truth'], frame['estimate'], frame['passed'].astype(bool))
    assert counts['passed'] > 0 and counts['failed'] > 0
    assert passed_nmse < failed_nmse


def test_studies_are_deterministic_and_pool_matches_serial():
    dataset = trial(noise=0.1, seed=4)
    config = StudyConfig(n_repeats=2, seed=5, estimators=['snn', 'naive'])
    first = run_dropout_study(dataset, config)
    second = run_dropout_study(dataset, config)
    pooled = run_dropout_study(dataset, config.model_copy(update={'workers': 2}))
    pd.testing.assert_frame_equal(first.rows, second.rows)
    pd.testing.assert_frame_equal(first.rows, pooled.rows)
    pd.testing.assert_frame_equal(first.predictions, pooled.predictions)
    assert first.metadata['seeds'] == [5, 6]


def test_pooled_repeats_report_model_counters():
    dataset = trial(noise=0.1, seed=4)
    config = StudyConfig(n_repeats=2, seed=5, mechanisms=['MCAR'], estimators=['snn'], workers=2)
    before = model_counter_values()
    report = run_dropout_study(dataset, config)
    after = model_counter_values()
    passed = report.predictions['passed'].astype(bool)
    assert after[0] - before[0] == passed.sum()
    assert after[1] - before[1] == (~passed).sum()


def test_dropout_trajectories():
    dataset = trial(noise=0.05)
    frame = dropout_trajectories(dataset, StudyConfig(seed=2), 'mar')
    assert len(frame) == 11 * 3 * 5
    for _, rows in frame.groupby('patient_id'):
        predicted = rows['predicted'].notna().tolist()
        # observed prefix, imputed suffix
        assert predicted == sorted(predicted) and predicted[-1]
        assert not predicted[0]


def test_studies_need_a_complete_dataset():
    dataset = trial()
    dropout = np.zeros((dataset.n_patients, dataset.n_visits), dtype=np.int8)
    dropout[0, 2:] = 1
    try:
        run_dropout_study(dataset.with_dropout(dropout), StudyConfig(n_repeats=1))
        assert False, "expected DataValidationError"
    except DataValidationError:
        pass


if __name__ == "__main__":
    test_nmse_examples()
    test_split_nmse_partitions_the_error()
    test_noiseless_dropout_study_recovers_exactly()
    test_noiseless_synthetic_rct_recovers_exactly()
    test_identical_trajectories_make_naive_exact()
    test_report_grid_and_counts()
    test_all_visits_widens_the_grid()
    test_synthetic_rct_split_sizes()
    test_synthetic_rct_skips_locf()
    test_snn_beats_baselines_on_dropouts()
    test_snn_beats_baselines_on_synthetic_rct()
    test_passed_tuples_are_more_accurate_than_failed()
    test_studies_are_deterministic_and_pool_matches_serial()
    test_pooled_repeats_report_model_counters()
    test_dropout_trajectories()
    test_studies_need_a_complete_dataset()
    print("Evaluation tests passed")
