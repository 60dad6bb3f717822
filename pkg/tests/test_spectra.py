import os
import sys

import numpy as np

# Ensure project root is on path
CURRENT_DIR = os.path.dirname(__file__)
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from dgp import simulate_trial
from errors import DataValidationError, EstimationError
from schemas.config import FactorModelConfig, RankMode
from spectra import (arm_energy_profiles, omega, select_rank, spectral_energy_profile, standardize_columns, svd)


def test_svd_examples():
    assert np.allclose(svd(np.eye(2)).singular_values, [1.0, 1.0])
    s = svd(np.array([[1.0, 1.0], [2.0, 2.0]])).singular_values
    assert np.isclose(s[0], np.sqrt(10)) and abs(s[1]) < 1e-12


def test_svd_orthonormal_and_reconstructs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m, n = rng.integers(2, 15, size=2)
        matrix = rng.normal(size=(m, n))
        d = svd(matrix)
        q = min(m, n)
        assert np.allclose(d.left_vectors.T @ d.left_vectors, np.eye(q), atol=1e-10)
        assert np.allclose(d.right_vectors.T @ d.right_vectors, np.eye(q), atol=1e-10)
        assert np.linalg.norm(d.reconstruct() - matrix) <= 1e-8 * np.linalg.norm(matrix)
        assert np.all(np.diff(d.singular_values) <= 0)
        assert np.allclose(d.singular_values, svd(matrix.T).singular_values)


def test_svd_rejects_non_finite():
    try:
        svd(np.array([[1.0, np.nan]]))
        assert False, "expected DataValidationError"
    except DataValidationError:
        pass


def test_select_rank_examples():
    assert np.isclose(omega(1.0), 2.86)
    assert select_rank(np.array([5.0, 4.0, 3.0]), 3, 3, RankMode.fixed(2)) == 2
    assert select_rank(np.array([10.0, 0.01, 0.01]), 3, 3, RankMode.universal()) == 1
    assert select_rank(np.array([1.0, 1.0, 1.0]), 3, 3, RankMode.universal()) == 1
    assert select_rank(np.array([3.0, 4.0 ** 0.5, 1.0]), 3, 3, RankMode.energy(0.9)) == 2
    try:
        select_rank(np.array([]), 1, 1, RankMode.universal())
        assert False, "expected DataValidationError"
    except DataValidationError:
        pass


def test_select_rank_universal_is_scale_equivariant():
    rng = np.random.default_rng(3)
    for _ in range(25):
        s = np.sort(rng.exponential(size=8))[::-1]
        base = select_rank(s, 20, 8, RankMode.universal())
        assert select_rank(7.5 * s, 20, 8, RankMode.universal()) == base
        assert 1 <= base <= 8


def test_universal_ignores_round_off_on_exact_low_rank():
    rng = np.random.default_rng(1)
    matrix = rng.normal(size=(15, 2)) @ rng.normal(size=(2, 7))
    s = svd(matrix).singular_values
    assert select_rank(s, 15, 7, RankMode.universal()) == 2


def test_spectral_energy_profile():
    rng = np.random.default_rng(2)
    low_rank = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 6))
    assert np.isclose(spectral_energy_profile(low_rank, 2)[-1], 1.0)
    assert np.isclose(spectral_energy_profile(np.eye(3), 1)[0], 1.0 / 3.0)
    full = spectral_energy_profile(low_rank, 6)
    assert np.all(np.diff(full) >= -1e-15) and np.isclose(full[-1], 1.0)
    permuted = low_rank[rng.permutation(10)][:, rng.permutation(6)]
    assert np.allclose(spectral_energy_profile(permuted, 6), full)
    try:
        spectral_energy_profile(np.zeros((3, 3)), 2)
        assert False, "expected EstimationError"
    except EstimationError:
        pass


def test_standardize_columns():
    scaled, record = standardize_columns(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    assert np.allclose(scaled[:, 0], [-1.224744871391589, 0.0, 1.224744871391589])
    assert np.allclose(scaled[:, 1], 0.0)
    assert record.flagged.tolist() == [False, True]
    again, _ = standardize_columns(scaled)
    assert np.allclose(again[:, 0], scaled[:, 0], atol=1e-12)
    assert np.allclose(record.transform([2.0, 5.0]), [0.0, 0.0])


def test_scale_only_standardization_keeps_column_ratios():
    matrix = np.array([[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]])
    scaled, record = standardize_columns(matrix, with_mean=False)
    assert np.allclose(record.mean, 0.0)
    assert np.allclose(scaled[:, 0], scaled[:, 1])


def test_generated_trials_put_energy_in_top_two_components():
    passing = 0
    for seed in range(100):
        config = FactorModelConfig(n_patients=120, outcome_noise_std=0.01, covariate_noise_std=0.01)
        dataset, _ = simulate_trial(config, np.random.default_rng(seed))
        profile = arm_energy_profiles(dataset, top_k=9)
        top_two = profile[profile['k'] == 2]['cumulative_energy']
        passing += int((top_two >= 0.99).all())
    assert passing >= 95


def test_arm_energy_profiles_clamp_top_k():
    dataset, _ = simulate_trial(FactorModelConfig(n_patients=30, n_covariates=2, covariate_labels=['a', 'b']),
                                np.random.default_rng(0))
    profile = arm_energy_profiles(dataset, top_k=50)
    # 2 covariates + 5 visits
    assert profile.groupby('arm')['k'].max().tolist() == [7, 7, 7]
    assert list(profile.columns) == ['arm', 'k', 'cumulative_energy']


if __name__ == "__main__":
    test_svd_examples()
    test_svd_orthonormal_and_reconstructs()
    test_svd_rejects_non_finite()
    test_select_rank_examples()
    test_select_rank_universal_is_scale_equivariant()
    test_universal_ignores_round_off_on_exact_low_rank()
    test_spectral_energy_profile()
    test_standardize_columns()
    test_scale_only_standardization_keeps_column_ratios()
    test_generated_trials_put_energy_in_top_two_components()
    test_arm_energy_profiles_clamp_top_k()
    print("Spectra tests passed")
