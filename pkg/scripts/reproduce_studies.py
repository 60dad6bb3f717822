import os
import json
import sys
from typing import List

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import settings
from dgp import simulate_trial
from errors import TrialError
from evaluation import run_dropout_study, run_synthetic_rct_study
from schemas.config import FactorModelConfig, StudyConfig


def run(studies: List[str], seed: int, noise: float, workers: int) -> dict:
    # trial shape: 1130 patients, 5 visits, 3 arms, 4 covariates, rank 2
    factor_model = FactorModelConfig(outcome_noise_std=noise, covariate_noise_std=noise)
    dataset, _ = simulate_trial(factor_model, np.random.default_rng(seed))
    config = StudyConfig(seed=seed, workers=workers)
    summaries = {}
    for study in studies:
        runner = run_dropout_study if study == 'dropout' else run_synthetic_rct_study
        try:
            report = runner(dataset, config)
            summaries[study] = report.summary()
        except TrialError as e:
            print(json.dumps({"study": study, "error": e.detail}))
    return summaries


def main(studies: List[str]):
    seed = int(os.getenv("DEFAULT_SEED", settings.DEFAULT_SEED))
    noise = float(os.getenv("NOISE_STD", 0.05))
    summaries = run(studies, seed, noise, settings.WORKERS)
    print(json.dumps({"schema_version": settings.SCHEMA_VERSION, "summaries": summaries}, default=float))


if __name__ == "__main__":
    raw = os.getenv("STUDIES") or (sys.argv[1] if len(sys.argv) > 1 else "dropout,synthetic-rct")
    studies = [s.strip().lower() for s in raw.split(",") if s.strip()]
    main(studies)
