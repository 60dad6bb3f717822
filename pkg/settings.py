import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# SNN estimator settings
SNN_SUBGROUPS = int(os.getenv('SNN_SUBGROUPS', 5))
SNN_ALPHA = float(os.getenv('SNN_ALPHA', 0.2))
SNN_Z_CI = float(os.getenv('SNN_Z_CI', 1.96))
SNN_RANK_MODE = os.getenv('SNN_RANK_MODE', 'universal')

# Baseline settings
MATCHING_NEIGHBORS = int(os.getenv('MATCHING_NEIGHBORS', 5))

# Study settings
STUDY_REPEATS = int(os.getenv('STUDY_REPEATS', 10))
BASELINE_COLUMN = os.getenv('BASELINE_COLUMN', 'baseline_adascog')
DEFAULT_COVARIATES = ['age', 'sex', 'baseline_adascog', 'baseline_mmse']
DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', 0))

# Runtime settings
WORKERS = int(os.getenv('WORKERS', 1))
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

# Every report and manifest carries this
SCHEMA_VERSION = 'snn-trials/1'
