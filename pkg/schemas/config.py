from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional

import settings
from errors import DataValidationError

MECHANISMS = ('MCAR', 'MAR', 'MNAR')
ESTIMATORS = ('snn', 'naive', 'locf', 'matching')


class RankMode(BaseModel):
    """Rank selection rule for the truncated SVD.

    ``universal`` applies the median-based hard threshold, ``fixed`` keeps
    ``rank`` components, ``energy`` keeps the fewest components whose
    cumulative spectral energy reaches ``fraction``.
    """

    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['universal', 'fixed', 'energy'] = 'universal'
    rank: Optional[int] = Field(default=None, ge=1)
    fraction: Optional[float] = Field(default=None, gt=0.0, le=1.0)

    @model_validator(mode='after')
    def _check_kind(self):
        if self.kind == 'fixed' and self.rank is None:
            raise ValueError("fixed rank mode needs 'rank'")
        if self.kind == 'energy' and self.fraction is None:
            raise ValueError("energy rank mode needs 'fraction'")
        return self

    @classmethod
    def universal(cls) -> 'RankMode':
        return cls(kind='universal')

    @classmethod
    def fixed(cls, rank: int) -> 'RankMode':
        return cls(kind='fixed', rank=rank)

    @classmethod
    def energy(cls, fraction: float) -> 'RankMode':
        return cls(kind='energy', fraction=fraction)

    @classmethod
    def parse(cls, text: str) -> 'RankMode':
        """Parse ``universal``, ``fixed:2`` or ``energy:0.99``."""
        kind, _, value = text.strip().lower().partition(':')
        if kind == 'fixed':
            return cls.fixed(int(value))
        if kind == 'energy':
            return cls.energy(float(value))
        return cls(kind=kind)

    def label(self) -> str:
        if self.kind == 'fixed':
            return f"fixed:{self.rank}"
        if self.kind == 'energy':
            return f"energy:{self.fraction}"
        return 'universal'


class SnnConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    n_subgroups: int = Field(default=settings.SNN_SUBGROUPS, ge=1)
    # 0 is accepted so callers can force every model to fail diagnostics
    alpha: float = Field(default=settings.SNN_ALPHA, ge=0.0, lt=1.0)
    rank_mode: RankMode = Field(default_factory=lambda: RankMode.parse(settings.SNN_RANK_MODE))
    # None -> max(10, d + |T| + 1), resolved per target
    min_subgroup_size: Optional[int] = Field(default=None, ge=1)
    z_ci: float = Field(default=settings.SNN_Z_CI, gt=0.0)
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0)
    noise_sqrt_denominator: bool = False

    @field_validator('rank_mode', mode='before')
    @classmethod
    def _parse_rank_mode(cls, value):
        if isinstance(value, str):
            return RankMode.parse(value)
        return value

    def subgroup_floor(self, n_features: int) -> int:
        if self.min_subgroup_size is not None:
            return self.min_subgroup_size
        return max(10, n_features + 1)


class MatchingConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    n_neighbors: int = Field(default=settings.MATCHING_NEIGHBORS, ge=1)
    metric: Literal['euclidean-standardized'] = 'euclidean-standardized'


class DropoutRateSchedule(BaseModel):
    """Fraction of each arm's original size withdrawing at each visit."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    rho: Dict[int, float] = Field(default_factory=lambda: {2: 0.10, 3: 0.08, 4: 0.06, 5: 0.04})

    @field_validator('rho')
    @classmethod
    def _check_rho(cls, rho):
        for visit, rate in rho.items():
            if visit < 2:
                raise ValueError(f"dropout visits start at 2, got {visit}")
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate for visit {visit} must lie in [0, 1), got {rate}")
        if sum(rho.values()) >= 1.0:
            raise ValueError("dropout rates must sum to less than 1")
        return dict(sorted(rho.items()))

    def rate(self, visit: int) -> float:
        return self.rho.get(visit, 0.0)

    def visits(self) -> List[int]:
        return sorted(self.rho)


class FactorModelConfig(BaseModel):
    """Dimensions and noise scales for the latent factor generator."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    n_patients: int = Field(default=1130, ge=1)
    n_visits: int = Field(default=5, ge=1)
    n_arms: int = Field(default=3, ge=1)
    n_covariates: int = Field(default=len(settings.DEFAULT_COVARIATES), ge=1)
    rank: int = Field(default=2, ge=1)
    outcome_noise_std: float = Field(default=0.0, ge=0.0)
    covariate_noise_std: float = Field(default=0.0, ge=0.0)
    factor_distribution: Literal['uniform', 'gaussian'] = 'uniform'
    covariate_labels: Optional[List[str]] = None

    @model_validator(mode='after')
    def _check_labels(self):
        if self.covariate_labels is not None and len(self.covariate_labels) != self.n_covariates:
            raise ValueError("covariate_labels must have n_covariates entries")
        return self

    def labels(self) -> List[str]:
        if self.covariate_labels is not None:
            return list(self.covariate_labels)
        if self.n_covariates == len(settings.DEFAULT_COVARIATES):
            return list(settings.DEFAULT_COVARIATES)
        return [f"cov_{k + 1}" for k in range(self.n_covariates)]


class StudyConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    n_repeats: int = Field(default=settings.STUDY_REPEATS, ge=1)
    mechanisms: List[Literal['MCAR', 'MAR', 'MNAR']] = Field(default_factory=lambda: list(MECHANISMS))
    estimators: List[Literal['snn', 'naive', 'locf', 'matching']] = Field(default_factory=lambda: list(ESTIMATORS))
    snn: SnnConfig = Field(default_factory=SnnConfig)
    matching: MatchingConfig = Field(default_factory=MatchingConfig)
    schedule: DropoutRateSchedule = Field(default_factory=DropoutRateSchedule)
    # None -> final visit
    eval_visit: Optional[int] = Field(default=None, ge=1)
    all_visits: bool = False
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0)
    workers: int = Field(default=settings.WORKERS, ge=1)

    @field_validator('mechanisms', mode='before')
    @classmethod
    def _upper_mechanisms(cls, value):
        if isinstance(value, str):
            value = value.split(',')
        return [str(v).strip().upper() for v in value]

    @field_validator('estimators', mode='before')
    @classmethod
    def _lower_estimators(cls, value):
        if isinstance(value, str):
            value = value.split(',')
        return [str(v).strip().lower() for v in value]

    @field_validator('mechanisms', 'estimators')
    @classmethod
    def _non_empty_unique(cls, value):
        if not value:
            raise ValueError("at least one entry required")
        return list(dict.fromkeys(value))

    def resolve_eval_visit(self, n_visits: int) -> int:
        visit = n_visits if self.eval_visit is None else self.eval_visit
        if not 1 <= visit <= n_visits:
            raise DataValidationError(f"eval_visit {visit} outside 1..{n_visits}")
        return visit


class CliConfig(BaseModel):
    """JSON configuration file accepted by ``--config``."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    snn: SnnConfig = Field(default_factory=SnnConfig)
    matching: MatchingConfig = Field(default_factory=MatchingConfig)
    schedule: DropoutRateSchedule = Field(default_factory=DropoutRateSchedule)
    factor_model: FactorModelConfig = Field(default_factory=FactorModelConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
