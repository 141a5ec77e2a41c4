"""Configuration dataclasses shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

EPS = 1e-8


@dataclass(frozen=True)
class CalibrationConfig:
    """Quantile levels and holding/slip parameters consumed by calibrate().

    Quantiles use linear interpolation on sorted values. Holding requires the
    gripper closed and every active side at or above f_contact for n_hold
    consecutive frames; slip fires during holding on a center-of-pressure jump
    above c_op or a mean-force drop below -d_f between consecutive frames.
    """

    norm_quantile: float = 0.99
    active_quantile: float = 0.99
    active_threshold: float = 0.05
    force_low_quantile: float = 0.10
    force_high_quantile: float = 0.90
    peak_quantile: float = 0.95
    conc_quantile: float = 0.95
    asym_quantile: float = 0.90
    f_contact: float = 0.02
    n_hold: int = 3
    c_op: float = 0.15
    d_f: float = 0.10
    eps: float = EPS

    def __post_init__(self):
        for name in ("norm_quantile", "active_quantile", "force_low_quantile",
                     "force_high_quantile", "peak_quantile", "conc_quantile",
                     "asym_quantile"):
            q = getattr(self, name)
            if not 0.0 <= q <= 1.0:
                raise ConfigError(f"{name}={q} outside [0, 1]")
        if self.n_hold < 1:
            raise ConfigError("n_hold must be at least 1")
        if self.force_low_quantile >= self.force_high_quantile:
            raise ConfigError("force_low_quantile must sit below force_high_quantile")


@dataclass(frozen=True)
class RewardWeights:
    """Penalty and terminal weights for per-step and episode rewards."""

    lambda_high: float = 1.0
    lambda_low: float = 0.5
    lambda_peak: float = 1.0
    lambda_conc: float = 0.5
    lambda_asym: float = 0.5
    lambda_slip: float = 1.0
    r_step_scale: float = 1.0
    r_succ: float = 1.0
    r_drop: float = 1.0
    r_damage: float = 2.0
    r_risk: float = 0.5
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma={self.gamma} outside (0, 1]")
        for name in ("lambda_high", "lambda_low", "lambda_peak", "lambda_conc",
                     "lambda_asym", "lambda_slip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass(frozen=True)
class WeightingConfig:
    """Hyperparameters of the reward-weighted objective."""

    alpha: float = 0.25
    beta: float = 0.7
    gamma: float = 0.99
    clip_advantage: float = 6.0
    w_min: float = 0.25
    w_max: float = 4.0
    lambda_anchor: float = 1e-3
    warmup_steps: int = 500
    mad_constant: float = 1.4826
    scale_floor: float = EPS
    eps: float = EPS

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta={self.beta} outside [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma={self.gamma} outside (0, 1]")
        if self.clip_advantage <= 0:
            raise ConfigError("clip_advantage must be positive")
        if not 0.0 < self.w_min <= self.w_max:
            raise ConfigError("weight clip range must satisfy 0 < w_min <= w_max")
        if self.lambda_anchor < 0:
            raise ConfigError("lambda_anchor must be non-negative")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for both plain and reward-weighted training."""

    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    sample_stride: int = 10
    log_every: int = 50

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    """Teacher-to-student transfer settings."""

    blend_alpha: float = 0.5
    sampler_steps: int = 10
    root_seed: int = 0
    validation_fraction: float = 0.1
    validation_seed: int = 7
    use_reward_weighting: bool = False

    def __post_init__(self):
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ConfigError(f"blend_alpha={self.blend_alpha} outside [0, 1]")
        if self.sampler_steps < 1:
            raise ConfigError("sampler_steps must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction outside [0, 1)")


def overlay(cfg, updates: dict):
    """Return cfg with the given fields replaced; unknown keys are an error."""
    if not updates:
        return cfg
    names = {f.name for f in fields(cfg)}
    unknown = sorted(set(updates) - names)
    if unknown:
        raise ConfigError(
            f"unknown {type(cfg).__name__} keys: {', '.join(unknown)}")
    return replace(cfg, **updates)
