"""Dataset-calibrated safety thresholds and tactile reward computation.

Calibration fits a normalization scale and force/peak/concentration
thresholds from empirical quantiles of a demonstration set. Per-step rewards
are negative quadratic exceedance penalties plus a flat slip penalty; an
episode reward adds terminal outcome bonuses and a bounded risk score built
from threshold exceedances over the holding window.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .config import CalibrationConfig, RewardWeights
from .errors import CalibrationError
from .tactile import (SIDES, TactileFrame, contact_stats, holding_state,
                      normalize_frames)


@dataclass(frozen=True)
class SafetyCalibration:
    """Thresholds derived from a dataset, plus the parameters used to derive them.

    Forces, peaks and concentrations are in normalized units. f_contact,
    n_hold, c_op and d_f are copied from the calibration config so this object
    alone drives holding/slip detection downstream.
    """

    norm_scale: float
    active_sides: tuple
    f_min: float
    f_max: float
    p_max: float
    c_max: float
    delta: float
    f_contact: float
    n_hold: int
    c_op: float
    d_f: float
    eps: float
    quantile_method: str = "linear"
    config: CalibrationConfig = CalibrationConfig()

    def __post_init__(self):
        object.__setattr__(self, "active_sides", tuple(self.active_sides))
        if not self.active_sides:
            raise CalibrationError("calibration needs at least one active side")
        if not 0.0 <= self.f_min < self.f_max:
            raise CalibrationError(
                f"force band degenerate: f_min={self.f_min}, f_max={self.f_max}")
        for name in ("norm_scale", "p_max", "c_max"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise CalibrationError(f"{name} must be finite and positive, got {v}")
        if not (np.isfinite(self.delta) and self.delta >= 0):
            raise CalibrationError(f"delta must be finite and >= 0, got {self.delta}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_sides"] = list(self.active_sides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SafetyCalibration":
        d = dict(d)
        d["config"] = CalibrationConfig(**d.get("config", {}))
        d["active_sides"] = tuple(d["active_sides"])
        return cls(**d)


@dataclass(frozen=True)
class RewardAnnotation:
    """Per-step and episode-level reward products for one episode."""

    step_rewards: np.ndarray
    slips: np.ndarray
    exceedances: np.ndarray
    holding: np.ndarray
    risk: float
    r_step: float
    r_episode: float

    def __post_init__(self):
        object.__setattr__(self, "step_rewards", np.asarray(self.step_rewards, float))
        object.__setattr__(self, "slips", np.asarray(self.slips, bool))
        object.__setattr__(self, "exceedances", np.asarray(self.exceedances, float))
        object.__setattr__(self, "holding", np.asarray(self.holding, bool))

    @property
    def length(self) -> int:
        return int(self.step_rewards.shape[0])

    def to_dict(self) -> dict:
        return {
            "step_rewards": self.step_rewards.tolist(),
            "slips": self.slips.tolist(),
            "exceedances": self.exceedances.tolist(),
            "holding": self.holding.tolist(),
            "risk": float(self.risk),
            "r_step": float(self.r_step),
            "r_episode": float(self.r_episode),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardAnnotation":
        return cls(
            step_rewards=np.asarray(d["step_rewards"], float),
            slips=np.asarray(d["slips"], bool),
            exceedances=np.asarray(d["exceedances"], float),
            holding=np.asarray(d["holding"], bool),
            risk=float(d["risk"]),
            r_step=float(d["r_step"]),
            r_episode=float(d["r_episode"]),
        )


def _quantile(values, q):
    return float(np.quantile(np.asarray(values, float), q, method="linear"))


def calibrate(episodes, cfg: CalibrationConfig = CalibrationConfig()) -> SafetyCalibration:
    """Fit a SafetyCalibration from raw-episode records.

    Records only need .frames with shape (T, 2, H, W) in raw sensor units and
    .gripper_closed with shape (T,). The procedure: the normalization scale is
    the norm_quantile of all raw taxel values; a side is active when the
    active_quantile of its normalized values exceeds active_threshold; the
    force band, peak and concentration caps are quantiles over holding frames;
    the asymmetry tolerance is a quantile of |f_L - f_R| over holding frames
    with both sides active.
    """
    episodes = list(episodes)
    if not episodes:
        raise CalibrationError("cannot calibrate from an empty dataset")

    all_frames = [np.asarray(ep.frames, float) for ep in episodes]
    flat = np.concatenate([f.ravel() for f in all_frames])
    if flat.size == 0:
        raise CalibrationError("dataset contains no tactile frames")
    norm_scale = _quantile(flat, cfg.norm_quantile)
    if not (np.isfinite(norm_scale) and norm_scale > 0):
        raise CalibrationError(
            "no tactile contact anywhere in the dataset: normalization scale "
            f"came out as {norm_scale}")

    active = []
    for idx, side in enumerate(SIDES):
        side_vals = np.concatenate([f[:, idx].ravel() for f in all_frames])
        if _quantile(side_vals / norm_scale, cfg.active_quantile) > cfg.active_threshold:
            active.append(side)
    if not active:
        raise CalibrationError("no active side: both pads stay below the activity threshold")

    forces, peaks, concs, asyms = [], [], [], []
    for ep, frames in zip(episodes, all_frames):
        norm = normalize_frames(frames, norm_scale,
                                episode=getattr(ep, "episode_id", None))
        state = None
        for t, pair in enumerate(norm):
            frame = TactileFrame(pair[0], pair[1], bool(ep.gripper_closed[t]), t)
            stats = {s: contact_stats(frame.grid(s), s, cfg.eps) for s in active}
            state = holding_state(frame, stats, state, cfg)
            if not state.holding:
                continue
            for s in active:
                forces.append(stats[s].mean_force)
                peaks.append(stats[s].peak)
                concs.append(stats[s].concentration)
            if "L" in stats and "R" in stats:
                asyms.append(abs(stats["L"].mean_force - stats["R"].mean_force))

    if not forces:
        raise CalibrationError(
            "no holding frames in the dataset; cannot fit the force band")

    f_min = _quantile(forces, cfg.force_low_quantile)
    f_max = _quantile(forces, cfg.force_high_quantile)
    if not f_min < f_max:
        raise CalibrationError(
            f"holding forces are too uniform to calibrate: f_min == f_max == {f_min}")
    p_max = _quantile(peaks, cfg.peak_quantile)
    c_max = _quantile(concs, cfg.conc_quantile)
    delta = _quantile(asyms, cfg.asym_quantile) if asyms else 0.0

    return SafetyCalibration(
        norm_scale=norm_scale,
        active_sides=tuple(active),
        f_min=f_min,
        f_max=f_max,
        p_max=p_max,
        c_max=c_max,
        delta=delta,
        f_contact=cfg.f_contact,
        n_hold=cfg.n_hold,
        c_op=cfg.c_op,
        d_f=cfg.d_f,
        eps=cfg.eps,
        config=cfg,
    )


def _relu(v: float) -> float:
    return v if v > 0.0 else 0.0


def step_reward(stats: dict, hs, calib: SafetyCalibration,
                w: RewardWeights = RewardWeights()) -> float:
    """Per-step reward: always <= 0.

    Quadratic penalties for over-force, under-force while holding, peak and
    concentration exceedances on each active side, one asymmetry penalty when
    both sides are active, and a flat penalty when slip fired.
    """
    pen = 0.0
    for side in calib.active_sides:
        st = stats[side]
        pen += w.lambda_high * _relu(st.mean_force - calib.f_max) ** 2
        if hs.holding:
            pen += w.lambda_low * _relu(calib.f_min - st.mean_force) ** 2
        pen += w.lambda_peak * _relu(st.peak - calib.p_max) ** 2
        pen += w.lambda_conc * _relu(st.concentration - calib.c_max) ** 2
    if "L" in calib.active_sides and "R" in calib.active_sides:
        gap = abs(stats["L"].mean_force - stats["R"].mean_force)
        pen += w.lambda_asym * _relu(gap - calib.delta) ** 2
    if hs.slip:
        pen += w.lambda_slip
    return -pen


def step_exceedance(stats: dict, calib: SafetyCalibration) -> float:
    """Worst relative threshold exceedance across sides and channels, floored at 0."""
    worst = 0.0
    for side in calib.active_sides:
        st = stats[side]
        for value, threshold in ((st.mean_force, calib.f_max),
                                 (st.peak, calib.p_max),
                                 (st.concentration, calib.c_max)):
            worst = max(worst, _relu((value - threshold) / threshold))
    return worst


def episode_risk(exceedances, holding, slips, length: int) -> float:
    """Bounded risk: 95th percentile of exceedances over holding frames plus
    half the slip rate, clipped to [0, 1]. An empty holding set contributes 0.
    """
    if length <= 0:
        raise ValueError(f"episode length must be positive, got {length}")
    e = np.asarray(exceedances, float)
    mask = np.asarray(holding, bool)
    held = e[mask]
    p95 = _quantile(held, 0.95) if held.size else 0.0
    slip_term = float(np.asarray(slips, bool).sum()) / (2.0 * length)
    return float(np.clip(p95 + slip_term, 0.0, 1.0))


def episode_reward(step_rewards, risk: float, success: bool, drop: bool,
                   damage: bool, w: RewardWeights = RewardWeights()):
    """Return (r_step, r_episode) for one episode.

    r_step is the scaled mean of per-step rewards; the episode reward adds the
    success bonus and subtracts drop, damage and risk terms. Success and
    damage may hold simultaneously.
    """
    r = np.asarray(step_rewards, float)
    if r.size == 0:
        raise ValueError("episode has no step rewards")
    r_step = w.r_step_scale * float(r.mean())
    r_episode = (r_step + w.r_succ * bool(success) - w.r_drop * bool(drop)
                 - w.r_damage * bool(damage) - w.r_risk * float(risk))
    return float(r_step), float(r_episode)


def annotate_episode(ep, calib: SafetyCalibration,
                     w: RewardWeights = RewardWeights()) -> RewardAnnotation:
    """Compute the full reward annotation for one raw episode record."""
    frames = np.asarray(ep.frames, float)
    norm = normalize_frames(frames, calib.norm_scale,
                            episode=getattr(ep, "episode_id", None))
    T = len(norm)
    rewards = np.zeros(T)
    exceed = np.zeros(T)
    slips = np.zeros(T, bool)
    holding = np.zeros(T, bool)
    state = None
    for t, pair in enumerate(norm):
        frame = TactileFrame(pair[0], pair[1], bool(ep.gripper_closed[t]), t)
        stats = {s: contact_stats(frame.grid(s), s, calib.eps)
                 for s in calib.active_sides}
        state = holding_state(frame, stats, state, calib)
        rewards[t] = step_reward(stats, state, calib, w)
        exceed[t] = step_exceedance(stats, calib)
        slips[t] = state.slip
        holding[t] = state.holding
    risk = episode_risk(exceed, holding, slips, T)
    r_step, r_episode = episode_reward(rewards, risk, ep.success, ep.drop,
                                       ep.damage, w)
    return RewardAnnotation(rewards, slips, exceed, holding, risk, r_step, r_episode)


def default_calibration_for(norm_scale: float = 1.0) -> SafetyCalibration:
    """A permissive calibration useful for tests and smoke runs."""
    return SafetyCalibration(
        norm_scale=norm_scale, active_sides=SIDES, f_min=0.05, f_max=0.6,
        p_max=0.9, c_max=0.5, delta=0.1, f_contact=0.02, n_hold=3,
        c_op=0.15, d_f=0.10, eps=CalibrationConfig().eps)
