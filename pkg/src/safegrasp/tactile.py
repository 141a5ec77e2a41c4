"""Tactile pressure grids: normalization, contact statistics, holding and slip.

A frame is a pair of HxW pressure grids, one per gripper pad, unitless in
[0, 1] after normalization by a dataset-level scale. Contact statistics
summarize one grid: mean force, peak pressure, peak concentration, and the
center of pressure on the unit square with row 0 / column 0 anchored at
(0, 0). Holding requires a closed gripper plus persistent contact on every
active side; slip can only fire while holding, on a center-of-pressure jump
or a sudden mean-force drop between consecutive frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import EPS
from .errors import FrameError

SIDES = ("L", "R")


@dataclass(frozen=True)
class ContactStats:
    """Per-side summary of a single normalized pressure grid."""

    side: str
    mean_force: float
    peak: float
    concentration: float
    cop: tuple[float, float]


@dataclass(frozen=True)
class TactileFrame:
    """One timestep of normalized tactile data for both pads."""

    left: np.ndarray
    right: np.ndarray
    gripper_closed: bool
    timestep: int

    def __post_init__(self):
        left = np.asarray(self.left, dtype=float)
        right = np.asarray(self.right, dtype=float)
        if left.ndim != 2 or left.shape != right.shape:
            raise FrameError(
                f"pad grids must be 2-D and share a shape, got {left.shape} "
                f"and {right.shape} at timestep {self.timestep}")
        if self.timestep < 0:
            raise FrameError(f"negative timestep {self.timestep}")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def grid(self, side: str) -> np.ndarray:
        if side == "L":
            return self.left
        if side == "R":
            return self.right
        raise KeyError(side)


@dataclass(frozen=True)
class HoldingSlipState:
    """Streaming holding/slip state owned by the caller, one per episode.

    contact_streak counts consecutive qualifying frames; prev_stats keeps the
    per-side statistics of the frame that produced this state so the next
    frame can form displacement deltas.
    """

    holding: bool = False
    slip: bool = False
    delta_cop: float = 0.0
    delta_f: float = 0.0
    contact_streak: int = 0
    prev_stats: dict = field(default_factory=dict)


def normalize_frames(raw_grids, scale, *, episode=None):
    """Divide raw grids by scale and clip into [0, 1].

    Accepts any sequence of arrays; the leading index is reported as the
    timestep when a non-finite entry is found.
    """
    if not scale > 0:
        raise ValueError(f"normalization scale must be positive, got {scale}")
    out = []
    where = f"episode {episode}, " if episode is not None else ""
    for t, grid in enumerate(raw_grids):
        arr = np.asarray(grid, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise FrameError(f"non-finite tactile value at {where}timestep {t}")
        out.append(np.clip(arr / scale, 0.0, 1.0))
    return out


def contact_stats(grid, side: str = "L", eps: float = EPS) -> ContactStats:
    """Summarize one normalized grid.

    concentration is peak / (H * W * mean + eps), about 1.0 when a single
    taxel carries all pressure and near 1/(H*W) for a uniform field. The
    center of pressure is the intensity-weighted mean of taxel coordinates
    mapped onto [0, 1] per axis.
    """
    g = np.asarray(grid, dtype=float)
    h, w = g.shape
    total = float(g.sum())
    mean_force = total / (h * w)
    peak = float(g.max())
    concentration = peak / (h * w * mean_force + eps)
    xs = np.arange(w, dtype=float) / (w - 1) if w > 1 else np.zeros(w)
    ys = np.arange(h, dtype=float) / (h - 1) if h > 1 else np.zeros(h)
    cop_x = float((g * xs[None, :]).sum() / (total + eps))
    cop_y = float((g * ys[:, None]).sum() / (total + eps))
    return ContactStats(side, mean_force, peak, concentration, (cop_x, cop_y))


def holding_state(frame: TactileFrame, stats: dict, prev, calib) -> HoldingSlipState:
    """Advance the holding/slip state by one frame.

    stats maps each active side to its ContactStats for this frame; prev is
    the state returned for the previous frame or None at episode start; calib
    is anything exposing f_contact, n_hold, c_op and d_f.
    """
    active = sorted(stats)
    qualifying = (
        bool(frame.gripper_closed)
        and bool(active)
        and all(stats[s].mean_force >= calib.f_contact for s in active)
    )
    streak = (prev.contact_streak + 1 if prev is not None else 1) if qualifying else 0
    holding = streak >= calib.n_hold

    delta_cop = 0.0
    delta_f = 0.0
    if prev is not None and prev.prev_stats:
        cop_jumps = []
        force_drops = []
        for s in active:
            before = prev.prev_stats.get(s)
            if before is None:
                continue
            now = stats[s]
            dx = now.cop[0] - before.cop[0]
            dy = now.cop[1] - before.cop[1]
            cop_jumps.append(float(np.hypot(dx, dy)))
            force_drops.append(now.mean_force - before.mean_force)
        if cop_jumps:
            delta_cop = max(cop_jumps)
            delta_f = min(force_drops)

    slip = holding and (delta_cop > calib.c_op or delta_f < -calib.d_f)
    return HoldingSlipState(holding, slip, delta_cop, delta_f, streak, dict(stats))
