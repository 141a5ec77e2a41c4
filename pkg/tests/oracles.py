"""Straight-line reference implementations used to cross-check the package.

Everything here is written with explicit Python loops and scalar math, no
vectorized shortcuts, so a disagreement with the library points at a real
bug rather than a shared mistake. Tolerances are asserted by the tests that
call these, not here.
"""

from __future__ import annotations

import math

import numpy as np


# -- robust statistics --------------------------------------------------------


def quantile_linear(values, q: float) -> float:
    """Linear-interpolation quantile on sorted order statistics."""
    s = sorted(float(v) for v in values)
    n = len(s)
    if n == 0:
        raise ValueError("quantile of an empty sequence")
    if n == 1:
        return s[0]
    pos = (n - 1) * q
    lo = int(math.floor(pos))
    if lo >= n - 1:
        return s[-1]
    frac = pos - lo
    return s[lo] + frac * (s[lo + 1] - s[lo])


def median_loops(values) -> float:
    s = sorted(float(v) for v in values)
    n = len(s)
    mid = n // 2
    if n % 2 == 1:
        return s[mid]
    return 0.5 * (s[mid - 1] + s[mid])


def mad_z_scores(values, mad_constant=1.4826, floor=1e-8):
    """z-scores for one group: median/MAD scale, std fallback, floor fallback."""
    vals = [float(v) for v in values]
    med = median_loops(vals)
    mad = median_loops([abs(v - med) for v in vals])
    scale = mad_constant * mad
    if scale < floor:
        mean = sum(vals) / len(vals)
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        scale = std if std >= floor else floor
    return [(v - med) / scale for v in vals]


# -- tactile statistics -------------------------------------------------------


def contact_stats_loops(grid, eps=1e-8):
    """(mean, peak, concentration, cop_x, cop_y) via per-taxel loops."""
    g = np.asarray(grid, float)
    h, w = g.shape
    total = 0.0
    peak = -math.inf
    wx = 0.0
    wy = 0.0
    for i in range(h):
        for j in range(w):
            v = float(g[i, j])
            total += v
            if v > peak:
                peak = v
            x = j / (w - 1) if w > 1 else 0.0
            y = i / (h - 1) if h > 1 else 0.0
            wx += v * x
            wy += v * y
    mean = total / (h * w)
    conc = peak / (h * w * mean + eps)
    return mean, peak, conc, wx / (total + eps), wy / (total + eps)


def annotate_loops(frames, gripper_closed, success, drop, damage, calib, w):
    """Full per-episode annotation computed frame by frame with scalars.

    frames: (T, 2, H, W) raw grids. Returns a dict mirroring the fields of
    the library's annotation object.
    """
    T = len(frames)
    side_index = {"L": 0, "R": 1}
    active = list(calib.active_sides)

    rewards = []
    exceed = []
    slips = []
    holding = []
    streak = 0
    prev_stats: dict = {}

    for t in range(T):
        stats = {}
        for s in active:
            raw = np.asarray(frames[t][side_index[s]], float)
            norm = np.clip(raw / calib.norm_scale, 0.0, 1.0)
            stats[s] = contact_stats_loops(norm, calib.eps)

        qualifying = bool(gripper_closed[t]) and all(
            stats[s][0] >= calib.f_contact for s in active)
        streak = streak + 1 if qualifying else 0
        held = streak >= calib.n_hold

        delta_cop = 0.0
        delta_f = 0.0
        if prev_stats:
            jumps = []
            dfs = []
            for s in active:
                before = prev_stats[s]
                now = stats[s]
                jumps.append(math.hypot(now[3] - before[3], now[4] - before[4]))
                dfs.append(now[0] - before[0])
            delta_cop = max(jumps)
            delta_f = min(dfs)
        slip = held and (delta_cop > calib.c_op or delta_f < -calib.d_f)

        pen = 0.0
        for s in active:
            f, p, c, _, _ = stats[s]
            pen += w.lambda_high * max(0.0, f - calib.f_max) ** 2
            if held:
                pen += w.lambda_low * max(0.0, calib.f_min - f) ** 2
            pen += w.lambda_peak * max(0.0, p - calib.p_max) ** 2
            pen += w.lambda_conc * max(0.0, c - calib.c_max) ** 2
        if "L" in active and "R" in active:
            gap = abs(stats["L"][0] - stats["R"][0])
            pen += w.lambda_asym * max(0.0, gap - calib.delta) ** 2
        if slip:
            pen += w.lambda_slip

        worst = 0.0
        for s in active:
            f, p, c, _, _ = stats[s]
            for value, threshold in ((f, calib.f_max), (p, calib.p_max),
                                     (c, calib.c_max)):
                rel = (value - threshold) / threshold
                if rel > worst:
                    worst = rel

        rewards.append(-pen)
        exceed.append(worst)
        slips.append(slip)
        holding.append(held)
        prev_stats = stats

    held_exceed = [e for e, h in zip(exceed, holding) if h]
    p95 = quantile_linear(held_exceed, 0.95) if held_exceed else 0.0
    risk = min(1.0, max(0.0, p95 + sum(slips) / (2.0 * T)))

    r_step = w.r_step_scale * (sum(rewards) / T)
    r_episode = (r_step + w.r_succ * bool(success) - w.r_drop * bool(drop)
                 - w.r_damage * bool(damage) - w.r_risk * risk)
    return {
        "step_rewards": rewards,
        "exceedances": exceed,
        "slips": slips,
        "holding": holding,
        "risk": risk,
        "r_step": r_step,
        "r_episode": r_episode,
    }


# -- weighting primitives -----------------------------------------------------


def masked_loss_loops(ell, mask, eps=1e-8):
    ell = np.asarray(ell, float)
    mask = [bool(m) for m in mask]
    H = ell.shape[0]
    total = 0.0
    for h in range(H):
        for j, on in enumerate(mask):
            if on:
                total += float(ell[h, j])
    return total / (H * sum(mask) + eps)


def chunk_return_loops(rewards, gamma: float) -> float:
    total = 0.0
    g = 1.0
    for r in rewards:
        total += g * float(r)
        g *= gamma
    return total


def weights_loops(advantages, alpha, w_min, w_max):
    clipped = [min(max(math.exp(alpha * a), w_min), w_max) for a in advantages]
    mean = sum(clipped) / len(clipped)
    return [c / mean for c in clipped]


def anchor_loops(params: dict, params0: dict) -> float:
    terms = []
    for name in sorted(params):
        d = np.asarray(params[name], float) - np.asarray(params0[name], float)
        total = 0.0
        for v in d.ravel():
            total += float(v) * float(v)
        terms.append(total)
    return sum(terms) / len(terms)


# -- policy network -----------------------------------------------------------


def _matvec(W, x):
    out = []
    for row in W:
        acc = 0.0
        for wij, xj in zip(row, x):
            acc += float(wij) * float(xj)
        out.append(acc)
    return out


def forward_loops(params, dims, x_flat, t, cond, proprio, tact=None):
    """Velocity field for one input, computed with explicit matvec loops."""
    if dims.tactile:
        z1 = _matvec(params["enc_w1"], tact)
        e1 = [math.tanh(z + b) for z, b in zip(z1, params["enc_b1"])]
        emb = _matvec(params["enc_w2"], e1)
        emb = [z + b for z, b in zip(emb, params["enc_b2"])]
        state = list(proprio) + emb
    else:
        state = list(proprio)
    latent = _matvec(params["proj_w"], state)
    latent = [z + b for z, b in zip(latent, params["proj_b"])]
    vin = list(x_flat) + [float(t)] + list(cond) + latent
    h1 = [math.tanh(z + b)
          for z, b in zip(_matvec(params["vf_w1"], vin), params["vf_b1"])]
    h2 = [math.tanh(z + b)
          for z, b in zip(_matvec(params["vf_w2"], h1), params["vf_b2"])]
    v = [z + b for z, b in zip(_matvec(params["vf_w3"], h2), params["vf_b3"])]
    return v


def fm_loss_loops(params, dims, target, x0, t, cond, proprio, tact=None):
    """Per-element squared velocity error at one interpolation point."""
    target = np.asarray(target, float).ravel()
    x0 = np.asarray(x0, float).ravel()
    x_t = [(1.0 - t) * a + t * b for a, b in zip(x0, target)]
    v = forward_loops(params, dims, x_t, t, cond, proprio, tact)
    ell = [(vi - (ai - x0i)) ** 2
           for vi, ai, x0i in zip(v, target, x0)]
    return np.asarray(ell).reshape(dims.horizon, dims.action_dim)


# -- finite differences -------------------------------------------------------


def central_difference_grad(f, params: dict, picks, h=1e-5):
    """Central finite differences of scalar f(params) at chosen coordinates.

    picks is a list of (block_name, flat_index); params are mutated in place
    and restored. Returns the list of derivative estimates.
    """
    grads = []
    for name, idx in picks:
        flat = params[name].ravel()
        orig = float(flat[idx])
        flat[idx] = orig + h
        up = f()
        flat[idx] = orig - h
        down = f()
        flat[idx] = orig
        grads.append((up - down) / (2.0 * h))
    return grads
