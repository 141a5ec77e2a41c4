"""Reward-weighted flow-matching training.

One step draws per-sample interpolation times and base noise, computes masked
flow-matching losses, turns discounted chunk returns and episode rewards into
robust per-group z-scores, mixes them into a clipped advantage, exponentiates
into clipped batch-renormalized weights, and descends the weighted objective
plus a quadratic anchor to the pretraining parameters. A warm-up ramps the
weighting temperature linearly from zero so early fine-tuning stays close to
plain behavior cloning. The same machinery with unit weights and no anchor is
plain flow-matching training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import EPS, TrainConfig, WeightingConfig
from .errors import ConfigError, DataError, NumericError
from .policy import FlowPolicy, Observation, backward_batch, forward_batch, tactile_input


@dataclass
class TrainSample:
    """One training tuple: observation, ground-truth chunk, per-DoF mask,
    chunk-aligned step rewards (zero-padded past episode end), episode reward,
    group label and source timestep."""

    obs: Observation
    chunk: np.ndarray
    dof_mask: np.ndarray
    step_rewards: np.ndarray
    episode_reward: float
    group: str
    timestep: int
    episode_id: str = ""

    def __post_init__(self):
        self.chunk = np.asarray(self.chunk, float)
        self.dof_mask = np.asarray(self.dof_mask, bool)
        self.step_rewards = np.asarray(self.step_rewards, float)
        if self.dof_mask.ndim != 1 or self.dof_mask.shape[0] != self.chunk.shape[1]:
            raise DataError(
                f"dof_mask shape {self.dof_mask.shape} does not match chunk "
                f"{self.chunk.shape}")
        if not self.dof_mask.any():
            raise DataError("dof_mask excludes every DoF")
        if self.step_rewards.shape[0] != self.chunk.shape[0]:
            raise DataError("step_rewards must align with the chunk horizon")


@dataclass
class BatchDiagnostics:
    """Everything one training step computed, for logging and tests."""

    sample_loss: np.ndarray
    chunk_returns: np.ndarray
    z_episode: np.ndarray
    z_chunk: np.ndarray
    advantages: np.ndarray
    weights_raw: np.ndarray
    weights_clipped: np.ndarray
    weights: np.ndarray
    loss_rwfm: float
    loss_anchor: float
    loss_total: float
    alpha_eff: float
    step: int = 0

    def to_log_dict(self) -> dict:
        w = self.weights
        return {
            "step": int(self.step),
            "loss_rwfm": float(self.loss_rwfm),
            "loss_anchor": float(self.loss_anchor),
            "loss_total": float(self.loss_total),
            "alpha_eff": float(self.alpha_eff),
            "weight_mean": float(w.mean()),
            "weight_min": float(w.min()),
            "weight_max": float(w.max()),
        }


def masked_sample_loss(ell, mask, eps: float = EPS) -> float:
    """Average the per-element losses over unmasked DoFs and the horizon.

    mask is per-DoF and broadcasts over the horizon; disabling every DoF is an
    error rather than a zero loss.
    """
    ell = np.asarray(ell, float)
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise DataError("mask excludes every DoF")
    horizon = ell.shape[0]
    return float((ell * mask[None, :]).sum() / (horizon * mask.sum() + eps))


def chunk_return(rewards, gamma: float) -> float:
    """Discounted sum of the chunk-aligned step rewards."""
    r = np.asarray(rewards, float)
    return float((gamma ** np.arange(r.shape[0]) * r).sum())


def robust_normalize(values, groups, cfg: WeightingConfig = WeightingConfig()) -> np.ndarray:
    """Median/MAD z-scores computed independently per group.

    The scale is mad_constant * MAD; when that degenerates the group standard
    deviation substitutes, and a constant group yields z = 0 through the
    scale floor.
    """
    x = np.asarray(values, float)
    groups = np.asarray(groups)
    z = np.empty_like(x)
    for g in np.unique(groups):
        idx = groups == g
        vals = x[idx]
        med = float(np.median(vals))
        mad = float(np.median(np.abs(vals - med)))
        scale = cfg.mad_constant * mad
        if scale < cfg.scale_floor:
            std = float(vals.std())
            scale = std if std >= cfg.scale_floor else cfg.scale_floor
        z[idx] = (vals - med) / scale
    return z


def advantage(z_episode, z_chunk, cfg: WeightingConfig = WeightingConfig()) -> np.ndarray:
    """Blend episode and chunk z-scores and clip into [-c, c]."""
    a = cfg.beta * np.asarray(z_episode, float) + (1.0 - cfg.beta) * np.asarray(z_chunk, float)
    return np.clip(a, -cfg.clip_advantage, cfg.clip_advantage)


def batch_weights(advantages, cfg: WeightingConfig = WeightingConfig(),
                  alpha: float | None = None):
    """Exponentiate advantages, clip, and renormalize to batch mean 1.

    Returns (weights, raw, clipped).
    """
    a = np.asarray(advantages, float)
    if a.size == 0:
        raise DataError("cannot weight an empty batch")
    alpha = cfg.alpha if alpha is None else alpha
    raw = np.exp(alpha * a)
    clipped = np.clip(raw, cfg.w_min, cfg.w_max)
    return clipped / clipped.mean(), raw, clipped


def rwfm_objective(losses, weights) -> float:
    """Weight-averaged loss: sum(w * L) / sum(w)."""
    w = np.asarray(weights, float)
    L = np.asarray(losses, float)
    total = w.sum()
    if not total > 0:
        raise NumericError("weights sum to zero")
    return float((w * L).sum() / total)


def anchor_loss(params: dict, params0: dict) -> float:
    """Mean over parameter blocks of the squared L2 distance to the anchor."""
    if set(params) != set(params0):
        raise DataError("anchor parameter blocks do not match the policy")
    terms = []
    for name in sorted(params):
        a, b = params[name], params0[name]
        if a.shape != b.shape:
            raise DataError(f"anchor block {name} has shape {b.shape}, "
                            f"policy has {a.shape}")
        d = a - b
        terms.append(float((d * d).sum()))
    return float(np.mean(terms))


def effective_alpha(cfg: WeightingConfig, step_index: int) -> float:
    """Linear warm-up from 0 at step 0 to alpha at warmup_steps, then flat."""
    if cfg.warmup_steps <= 0:
        return cfg.alpha
    return cfg.alpha * min(1.0, step_index / cfg.warmup_steps)


@dataclass
class SampleArrays:
    """Column-stacked training samples for vectorized batches."""

    cond: np.ndarray
    proprio: np.ndarray
    tact: np.ndarray | None
    chunks: np.ndarray
    masks: np.ndarray
    rewards: np.ndarray
    episode_rewards: np.ndarray
    groups: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.chunks.shape[0]


def stack_samples(samples, dims) -> SampleArrays:
    """Validate and stack TrainSamples against the policy dims."""
    samples = list(samples)
    if not samples:
        raise DataError("no training samples")
    H, D = dims.horizon, dims.action_dim
    cond = np.stack([np.asarray(s.obs.cond, float) for s in samples])
    proprio = np.stack([np.asarray(s.obs.proprio, float) for s in samples])
    chunks = np.stack([s.chunk for s in samples])
    if chunks.shape[1:] != (H, D):
        raise DataError(f"chunk shape {chunks.shape[1:]} != {(H, D)}")
    if cond.shape[1] != dims.cond_dim:
        raise DataError(f"cond size {cond.shape[1]} != {dims.cond_dim}")
    masks = np.stack([s.dof_mask for s in samples])
    rewards = np.stack([s.step_rewards for s in samples])
    episode_rewards = np.array([s.episode_reward for s in samples], float)
    groups = np.array([s.group for s in samples])
    tact = None
    if dims.tactile:
        missing = [i for i, s in enumerate(samples) if s.obs.tactile is None]
        if missing:
            raise DataError(
                f"tactile-conditioned training needs tactile observations; "
                f"samples {missing[:5]} have none")
        tact = np.stack([tactile_input(s.obs.tactile) for s in samples])
    return SampleArrays(cond, proprio, tact, chunks, masks, rewards,
                        episode_rewards, groups)


def _take(arrays: SampleArrays, idx) -> SampleArrays:
    return SampleArrays(
        cond=arrays.cond[idx], proprio=arrays.proprio[idx],
        tact=None if arrays.tact is None else arrays.tact[idx],
        chunks=arrays.chunks[idx], masks=arrays.masks[idx],
        rewards=arrays.rewards[idx], episode_rewards=arrays.episode_rewards[idx],
        groups=arrays.groups[idx])


def batch_losses(policy: FlowPolicy, batch: SampleArrays, t, x0,
                 targets=None, eps: float = EPS):
    """Masked per-sample losses for fixed draws; returns (L, ell, cache, denom)."""
    dims = policy.dims
    H, D = dims.horizon, dims.action_dim
    B = batch.n
    tgt = batch.chunks if targets is None else np.asarray(targets, float)
    tgt_flat = tgt.reshape(B, H * D)
    x0_flat = np.asarray(x0, float).reshape(B, H * D)
    t = np.asarray(t, float)
    x_t = (1.0 - t)[:, None] * x0_flat + t[:, None] * tgt_flat
    tv = tgt_flat - x0_flat
    v, cache = forward_batch(policy, x_t, t, batch.cond, batch.proprio,
                             batch.tact, tv)
    ell = ((v - tv) ** 2).reshape(B, H, D)
    m = batch.masks.astype(float)
    denom = H * m.sum(axis=1) + eps
    L = (ell * m[:, None, :]).sum(axis=(1, 2)) / denom
    return L, ell, cache, denom


def weighted_batch(policy: FlowPolicy, theta0: dict | None, batch: SampleArrays,
                   wcfg: WeightingConfig, alpha_eff: float, rng,
                   *, weighted: bool = True, targets=None, step: int = 0):
    """One full loss/gradient evaluation on a batch.

    Returns (grads, diagnostics). theta0=None skips the anchor term; weighted
    False short-circuits to unit weights (plain flow matching).
    """
    dims = policy.dims
    B = batch.n
    t = np.clip(rng.random(B), 1e-7, 1.0 - 1e-7)
    x0 = rng.standard_normal((B, dims.horizon, dims.action_dim))
    L, _, cache, denom = batch_losses(policy, batch, t, x0, targets, wcfg.eps)

    if weighted:
        gammas = wcfg.gamma ** np.arange(dims.horizon)
        chunk_returns = batch.rewards @ gammas
        z_epi = robust_normalize(batch.episode_rewards, batch.groups, wcfg)
        z_chunk = robust_normalize(chunk_returns, batch.groups, wcfg)
        adv = advantage(z_epi, z_chunk, wcfg)
        w, w_raw, w_clip = batch_weights(adv, wcfg, alpha_eff)
    else:
        chunk_returns = np.zeros(B)
        z_epi = np.zeros(B)
        z_chunk = np.zeros(B)
        adv = np.zeros(B)
        w = np.ones(B)
        w_raw = np.ones(B)
        w_clip = np.ones(B)

    loss_rwfm = rwfm_objective(L, w)
    coeff = ((w / w.sum()) / denom)[:, None, None] * batch.masks[:, None, :]
    upstream = np.broadcast_to(coeff, (B, dims.horizon, dims.action_dim))
    grads = backward_batch(policy, cache, upstream)

    loss_anchor = 0.0
    if theta0 is not None and wcfg.lambda_anchor > 0:
        loss_anchor = anchor_loss(policy.params, theta0)
        n_blocks = len(policy.params)
        coeff = 2.0 * wcfg.lambda_anchor / n_blocks
        for name in grads:
            grads[name] = grads[name] + coeff * (policy.params[name] - theta0[name])
    loss_total = loss_rwfm + wcfg.lambda_anchor * loss_anchor

    diag = BatchDiagnostics(L, chunk_returns, z_epi, z_chunk, adv, w_raw,
                            w_clip, w, loss_rwfm, loss_anchor, loss_total,
                            alpha_eff, step)
    if not np.isfinite(loss_total) or any(
            not np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericError("non-finite loss or gradient in training step",
                           diagnostics=diag)
    return grads, diag


def training_step(policy: FlowPolicy, theta0, samples, cfg: WeightingConfig,
                  rng, *, lr: float = 1e-3, step_index: int = 0):
    """Functional single step: weighted batch gradients plus one SGD update.

    theta0 may be a FlowPolicy or a parameter dict; warm-up uses step_index.
    Returns (policy, diagnostics) with the policy updated in place.
    """
    anchor = theta0.params if isinstance(theta0, FlowPolicy) else theta0
    batch = samples if isinstance(samples, SampleArrays) else stack_samples(samples, policy.dims)
    alpha = effective_alpha(cfg, step_index)
    grads, diag = weighted_batch(policy, anchor, batch, cfg, alpha, rng,
                                 step=step_index)
    for name, g in grads.items():
        policy.params[name] -= lr * g
    policy.bump()
    return policy, diag


class Trainer:
    """Stateful loop around weighted_batch with deterministic batching.

    weighted=True is reward-weighted fine-tuning anchored to theta0 (defaults
    to a copy of the incoming policy); weighted=False is plain flow matching
    with no anchor. targets, when given, replace the ground-truth chunks as
    regression targets (used by distillation) while masks and rewards still
    come from the samples.
    """

    def __init__(self, policy: FlowPolicy, samples, train_cfg: TrainConfig,
                 weight_cfg: WeightingConfig = WeightingConfig(), *,
                 weighted: bool, theta0: FlowPolicy | dict | None = None,
                 targets=None):
        self.policy = policy
        self.arrays = samples if isinstance(samples, SampleArrays) else \
            stack_samples(samples, policy.dims)
        self.train_cfg = train_cfg
        self.weight_cfg = weight_cfg
        self.weighted = weighted
        if weighted:
            src = theta0 if theta0 is not None else policy
            params = src.params if isinstance(src, FlowPolicy) else src
            self.theta0 = {k: np.array(v, float, copy=True) for k, v in params.items()}
            if set(self.theta0) != set(policy.params):
                raise ConfigError("anchor parameters do not match the policy arch")
        else:
            self.theta0 = None
        self.targets = None if targets is None else np.asarray(targets, float)
        if self.targets is not None and self.targets.shape != self.arrays.chunks.shape:
            raise DataError(
                f"target array shape {self.targets.shape} does not match the "
                f"sample chunks {self.arrays.chunks.shape}")
        if self.arrays.n < train_cfg.batch_size and self.arrays.n == 0:
            raise DataError("no samples to train on")
        self.rng = np.random.default_rng(train_cfg.seed)
        self.step_index = 0
        self._queue = np.empty(0, dtype=int)
        self._moments = None
        if train_cfg.optimizer == "adam":
            self._moments = {
                name: (np.zeros_like(p), np.zeros_like(p))
                for name, p in policy.params.items()
            }
            self._adam_t = 0

    def _next_indices(self) -> np.ndarray:
        b = min(self.train_cfg.batch_size, self.arrays.n)
        while self._queue.size < b:
            perm = self.rng.permutation(self.arrays.n)
            self._queue = np.concatenate([self._queue, perm])
        idx, self._queue = self._queue[:b], self._queue[b:]
        return idx

    def _apply(self, grads: dict):
        cfg = self.train_cfg
        if self._moments is None:
            for name, g in grads.items():
                self.policy.params[name] -= cfg.lr * g
        else:
            self._adam_t += 1
            b1, b2 = cfg.adam_beta1, cfg.adam_beta2
            c1 = 1.0 - b1 ** self._adam_t
            c2 = 1.0 - b2 ** self._adam_t
            for name, g in grads.items():
                m, v = self._moments[name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                self.policy.params[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        self.policy.bump()

    def step(self) -> BatchDiagnostics:
        idx = self._next_indices()
        batch = _take(self.arrays, idx)
        targets = None if self.targets is None else self.targets[idx]
        alpha = effective_alpha(self.weight_cfg, self.step_index) if self.weighted else 0.0
        grads, diag = weighted_batch(
            self.policy, self.theta0, batch, self.weight_cfg, alpha, self.rng,
            weighted=self.weighted, targets=targets, step=self.step_index)
        self._apply(grads)
        self.step_index += 1
        return diag

    def run(self, steps: int | None = None, log_path=None) -> BatchDiagnostics:
        """Run a block of steps, appending JSONL diagnostics if log_path is set."""
        steps = self.train_cfg.steps if steps is None else steps
        log_file = open(log_path, "a") if log_path is not None else None
        diag = None
        try:
            for _ in range(steps):
                diag = self.step()
                if log_file and (self.step_index % self.train_cfg.log_every == 0
                                 or self.step_index == steps):
                    log_file.write(json.dumps(diag.to_log_dict(), sort_keys=True) + "\n")
        finally:
            if log_file:
                log_file.close()
        return diag
