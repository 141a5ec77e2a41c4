"""Turning stored, annotated episodes into flow-matching training samples.

Each sample pairs the observation at a source timestep with the action chunk
executed from that timestep. Chunks and their step rewards are zero-padded
past the episode end. The per-DoF mask supervises only the action entries
the bench actually reads, so the trailing inert entries never contribute
loss or gradient. Observations carry the normalized tactile frame so one
sample list serves tactile and proprioception-only policies alike (the
latter simply never read the frame).
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .policy import Observation, PolicyDims
from .rewards import RewardAnnotation, SafetyCalibration
from .sim import ACTION_USED_DOFS
from .tactile import TactileFrame, normalize_frames
from .trainer import TrainSample


def episode_samples(ep, ann: RewardAnnotation, calib: SafetyCalibration,
                    dims: PolicyDims, stride: int = 10) -> list:
    """Slice one annotated episode into chunk samples every `stride` steps."""
    T = ep.frames.shape[0]
    if len(ann.step_rewards) != T:
        raise DataError(
            f"episode {ep.episode_id!r} has {T} frames but its annotation "
            f"covers {len(ann.step_rewards)} steps")
    H, D = dims.horizon, dims.action_dim
    grids = normalize_frames(ep.frames, calib.norm_scale, episode=ep.episode_id)
    rewards = np.asarray(ann.step_rewards, float)
    dof_mask = np.zeros(D, bool)
    dof_mask[:ACTION_USED_DOFS] = True
    samples = []
    for t in range(0, T, stride):
        frame = TactileFrame(left=grids[t][0], right=grids[t][1],
                             gripper_closed=bool(ep.gripper_closed[t]),
                             timestep=t)
        obs = Observation(cond=np.asarray(ep.cond, float),
                          proprio=np.asarray(ep.proprio[t], float),
                          tactile=frame)
        chunk = np.zeros((H, D))
        step_r = np.zeros(H)
        n = min(H, T - t)
        chunk[:n] = ep.actions[t:t + n, :D]
        step_r[:n] = rewards[t:t + n]
        samples.append(TrainSample(
            obs=obs, chunk=chunk, dof_mask=dof_mask.copy(),
            step_rewards=step_r, episode_reward=float(ann.r_episode),
            group=ep.group, timestep=t, episode_id=ep.episode_id))
    return samples


def dataset_samples(store, dims: PolicyDims, stride: int = 10,
                    episode_ids=None) -> list:
    """Samples for every (or a chosen subset of) annotated episode, in id order."""
    calib, _ = store.load_calibration()
    ids = store.episode_ids() if episode_ids is None else list(episode_ids)
    samples = []
    for eid in ids:
        ep = store.load_episode(eid)
        ann = store.load_annotation(eid)
        samples.extend(episode_samples(ep, ann, calib, dims, stride=stride))
    return samples


def split_ids(ids, validation_fraction: float, seed: int):
    """Deterministic train/validation split over sorted episode ids."""
    ids = sorted(ids)
    n_val = max(1, int(round(validation_fraction * len(ids)))) if ids else 0
    if n_val >= len(ids):
        raise DataError(
            f"cannot hold out {n_val} validation episodes from {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    train = [e for e in ids if e not in val]
    return train, sorted(val)
