"""Teacher-to-student distillation that removes the touch dependency.

Stage one samples one action chunk from the safety-tuned tactile teacher for
every training tuple, each under its own derived seed, and freezes them to
disk keyed by teacher and dataset identity so the teacher never runs during
student training. Stage two initializes a proprioception-only student by
slicing the teacher's state projection down to its proprio columns and
copying the shared velocity-field trunk; the student then reproduces the
teacher's computation exactly whenever the tactile embedding is zero. Stage
three regresses the student on a convex blend of ground-truth and frozen
teacher chunks. Validation always scores against pure ground truth with
noise draws paired by sample index, so different policies are comparable
number for number.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import DistillConfig, TrainConfig, WeightingConfig
from .errors import ConfigError, DataError
from .policy import FlowPolicy, sample_chunk, student_dims
from .seeding import derive_seed
from .trainer import SampleArrays, Trainer, batch_losses, stack_samples


def policy_hash(policy: FlowPolicy) -> str:
    """Content hash over architecture and parameter blocks in fixed order."""
    h = hashlib.sha256()
    h.update(repr(policy.dims).encode())
    for name in policy.block_names():
        h.update(name.encode())
        h.update(np.ascontiguousarray(policy.params[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class TeacherTargetSet:
    """Frozen teacher action chunks, one per training tuple.

    sample_keys records (episode_id, timestep) in generation order so a later
    training run can prove its sample list lines up with the stored targets.
    """

    targets: np.ndarray
    teacher_hash: str
    dataset_hash: str
    root_seed: int
    sampler_steps: int
    sample_keys: list

    def __post_init__(self):
        self.targets = np.asarray(self.targets, float)
        if self.targets.ndim != 3:
            raise DataError(f"targets must be (n, horizon, action_dim), got "
                            f"shape {self.targets.shape}")
        if len(self.sample_keys) != self.targets.shape[0]:
            raise DataError(
                f"{len(self.sample_keys)} sample keys for "
                f"{self.targets.shape[0]} target chunks")

    @property
    def n(self) -> int:
        return int(self.targets.shape[0])


def generate_teacher_targets(teacher: FlowPolicy, samples,
                             cfg: DistillConfig, dataset_hash: str) -> TeacherTargetSet:
    """Roll the teacher's sampler once per training tuple and freeze the chunks.

    Sample i gets its own seed derived from ("teacher-target", root seed, i),
    so the set is reproducible and independent of batch order.
    """
    samples = list(samples)
    if not samples:
        raise DataError("no samples to generate teacher targets for")
    if not teacher.dims.tactile:
        raise ConfigError("teacher must be a tactile-conditioned policy")
    chunks = np.empty((len(samples), teacher.dims.horizon,
                       teacher.dims.action_dim))
    keys = []
    for i, s in enumerate(samples):
        seed = derive_seed("teacher-target", cfg.root_seed, i)
        chunks[i] = sample_chunk(teacher, s.obs, n_steps=cfg.sampler_steps,
                                 seed=seed)
        keys.append((s.episode_id, int(s.timestep)))
    return TeacherTargetSet(targets=chunks, teacher_hash=policy_hash(teacher),
                            dataset_hash=dataset_hash, root_seed=cfg.root_seed,
                            sampler_steps=cfg.sampler_steps, sample_keys=keys)


def init_student_from_teacher(teacher: FlowPolicy) -> FlowPolicy:
    """Build the touch-free student by slicing the teacher's projection.

    The teacher's state is [proprio; tactile embedding]; keeping only the
    first action_dim projection columns plus the bias, together with a copy
    of the velocity-field trunk, makes the student's output agree with the
    teacher's whenever the embedding term vanishes.
    """
    if not teacher.dims.tactile:
        raise ConfigError("student init needs a tactile teacher to slice from")
    sdims = student_dims(teacher.dims)
    d = teacher.dims.action_dim
    params = {}
    for name in sdims.block_order():
        if name == "proj_w":
            params[name] = np.array(teacher.params["proj_w"][:, :d], copy=True)
        else:
            params[name] = teacher.params[name].copy()
    return FlowPolicy(dims=sdims, params=params, init_seed=teacher.init_seed)


def blend_targets(chunks: np.ndarray, teacher_chunks: np.ndarray,
                  alpha: float) -> np.ndarray:
    """Convex combination (1 - alpha) * ground truth + alpha * teacher."""
    chunks = np.asarray(chunks, float)
    teacher_chunks = np.asarray(teacher_chunks, float)
    if chunks.shape != teacher_chunks.shape:
        raise DataError(f"chunk shapes differ: {chunks.shape} vs "
                        f"{teacher_chunks.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"blend alpha {alpha} is outside [0, 1]")
    return (1.0 - alpha) * chunks + alpha * teacher_chunks


def check_targets(target_set: TeacherTargetSet, samples, dataset_hash: str):
    """Refuse to train against targets from another dataset or sample order."""
    if target_set.dataset_hash != dataset_hash:
        raise DataError(
            f"teacher targets were generated for dataset "
            f"{target_set.dataset_hash[:12]}, not {dataset_hash[:12]}")
    keys = [(s.episode_id, int(s.timestep)) for s in samples]
    if keys != [(k, int(t)) for k, t in target_set.sample_keys]:
        raise DataError("training samples do not line up with the stored "
                        "teacher targets (different order or selection)")


def distill_train(student: FlowPolicy, samples, target_set: TeacherTargetSet,
                  dataset_hash: str, cfg: DistillConfig,
                  train_cfg: TrainConfig,
                  weight_cfg: WeightingConfig = WeightingConfig()) -> Trainer:
    """Train the student against blended targets; the teacher is never called.

    Reward weighting is off by default so distillation is plain regression;
    set use_reward_weighting to re-apply the safety weights on top.
    """
    samples = list(samples)
    if student.dims.tactile:
        raise ConfigError("distillation student must be proprioception-only")
    check_targets(target_set, samples, dataset_hash)
    blended = blend_targets(np.stack([s.chunk for s in samples]),
                            target_set.targets, cfg.blend_alpha)
    return Trainer(student, samples, train_cfg, weight_cfg,
                   weighted=cfg.use_reward_weighting, targets=blended)


def validation_fm_loss(policy: FlowPolicy, samples, seed: int) -> float:
    """Mean masked flow-matching loss on ground-truth chunks.

    The interpolation time and base noise for sample i come from a stream
    seeded only by (seed, i), never by the policy, so two policies evaluated
    with the same seed see identical draws and their losses are directly
    comparable.
    """
    arrays = samples if isinstance(samples, SampleArrays) else \
        stack_samples(list(samples), policy.dims)
    n = arrays.n
    t = np.empty(n)
    x0 = np.empty((n, policy.dims.horizon, policy.dims.action_dim))
    for i in range(n):
        rng = np.random.default_rng(derive_seed("validation-draw", seed, i))
        t[i] = min(max(rng.random(), 1e-7), 1.0 - 1e-7)
        x0[i] = rng.standard_normal(x0.shape[1:])
    losses, _, _, _ = batch_losses(policy, arrays, t, x0)
    return float(losses.mean())
