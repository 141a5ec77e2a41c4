"""Synthetic planar grasp bench with a two-pad tactile model.

One arm moves in the unit square, closes a parallel gripper on a single
object, and carries it toward a goal. While squeezing, each pad renders a
Gaussian pressure blob whose peak equals the grip force in newtons; taxels
report only inside the detection band (readings below taxel_min vanish,
readings above taxel_max clip). Squeezing past the object's fragility
threshold while holding latches damage. A grip whose friction capacity
(friction_per_newton * force) is below the commanded arm speed slides: the
pressure footprint drifts against the motion and the effective squeeze decays
until the object falls. Objects cannot be re-grasped after a release or drop.

Action layout (6 DoF, trailing DoFs inert):
  [0] absolute aperture target in [0, 1]
  [1:3] planar displacement as a fraction of the per-step limit, in [-1, 1]
  [3:6] unused

The aperture tracks its commanded target through a rate-limited first-order
lag, so jitter in the command stream is low-passed before it reaches the
grip force. The arm has stiction: displacement commands below arm_deadband
do not move it. Holds form at f_hold and survive down to f_release, so a
single soft frame does not end a grip.

Everything is a pure function of configuration and seeds: identical seeds
give bitwise-identical episodes, datasets and evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import RewardWeights, overlay
from .errors import ConfigError, DataError
from .policy import FlowPolicy, Observation, sample_chunk
from .rewards import SafetyCalibration, annotate_episode
from .seeding import derive_seed
from .tactile import TactileFrame

TASKS = ("firm", "fragile", "delicate")
TASK_PROFILES = {
    "firm": {"f_damage": 7.4, "stiffness": 13.5},
    "fragile": {"f_damage": 6.8, "stiffness": 12.0},
    "delicate": {"f_damage": 6.2, "stiffness": 11.5},
}
DEMO_KINDS = ("clean", "over_force", "weak_grip")

# leading action entries that drive the plant; the rest are inert
ACTION_USED_DOFS = 3


@dataclass(frozen=True)
class SimConfig:
    """Physical and procedural constants of the bench."""

    task: str = "fragile"
    f_hold: float = 2.0
    f_release: float = 1.0
    f_damage: float = 6.8
    episode_len: int = 80
    grid_h: int = 10
    grid_w: int = 10
    stiffness: float = 12.0
    taxel_min: float = 1.0
    taxel_max: float = 9.0
    v_max: float = 0.05
    arm_deadband: float = 0.0
    aperture_rate: float = 0.06
    aperture_gain: float = 0.2
    aperture_open: float = 0.9
    blob_sigma: float = 1.6
    blob_center_jitter: float = 1.5
    side_gain_jitter: float = 0.03
    noise: float = 0.03
    friction_per_newton: float = 0.015
    slip_cop_shift: float = 1.8
    slip_force_decay: float = 0.88
    grasp_radius: float = 0.14
    goal_tol: float = 0.10
    width_range: tuple = (0.65, 0.72)
    object_region: tuple = ((0.40, 0.60), (0.40, 0.60))
    goal_region: tuple = ((0.74, 0.86), (0.30, 0.50))
    arm_start_region: tuple = ((0.13, 0.17), (0.13, 0.17))
    clean_force: float = 4.0
    weak_force: float = 2.7
    force_jitter: float = 0.04
    transport_speed: float = 0.6
    approach_clearance: float = 0.06
    settle_steps: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if not (self.f_release < self.f_hold < self.f_damage <= self.taxel_max):
            raise ConfigError(
                f"need f_release < f_hold < f_damage <= taxel_max, got "
                f"{self.f_release}, {self.f_hold}, {self.f_damage}, {self.taxel_max}")
        if self.episode_len < 8:
            raise ConfigError("episode_len must allow approach, grasp and hold")
        if self.stiffness <= 0 or self.v_max <= 0 or self.aperture_rate <= 0:
            raise ConfigError("stiffness, v_max and aperture_rate must be positive")
        if not 0.0 < self.aperture_gain <= 1.0:
            raise ConfigError(f"aperture_gain must be in (0, 1], got {self.aperture_gain}")
        if self.stiffness * self.width_range[0] <= self.f_damage:
            raise ConfigError("full squeeze must be able to exceed f_damage on every object")
        if self.aperture_open <= self.width_range[1]:
            raise ConfigError("aperture_open must clear the widest object")

    @classmethod
    def for_task(cls, task: str, **updates) -> "SimConfig":
        if task not in TASK_PROFILES:
            raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
        merged = dict(TASK_PROFILES[task])
        merged.update(updates)
        return overlay(cls(task=task), merged)


COND_DIM = len(TASKS) + 5  # one-hot + width + object xy + goal xy


@dataclass(frozen=True)
class Scenario:
    """Per-episode draw: object, placement, contact geometry and noise stream."""

    width: float
    obj: np.ndarray
    goal: np.ndarray
    arm0: np.ndarray
    blob_centers: np.ndarray
    side_gains: np.ndarray
    noise_seed: int
    task_id: int


def draw_scenario(cfg: SimConfig, rng) -> Scenario:
    def _pt(region):
        return np.array([rng.uniform(*region[0]), rng.uniform(*region[1])])

    width = float(rng.uniform(*cfg.width_range))
    obj = _pt(cfg.object_region)
    goal = _pt(cfg.goal_region)
    arm0 = _pt(cfg.arm_start_region)
    center = np.array([(cfg.grid_h - 1) / 2.0, (cfg.grid_w - 1) / 2.0])
    jit = cfg.blob_center_jitter
    blob_centers = center[None, :] + rng.uniform(-jit, jit, size=(2, 2))
    side_gains = 1.0 + rng.uniform(-cfg.side_gain_jitter, cfg.side_gain_jitter, size=2)
    noise_seed = int(rng.integers(0, 2 ** 62))
    return Scenario(width, obj, goal, arm0, blob_centers, side_gains,
                    noise_seed, TASKS.index(cfg.task))


def cond_vector(scn: Scenario) -> np.ndarray:
    onehot = np.zeros(len(TASKS))
    onehot[scn.task_id] = 1.0
    return np.concatenate([onehot, [scn.width], scn.obj, scn.goal])


@dataclass(frozen=True)
class SimState:
    """Instantaneous bench state; advanced functionally by step()."""

    scenario: Scenario
    t: int = 0
    arm: np.ndarray = None
    aperture: float = 0.0
    obj: np.ndarray = None
    held: bool = False
    grasp_enabled: bool = True
    depth_loss: float = 0.0
    cop_offset: np.ndarray = None


def initial_state(scenario: Scenario, cfg: SimConfig) -> SimState:
    return SimState(scenario=scenario, t=0, arm=scenario.arm0.copy(),
                    aperture=cfg.aperture_open, obj=scenario.obj.copy(),
                    held=False, grasp_enabled=True, depth_loss=0.0,
                    cop_offset=np.zeros((2, 2)))


def render_frame(force: float, scn: Scenario, cop_offset, t: int,
                 cfg: SimConfig) -> np.ndarray:
    """Render both pads for a given true grip force, (2, H, W) in newtons."""
    out = np.zeros((2, cfg.grid_h, cfg.grid_w))
    if force <= 0.0:
        return out
    ii, jj = np.meshgrid(np.arange(cfg.grid_h, dtype=float),
                         np.arange(cfg.grid_w, dtype=float), indexing="ij")
    rng = np.random.default_rng(np.random.SeedSequence((scn.noise_seed, t)))
    for s in range(2):
        ci, cj = scn.blob_centers[s] + cop_offset[s]
        amp = force * scn.side_gains[s]
        blob = amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2)
                            / (2.0 * cfg.blob_sigma ** 2))
        if cfg.noise > 0:
            blob = blob + rng.normal(0.0, cfg.noise, size=blob.shape)
        out[s] = np.where(blob >= cfg.taxel_min,
                          np.minimum(blob, cfg.taxel_max), 0.0)
    return out


def step(state: SimState, action, cfg: SimConfig):
    """Advance one control step; returns (next_state, raw_frame).

    The returned frame is what the sensors report for the new state.
    """
    a = np.asarray(action, float)
    if a.shape[0] < 3 or not np.all(np.isfinite(a)):
        raise DataError(f"action must be finite with >= 3 entries, got {a}")
    scn = state.scenario
    ap_cmd = float(np.clip(a[0], 0.0, 1.0))
    move_cmd = np.clip(a[1:3], -1.0, 1.0)
    speed = float(np.linalg.norm(move_cmd))
    if speed < cfg.arm_deadband:
        move_cmd = np.zeros(2)  # stiction: tiny commands do not move the arm
    elif speed > 1.0:
        move_cmd = move_cmd / speed  # the speed limit is radial
    move = move_cmd * cfg.v_max

    aperture = state.aperture + float(
        np.clip(cfg.aperture_gain * (ap_cmd - state.aperture),
                -cfg.aperture_rate, cfg.aperture_rate))
    arm = np.clip(state.arm + move, 0.0, 1.0)
    obj = arm.copy() if state.held else state.obj

    depth_loss = state.depth_loss
    cop_offset = state.cop_offset
    in_reach = float(np.linalg.norm(arm - obj)) <= cfg.grasp_radius
    contact = state.grasp_enabled and in_reach and aperture < scn.width
    depth = max(0.0, scn.width - aperture - depth_loss) if contact else 0.0
    force = cfg.stiffness * depth

    if state.held and force > 0.0:
        speed = float(np.linalg.norm(move))
        if speed > cfg.friction_per_newton * force:
            # The object lags the hand: the footprint drifts against the
            # motion and part of the squeeze is lost for good.
            drift = -move / speed * cfg.slip_cop_shift
            cop_offset = cop_offset + drift[None, :]
            depth_loss = depth_loss + (1.0 - cfg.slip_force_decay) * depth
            depth = max(0.0, scn.width - aperture - depth_loss)
            force = cfg.stiffness * depth

    frame = render_frame(force, scn, cop_offset, state.t + 1, cfg)
    # hysteresis: forming a hold takes f_hold, keeping one only f_release
    need = cfg.f_release if state.held else cfg.f_hold
    held = contact and bool((frame.reshape(2, -1).max(axis=1) >= need).all())
    grasp_enabled = state.grasp_enabled and not (state.held and not held)
    next_state = replace(state, t=state.t + 1, arm=arm, aperture=aperture,
                         obj=obj, held=held, grasp_enabled=grasp_enabled,
                         depth_loss=depth_loss, cop_offset=cop_offset)
    return next_state, frame


def outcomes_from_trajectory(frames, proprio, obj0, goal, cfg: SimConfig):
    """Recompute (success, drop, damage) from stored arrays alone.

    A hold forms when both pads peak at or above f_hold and persists until
    either pad falls below f_release. The object rides at the arm position
    while held and settles where the grip ends; losing the grip away from
    the goal is a drop. Success requires no drop and a final object position
    within goal_tol of the goal. Damage latches when any taxel reaches
    f_damage during holding.
    """
    frames = np.asarray(frames, float)
    T = frames.shape[0]
    peaks = frames.reshape(T, 2, -1).max(axis=2)
    weakest = peaks.min(axis=1)
    held = np.zeros(T, bool)
    for t in range(T):
        need = cfg.f_release if (t > 0 and held[t - 1]) else cfg.f_hold
        held[t] = weakest[t] >= need
    damage = bool(np.any(held & (peaks.max(axis=1) >= cfg.f_damage)))
    arm = np.asarray(proprio, float)[:, 1:3]
    goal = np.asarray(goal, float)

    final_obj = np.asarray(obj0, float)
    drop = False
    for t in range(T):
        if held[t]:
            final_obj = arm[t]
        elif t > 0 and held[t - 1]:
            final_obj = arm[t]
            if float(np.linalg.norm(arm[t] - goal)) > cfg.goal_tol:
                drop = True
            break
    success = (not drop) and float(np.linalg.norm(final_obj - goal)) <= cfg.goal_tol
    return success, drop, damage


@dataclass
class EpisodeRecord:
    """One stored episode: raw sensor frames, kinematics, actions, outcome."""

    episode_id: str
    task: str
    kind: str
    group: str
    frames: np.ndarray
    gripper_closed: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    cond: np.ndarray
    success: bool
    drop: bool
    damage: bool
    seed: int
    provenance: str = "scripted"

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def goal(self) -> np.ndarray:
        return self.cond[len(TASKS) + 3:len(TASKS) + 5]

    @property
    def obj0(self) -> np.ndarray:
        return self.cond[len(TASKS) + 1:len(TASKS) + 3]


def _proprio_of(state: SimState, dim: int = 6) -> np.ndarray:
    q = np.zeros(dim)
    q[0] = state.aperture
    q[1:3] = state.arm
    q[3] = 1.0 if state.held else 0.0  # wrist load cell: carrying something
    return q


def rollout(act_fn, scenario: Scenario, cfg: SimConfig):
    """Run one episode; act_fn(t, proprio, frame) -> action.

    Returns (frames, gripper_closed, proprio, actions, flags).
    """
    T = cfg.episode_len
    frames = np.zeros((T, 2, cfg.grid_h, cfg.grid_w))
    proprio = np.zeros((T, 6))
    actions = np.zeros((T, 6))
    closed = np.zeros(T, bool)
    state = initial_state(scenario, cfg)
    frames[0] = render_frame(0.0, scenario, state.cop_offset, 0, cfg)
    for t in range(T):
        proprio[t] = _proprio_of(state)
        closed[t] = state.aperture < scenario.width
        a = np.asarray(act_fn(t, proprio[t], frames[t]), float)
        actions[t] = a[:6] if a.shape[0] >= 6 else np.pad(a, (0, 6 - a.shape[0]))
        if t + 1 < T:
            state, frames[t + 1] = step(state, actions[t], cfg)
    flags = outcomes_from_trajectory(frames, proprio, scenario.obj,
                                     scenario.goal, cfg)
    return frames, closed, proprio, actions, flags


class ScriptedController:
    """Phase-driven demonstrator: approach, close, settle, transport, place.

    The grip force target depends on the demo kind: clean sits safely inside
    the band, over_force exceeds the fragility threshold, weak_grip barely
    holds and slides away during transport. Decisions read only proprioception
    so the controller can be replayed open-loop through a kinematic model.
    """

    def __init__(self, kind: str, scenario: Scenario, cfg: SimConfig, rng):
        if kind not in DEMO_KINDS:
            raise ConfigError(f"unknown demo kind {kind!r}")
        jitter = float(rng.uniform(-cfg.force_jitter, cfg.force_jitter))
        if kind == "over_force":
            # squeeze as hard as the hardware allows; damage is the point
            self.target_aperture = 0.0
        else:
            base = cfg.clean_force if kind == "clean" else cfg.weak_force
            self.target_aperture = max(
                0.0, scenario.width - base * (1.0 + jitter) / cfg.stiffness)
        # a weak grip paired with a rushed transport is the failure signature
        self.speed = 1.0 if kind == "weak_grip" else cfg.transport_speed
        self.kind = kind
        self.scenario = scenario
        self.cfg = cfg
        self.rng = rng
        self.phase = "approach"
        self.settle_left = cfg.settle_steps

    def _move_toward(self, frm, to):
        d = np.asarray(to) - frm
        dist = float(np.linalg.norm(d))
        if dist <= 1e-12:
            return np.zeros(2)
        step_len = min(dist, self.cfg.v_max)
        return d / dist * (step_len / self.cfg.v_max)

    def act(self, t, q, frame) -> np.ndarray:
        a = self._nominal(q)
        if self.kind == "clean" and self.phase in ("settle", "transport"):
            # jostle the careful demos so the data shows how to recover:
            # brief loosening pulses and sideways shoves, each followed by
            # the script steering back to its setpoint
            if self.rng.random() < 0.15:
                a[0] = min(1.0, a[0] + self.rng.uniform(0.08, 0.25))
            if self.rng.random() < 0.10:
                a[1:3] = np.clip(a[1:3] + self.rng.normal(0.0, 0.35, size=2),
                                 -1.0, 1.0)
        return a

    def _nominal(self, q) -> np.ndarray:
        cfg, scn = self.cfg, self.scenario
        aperture, arm = q[0], q[1:3]
        # travel with the fingers just clear of the object, not wide open,
        # so the open and hold setpoints stay close in command space
        clear = scn.width + cfg.approach_clearance
        a = np.zeros(6)
        if self.phase == "approach":
            # stop inside the grasp zone; stiction stalls the very last bit
            if float(np.linalg.norm(arm - scn.obj)) > cfg.grasp_radius * 0.5:
                a[0] = clear
                a[1:3] = self._move_toward(arm, scn.obj)
                return a
            self.phase = "close"
        if self.phase == "close":
            # the lag in the gripper never lands exactly on target
            if aperture > self.target_aperture + 0.02:
                a[0] = self.target_aperture
                return a
            self.phase = "settle"
        if self.phase == "settle":
            if self.settle_left > 0:
                self.settle_left -= 1
                a[0] = self.target_aperture
                return a
            self.phase = "transport"
        if self.phase == "transport":
            if float(np.linalg.norm(arm - scn.goal)) > cfg.goal_tol * 0.5:
                a[0] = self.target_aperture
                a[1:3] = self.speed * self._move_toward(arm, scn.goal)
                return a
            self.phase = "place"
        if self.phase == "place":
            a[0] = clear
            if aperture > scn.width + 0.02:
                self.phase = "done"
            return a
        a[0] = clear
        return a


def scripted_demo(kind: str, cfg: SimConfig, seed: int) -> EpisodeRecord:
    """Generate one deterministic scripted demonstration episode."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scenario = draw_scenario(cfg, rng)
    controller = ScriptedController(kind, scenario, cfg, rng)
    frames, closed, proprio, actions, flags = rollout(controller.act, scenario, cfg)
    success, drop, damage = flags
    return EpisodeRecord(
        episode_id=f"{cfg.task}-{kind}-{seed:012d}",
        task=cfg.task, kind=kind, group=cfg.task,
        frames=frames, gripper_closed=closed, proprio=proprio, actions=actions,
        cond=cond_vector(scenario), success=success, drop=drop, damage=damage,
        seed=seed, provenance="scripted")


def quota_counts(ratio, n: int):
    """Largest-remainder apportionment of n episodes across the ratio entries."""
    ratio = np.asarray(ratio, float)
    if ratio.sum() <= 0 or np.any(ratio < 0):
        raise ConfigError(f"ratio must be non-negative with a positive sum: {ratio}")
    exact = ratio / ratio.sum() * n
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for i in range(n - counts.sum()):
        counts[order[i]] += 1
    return tuple(int(c) for c in counts)


def gen_dataset(cfg: SimConfig, counts: dict, seed: int) -> list:
    """Scripted demo episodes with deterministic per-episode seeds."""
    kinds = []
    for kind in DEMO_KINDS:
        kinds.extend([kind] * int(counts.get(kind, 0)))
    if not kinds:
        raise ConfigError("no episodes requested")
    out = []
    for i, kind in enumerate(kinds):
        ep_seed = derive_seed("demo", cfg.task, seed, i)
        ep = scripted_demo(kind, cfg, ep_seed)
        ep.episode_id = f"{cfg.task}-{kind}-{i:05d}"
        out.append(ep)
    return out


class ChunkedScriptedPolicy:
    """Open-loop chunk planner around a ScriptedController.

    Kinematics (aperture rate limiting, arm clipping) are deterministic and
    contact-free, so rolling the controller forward against a kinematic model
    reproduces exactly what closed-loop execution would do.
    """

    def __init__(self, kind: str, cfg: SimConfig, horizon: int = 50):
        self.kind = kind
        self.cfg = cfg
        self.horizon = horizon
        self._controller = None
        self._scenario = None

    def bind(self, scenario: Scenario, rng):
        self._scenario = scenario
        self._controller = ScriptedController(self.kind, scenario, self.cfg, rng)

    def plan(self, obs: Observation, seed: int) -> np.ndarray:
        cfg = self.cfg
        q = np.asarray(obs.proprio, float).copy()
        chunk = np.zeros((self.horizon, 6))
        for h in range(self.horizon):
            a = self._controller.act(h, q, None)
            chunk[h] = a
            ap_cmd = float(np.clip(a[0], 0.0, 1.0))
            q[0] += float(np.clip(cfg.aperture_gain * (ap_cmd - q[0]),
                                  -cfg.aperture_rate, cfg.aperture_rate))
            mv = np.clip(a[1:3], -1.0, 1.0)
            spd = float(np.linalg.norm(mv))
            if spd < cfg.arm_deadband:
                mv = np.zeros(2)
            elif spd > 1.0:
                mv = mv / spd
            q[1:3] = np.clip(q[1:3] + mv * cfg.v_max, 0.0, 1.0)
        return chunk


def _planner_act_fn(policy, cond, cfg: SimConfig, calib, horizon: int,
                    n_steps: int, seed_parts):
    """Closed-loop executor that replans every `horizon` steps."""
    chunk = {"plan": None}

    def act(t, q, frame):
        if t % horizon == 0:
            tactile = None
            if isinstance(policy, FlowPolicy) and policy.dims.tactile:
                scaled = np.clip(frame / calib.norm_scale, 0.0, 1.0)
                tactile = TactileFrame(scaled[0], scaled[1],
                                       bool(q[0] < cond[len(TASKS)]), t)
            obs = Observation(cond=cond, proprio=q, tactile=tactile)
            plan_seed = derive_seed(*seed_parts, t // horizon)
            if isinstance(policy, FlowPolicy):
                chunk["plan"] = sample_chunk(policy, obs, n_steps, plan_seed)
            else:
                chunk["plan"] = policy.plan(obs, plan_seed)
        return chunk["plan"][t % horizon]

    return act


def evaluate_policy(policy, cfg: SimConfig, n_episodes: int, seed: int, *,
                    calib: SafetyCalibration | None = None,
                    reward_weights: RewardWeights | None = None,
                    horizon: int = 50, n_steps: int = 10,
                    collect_records: bool = False):
    """Closed-loop evaluation over seeded episodes.

    Returns a metrics dict; success never counts episodes that damaged the
    object. mean_episode_reward needs a calibration and is None without one.
    """
    if isinstance(policy, FlowPolicy):
        if policy.dims.cond_dim != COND_DIM:
            raise DataError(
                f"policy expects cond size {policy.dims.cond_dim}, bench "
                f"provides {COND_DIM}")
        if policy.dims.tactile and calib is None:
            raise ConfigError(
                "tactile-conditioned policy needs a calibration to normalize "
                "frames during evaluation")
        # replanning cadence can be shorter than the chunk, never longer
        horizon = min(horizon, policy.dims.horizon)
    records = []
    n_success = n_damage = n_drop = 0
    peak_sum = 0.0
    rewards = []
    for e in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, e)))
        scenario = draw_scenario(cfg, rng)
        if isinstance(policy, ChunkedScriptedPolicy):
            policy.bind(scenario, rng)
        act = _planner_act_fn(policy, cond_vector(scenario), cfg, calib,
                              horizon, n_steps, ("eval", seed, e))
        frames, closed, proprio, actions, flags = rollout(act, scenario, cfg)
        success, drop, damage = flags
        n_success += int(success and not damage)
        n_damage += int(damage)
        n_drop += int(drop)
        peak_sum += float(frames.max())
        record = EpisodeRecord(
            episode_id=f"eval-{seed}-{e:05d}", task=cfg.task, kind="policy",
            group=cfg.task, frames=frames, gripper_closed=closed,
            proprio=proprio, actions=actions, cond=cond_vector(scenario),
            success=success, drop=drop, damage=damage, seed=seed,
            provenance="policy")
        if calib is not None:
            ann = annotate_episode(record, calib, reward_weights or RewardWeights())
            rewards.append(ann.r_episode)
        if collect_records:
            records.append(record)
    metrics = {
        "n_episodes": int(n_episodes),
        "success_rate": n_success / n_episodes,
        "damage_rate": n_damage / n_episodes,
        "drop_rate": n_drop / n_episodes,
        "mean_peak_force": peak_sum / n_episodes,
        "mean_episode_reward": float(np.mean(rewards)) if rewards else None,
    }
    if collect_records:
        return metrics, records
    return metrics
