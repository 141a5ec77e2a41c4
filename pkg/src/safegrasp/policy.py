"""Compact conditional flow-matching policy over action chunks.

The policy regresses a velocity field v(x_t, t, cond, latent) with a two
hidden layer tanh perceptron. The 32-d latent is a linear projection of the
state: proprioception alone for the proprio-only variant, or proprioception
concatenated with a 128-d tactile embedding from a small encoder for the
tactile-conditioned variant. Training pairs the linear interpolation path
x_t = (1 - t) * x0 + t * a with target velocity (a - x0); sampling integrates
the field with fixed-step Euler from seeded Gaussian noise.

Parameters live in named float64 blocks. backward() returns exact analytic
gradients of sum(upstream * elementwise_loss) for an arbitrary per-element
upstream weighting, which the trainers reuse for masked and reward-weighted
objectives. All forward passes cache the activations backward needs; caches
are invalidated whenever parameters change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NumericError, StaleCacheError
from .tactile import TactileFrame

VF_BLOCKS = ("vf_w1", "vf_b1", "vf_w2", "vf_b2", "vf_w3", "vf_b3")
ENC_BLOCKS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
PROJ_BLOCKS = ("proj_w", "proj_b")


@dataclass(frozen=True)
class PolicyDims:
    """Architecture sizes; tactile toggles the encoder branch."""

    horizon: int = 50
    action_dim: int = 6
    cond_dim: int = 8
    latent_dim: int = 32
    tactile_embed_dim: int = 128
    enc_hidden: int = 128
    vf_hidden: int = 128
    grid_h: int = 10
    grid_w: int = 10
    tactile: bool = True

    @property
    def chunk_size(self) -> int:
        return self.horizon * self.action_dim

    @property
    def tactile_in(self) -> int:
        return 2 * self.grid_h * self.grid_w

    @property
    def state_dim(self) -> int:
        return self.action_dim + (self.tactile_embed_dim if self.tactile else 0)

    @property
    def vf_in(self) -> int:
        return self.chunk_size + 1 + self.cond_dim + self.latent_dim

    def block_order(self):
        return (ENC_BLOCKS if self.tactile else ()) + PROJ_BLOCKS + VF_BLOCKS


@dataclass
class Observation:
    """Policy input at one timestep. tactile may be None for proprio-only policies."""

    cond: np.ndarray
    proprio: np.ndarray
    tactile: TactileFrame | None = None


@dataclass
class FlowPolicy:
    dims: PolicyDims
    params: dict = field(default_factory=dict)
    init_seed: int | None = None
    version: int = 0

    @classmethod
    def initialize(cls, dims: PolicyDims, seed: int) -> "FlowPolicy":
        """Symmetric uniform fan-in init for weights, zeros for biases."""
        rng = np.random.default_rng(seed)
        shapes = _block_shapes(dims)
        params = {}
        for name in dims.block_order():
            shape = shapes[name]
            if name.rsplit("_", 1)[-1].startswith("w"):
                bound = 1.0 / np.sqrt(shape[1])
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(dims=dims, params=params, init_seed=seed)

    def block_names(self):
        return self.dims.block_order()

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "FlowPolicy":
        return FlowPolicy(dims=self.dims,
                          params={k: v.copy() for k, v in self.params.items()},
                          init_seed=self.init_seed)

    def bump(self):
        """Mark parameters as changed; outstanding caches become stale."""
        self.version += 1


def _block_shapes(dims: PolicyDims) -> dict:
    shapes = {
        "proj_w": (dims.latent_dim, dims.state_dim),
        "proj_b": (dims.latent_dim,),
        "vf_w1": (dims.vf_hidden, dims.vf_in),
        "vf_b1": (dims.vf_hidden,),
        "vf_w2": (dims.vf_hidden, dims.vf_hidden),
        "vf_b2": (dims.vf_hidden,),
        "vf_w3": (dims.chunk_size, dims.vf_hidden),
        "vf_b3": (dims.chunk_size,),
    }
    if dims.tactile:
        shapes.update({
            "enc_w1": (dims.enc_hidden, dims.tactile_in),
            "enc_b1": (dims.enc_hidden,),
            "enc_w2": (dims.tactile_embed_dim, dims.enc_hidden),
            "enc_b2": (dims.tactile_embed_dim,),
        })
    return shapes


# Every conversion of sensor grids into network input passes through
# tactile_input, so this counter witnesses whether a policy touched them.
tactile_read_count = 0


def tactile_input(frame: TactileFrame) -> np.ndarray:
    """Flatten both pads, left first, into the encoder input vector."""
    global tactile_read_count
    tactile_read_count += 1
    return np.concatenate([np.asarray(frame.left, float).ravel(),
                           np.asarray(frame.right, float).ravel()])


@dataclass
class ForwardCache:
    """Activations retained by a forward pass for the matching backward pass."""

    policy_version: int
    t: np.ndarray
    x_flat: np.ndarray
    cond: np.ndarray
    state: np.ndarray
    vin: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    v: np.ndarray
    target_vel: np.ndarray
    tact_in: np.ndarray | None = None
    enc_h1: np.ndarray | None = None


def _state_batch(policy: FlowPolicy, proprio: np.ndarray, tact: np.ndarray | None):
    """Assemble the (B, state_dim) matrix plus encoder activations."""
    p = policy.params
    if policy.dims.tactile:
        if tact is None:
            raise DataError("tactile-conditioned policy needs tactile input")
        z1 = tact @ p["enc_w1"].T + p["enc_b1"]
        e1 = np.tanh(z1)
        emb = e1 @ p["enc_w2"].T + p["enc_b2"]
        return np.concatenate([proprio, emb], axis=1), e1
    return proprio, None


def forward_batch(policy: FlowPolicy, x_flat, t, cond, proprio, tact,
                  target_vel) -> tuple[np.ndarray, ForwardCache]:
    """Velocity-field forward pass over a batch; returns (v, cache)."""
    dims = policy.dims
    p = policy.params
    x_flat = np.asarray(x_flat, float)
    if x_flat.shape[1] != dims.chunk_size:
        raise DataError(f"chunk size {x_flat.shape[1]} != {dims.chunk_size}")
    if cond.shape[1] != dims.cond_dim:
        raise DataError(f"cond size {cond.shape[1]} != {dims.cond_dim}")
    state, enc_h1 = _state_batch(policy, proprio, tact)
    latent = state @ p["proj_w"].T + p["proj_b"]
    vin = np.concatenate([x_flat, t[:, None], cond, latent], axis=1)
    h1 = np.tanh(vin @ p["vf_w1"].T + p["vf_b1"])
    h2 = np.tanh(h1 @ p["vf_w2"].T + p["vf_b2"])
    v = h2 @ p["vf_w3"].T + p["vf_b3"]
    cache = ForwardCache(policy.version, t, x_flat, cond, state, vin, h1, h2,
                         v, target_vel, tact, enc_h1)
    return v, cache


def backward_batch(policy: FlowPolicy, cache: ForwardCache, upstream) -> dict:
    """Gradients of sum(upstream * (v - target_vel)**2) for every parameter block.

    upstream has shape (B, horizon, action_dim) and is treated as a constant.
    """
    if cache.policy_version != policy.version:
        raise StaleCacheError(
            "forward cache was built for an older parameter version")
    dims = policy.dims
    p = policy.params
    B = cache.v.shape[0]
    u = np.asarray(upstream, float).reshape(B, dims.chunk_size)
    dv = 2.0 * u * (cache.v - cache.target_vel)

    grads = {}
    grads["vf_w3"] = dv.T @ cache.h2
    grads["vf_b3"] = dv.sum(axis=0)
    dh2 = (dv @ p["vf_w3"]) * (1.0 - cache.h2 ** 2)
    grads["vf_w2"] = dh2.T @ cache.h1
    grads["vf_b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ p["vf_w2"]) * (1.0 - cache.h1 ** 2)
    grads["vf_w1"] = dh1.T @ cache.vin
    grads["vf_b1"] = dh1.sum(axis=0)

    dvin = dh1 @ p["vf_w1"]
    dlatent = dvin[:, -dims.latent_dim:]
    grads["proj_w"] = dlatent.T @ cache.state
    grads["proj_b"] = dlatent.sum(axis=0)

    if dims.tactile:
        dstate = dlatent @ p["proj_w"]
        demb = dstate[:, dims.action_dim:]
        grads["enc_w2"] = demb.T @ cache.enc_h1
        grads["enc_b2"] = demb.sum(axis=0)
        de1 = (demb @ p["enc_w2"]) * (1.0 - cache.enc_h1 ** 2)
        grads["enc_w1"] = de1.T @ cache.tact_in
        grads["enc_b1"] = de1.sum(axis=0)
    return grads


def _obs_arrays(policy: FlowPolicy, obs: Observation):
    dims = policy.dims
    cond = np.asarray(obs.cond, float).reshape(1, -1)
    proprio = np.asarray(obs.proprio, float).reshape(1, -1)
    if cond.shape[1] != dims.cond_dim:
        raise DataError(
            f"observation cond has size {cond.shape[1]}, policy expects {dims.cond_dim}")
    if proprio.shape[1] != dims.action_dim:
        raise DataError(
            f"observation proprio has size {proprio.shape[1]}, policy expects "
            f"{dims.action_dim}")
    tact = None
    if dims.tactile:
        if obs.tactile is None:
            raise DataError("tactile-conditioned policy got an observation "
                            "without tactile data")
        tact = tactile_input(obs.tactile).reshape(1, -1)
        if tact.shape[1] != dims.tactile_in:
            raise DataError(
                f"tactile input has size {tact.shape[1]}, policy expects "
                f"{dims.tactile_in}")
    return cond, proprio, tact


def encode_state(obs: Observation, policy: FlowPolicy) -> np.ndarray:
    """Project the observation to the 32-d state latent."""
    cond, proprio, tact = _obs_arrays(policy, obs)
    state, _ = _state_batch(policy, proprio, tact)
    p = policy.params
    return (state @ p["proj_w"].T + p["proj_b"])[0]


def fm_loss_elements(policy: FlowPolicy, obs: Observation, target_chunk,
                     t: float, x0) -> tuple[np.ndarray, ForwardCache]:
    """Per-element squared flow-matching loss at one interpolation time.

    Returns losses shaped (horizon, action_dim) and the cache backward() needs.
    """
    dims = policy.dims
    target = np.asarray(target_chunk, float)
    x0 = np.asarray(x0, float)
    if target.shape != (dims.horizon, dims.action_dim):
        raise DataError(
            f"target chunk shape {target.shape} != {(dims.horizon, dims.action_dim)}")
    if x0.shape != target.shape:
        raise DataError(f"x0 shape {x0.shape} != {target.shape}")
    cond, proprio, tact = _obs_arrays(policy, obs)
    target_flat = target.reshape(1, -1)
    x0_flat = x0.reshape(1, -1)
    x_t = (1.0 - t) * x0_flat + t * target_flat
    tv = target_flat - x0_flat
    v, cache = forward_batch(policy, x_t, np.array([float(t)]), cond, proprio,
                             tact, tv)
    ell = ((v - tv) ** 2).reshape(dims.horizon, dims.action_dim)
    return ell, cache


def backward(policy: FlowPolicy, cache: ForwardCache, upstream) -> dict:
    """Single-sample wrapper over backward_batch."""
    dims = policy.dims
    u = np.asarray(upstream, float)
    if u.shape != (dims.horizon, dims.action_dim):
        raise DataError(
            f"upstream shape {u.shape} != {(dims.horizon, dims.action_dim)}")
    return backward_batch(policy, cache, u[None])


def sample_chunk(policy: FlowPolicy, obs: Observation, n_steps: int = 10,
                 seed: int = 0) -> np.ndarray:
    """Draw one action chunk by Euler-integrating the velocity field.

    The initial state is standard normal from the given seed; n_steps uniform
    Euler steps move it from t=0 to t=1.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    dims = policy.dims
    cond, proprio, tact = _obs_arrays(policy, obs)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, dims.chunk_size))
    dt = 1.0 / n_steps
    dummy = np.zeros_like(x)
    for k in range(n_steps):
        t = np.array([k * dt])
        v, _ = forward_batch(policy, x, t, cond, proprio, tact, dummy)
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise NumericError(
                f"non-finite chunk state after integration step {k + 1}/{n_steps}")
    return x.reshape(dims.horizon, dims.action_dim)


def student_dims(dims: PolicyDims) -> PolicyDims:
    """The proprio-only twin of a tactile-conditioned architecture."""
    return replace(dims, tactile=False)
