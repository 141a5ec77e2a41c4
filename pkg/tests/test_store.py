"""Binary containers, JSON sidecars, and dataset directory bookkeeping."""

import struct

import numpy as np
import pytest

from safegrasp.config import DistillConfig, RewardWeights
from safegrasp.distill import generate_teacher_targets
from safegrasp.errors import StoreError
from safegrasp.policy import FlowPolicy, PolicyDims
from safegrasp.rewards import annotate_episode
from safegrasp.store import (MAGIC_CHECKPOINT, MAGIC_EPISODE, MAGIC_TARGETS,
                             DatasetStore, read_checkpoint, read_container,
                             read_episode, read_json, read_targets,
                             write_checkpoint, write_episode, write_json,
                             write_targets)

pytestmark = pytest.mark.usefixtures("tmp_path")


def assert_episode_equal(a, b):
    for name in ("frames", "gripper_closed", "proprio", "actions", "cond"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert (a.episode_id, a.task, a.kind, a.group) == \
        (b.episode_id, b.task, b.kind, b.group)
    assert (a.success, a.drop, a.damage, a.seed) == \
        (b.success, b.drop, b.damage, b.seed)


# -- round-trips --------------------------------------------------------------


def test_episode_round_trip_bitwise(tmp_path, demo_episodes):
    ep = demo_episodes[0]
    p = tmp_path / "ep.bin"
    h1 = write_episode(p, ep)
    back = read_episode(p)
    assert_episode_equal(ep, back)
    assert back.frames.dtype == np.float64
    assert back.gripper_closed.dtype == bool
    # identical content writes identical bytes
    h2 = write_episode(tmp_path / "ep2.bin", ep)
    assert h1 == h2
    assert p.read_bytes() == (tmp_path / "ep2.bin").read_bytes()


def test_checkpoint_round_trip(tmp_path, small_dims):
    pol = FlowPolicy.initialize(small_dims, 42)
    p = tmp_path / "m.ckpt"
    write_checkpoint(p, pol, meta={"stage": "test", "steps": 7})
    back, meta = read_checkpoint(p)
    assert back.dims == pol.dims
    assert meta == {"stage": "test", "steps": 7}
    for name in pol.params:
        np.testing.assert_array_equal(back.params[name], pol.params[name])


def test_targets_round_trip(tmp_path, small_dims, small_policy):
    from conftest import random_observation
    from safegrasp.trainer import TrainSample
    rng = np.random.default_rng(0)
    samples = [TrainSample(random_observation(small_dims, rng),
                           rng.standard_normal((small_dims.horizon,
                                                small_dims.action_dim)),
                           np.ones(small_dims.action_dim, bool),
                           np.zeros(small_dims.horizon), 0.0, "g", i,
                           episode_id=f"e{i}") for i in range(4)]
    tset = generate_teacher_targets(small_policy, samples, DistillConfig(),
                                    "dataset-identity")
    p = tmp_path / "t.tgt"
    write_targets(p, tset)
    back = read_targets(p)
    np.testing.assert_array_equal(back.targets, tset.targets)
    assert back.teacher_hash == tset.teacher_hash
    assert back.dataset_hash == "dataset-identity"
    assert back.sample_keys == tset.sample_keys
    assert back.sampler_steps == tset.sampler_steps


def test_json_writes_are_canonical(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [2, 3]})
    write_json(tmp_path / "b.json", {"a": [2, 3], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert read_json(tmp_path / "a.json") == {"a": [2, 3], "b": 1}


# -- corruption rejection -----------------------------------------------------


def write_one(tmp_path, demo_episodes):
    p = tmp_path / "c.bin"
    write_episode(p, demo_episodes[0])
    return p


def payload_start(data: bytes) -> int:
    header_len = struct.unpack_from("<I", data, 8)[0]
    return 12 + header_len + 8


def test_rejects_flipped_payload_byte(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    data = bytearray(p.read_bytes())
    pos = payload_start(data) + 100
    data[pos] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(StoreError, match="checksum mismatch.*payload"):
        read_episode(p)


def test_rejects_truncation(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    data = p.read_bytes()
    p.write_bytes(data[:len(data) - 40])
    with pytest.raises(StoreError, match="truncated"):
        read_episode(p)
    p.write_bytes(data[:6])
    with pytest.raises(StoreError, match="truncated"):
        read_episode(p)


def test_rejects_foreign_magic(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    with pytest.raises(StoreError, match="bad magic"):
        read_container(p, MAGIC_CHECKPOINT)
    with pytest.raises(StoreError, match="bad magic"):
        read_targets(p)


def test_rejects_major_version_bump(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    data = bytearray(p.read_bytes())
    data[4:6] = struct.pack("<H", 2)
    p.write_bytes(bytes(data))
    with pytest.raises(StoreError, match="unsupported major version 2"):
        read_episode(p)


def test_tolerates_minor_version_bump(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    data = bytearray(p.read_bytes())
    data[6:8] = struct.pack("<H", 99)
    p.write_bytes(bytes(data))
    assert_episode_equal(read_episode(p), demo_episodes[0])


def test_rejects_corrupt_header_json(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    data = bytearray(p.read_bytes())
    data[12] = ord("#")
    p.write_bytes(bytes(data))
    with pytest.raises(StoreError, match="corrupt JSON header at offset 12"):
        read_episode(p)


def test_error_messages_locate_the_failure(tmp_path, demo_episodes):
    p = write_one(tmp_path, demo_episodes)
    data = bytearray(p.read_bytes())
    data[payload_start(data)] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(StoreError) as exc:
        read_episode(p)
    msg = str(exc.value)
    assert str(p) in msg
    assert "bytes" in msg  # names the offending byte range


# -- dataset store ------------------------------------------------------------


@pytest.fixture
def store(tmp_path, demo_episodes):
    st = DatasetStore(tmp_path / "ds", create=True)
    for ep in demo_episodes[:4]:
        st.add_episode(ep)
    return st


def test_store_requires_manifest(tmp_path):
    with pytest.raises(StoreError, match="no manifest"):
        DatasetStore(tmp_path / "nowhere")


def test_store_episode_bookkeeping(store, demo_episodes):
    ids = store.episode_ids()
    assert ids == sorted(ids)
    assert len(ids) == 4
    back = store.load_episode(ids[0])
    assert back.episode_id == ids[0]
    with pytest.raises(StoreError, match="already present"):
        store.add_episode(demo_episodes[0])
    with pytest.raises(StoreError, match="not found"):
        store.load_episode("ghost")


def test_store_annotation_lifecycle(store, demo_calibration):
    eid = store.episode_ids()[0]
    ann = annotate_episode(store.load_episode(eid), demo_calibration,
                           RewardWeights())
    with pytest.raises(StoreError, match="not calibrated"):
        store.attach_annotation(eid, ann, "deadbeef")
    calib_hash = store.set_calibration(demo_calibration)
    with pytest.raises(StoreError, match="computed against"):
        store.attach_annotation(eid, ann, "deadbeef" * 8)
    store.attach_annotation(eid, ann, calib_hash)
    back = store.load_annotation(eid)
    assert back.r_episode == ann.r_episode
    np.testing.assert_array_equal(back.r_step, ann.r_step)
    with pytest.raises(StoreError, match="unknown episode"):
        store.attach_annotation("ghost", ann, calib_hash)


def test_recalibration_invalidates_annotations(store, demo_calibration):
    eid = store.episode_ids()[0]
    ann = annotate_episode(store.load_episode(eid), demo_calibration,
                           RewardWeights())
    h = store.set_calibration(demo_calibration)
    store.attach_annotation(eid, ann, h)
    # a new calibration clears the manifest and stales the sidecar
    import dataclasses
    changed = dataclasses.replace(demo_calibration,
                                  f_max=demo_calibration.f_max + 0.01)
    store.set_calibration(changed)
    assert store.manifest()["annotations"] == {}
    with pytest.raises(StoreError, match="stale"):
        store.load_annotation(eid)


def test_calibration_round_trip(store, demo_calibration):
    w = RewardWeights(lambda_slip=2.0)
    store.set_calibration(demo_calibration, w)
    calib, weights = store.load_calibration()
    assert calib.to_dict() == demo_calibration.to_dict()
    assert weights == w


def test_dataset_hash_tracks_content(tmp_path, demo_episodes, demo_calibration):
    st1 = DatasetStore(tmp_path / "d1", create=True)
    st2 = DatasetStore(tmp_path / "d2", create=True)
    for ep in demo_episodes[:3]:
        st1.add_episode(ep)
        st2.add_episode(ep)
    assert st1.dataset_hash() == st2.dataset_hash()
    h = st1.dataset_hash()
    st1.add_episode(demo_episodes[3])
    assert st1.dataset_hash() != h
    st2.set_calibration(demo_calibration)
    assert st2.dataset_hash() != h
