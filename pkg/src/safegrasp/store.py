"""On-disk formats: episode containers, annotation sidecars, calibration
documents, teacher target sets, policy checkpoints and dataset manifests.

Binary payloads share one envelope: a 4-byte magic, semantic version
(major.minor as two u16), a u32-length JSON header, a u64-length payload of
little-endian array blocks, and a SHA-256 trailer over the payload. Readers
reject foreign magics, major-version bumps, truncation and checksum damage
with messages naming the failing section and byte offset; unknown minor
versions and missing optional header fields are tolerated.

Text artifacts (manifest, calibration, annotations, metrics) are JSON with
sorted keys so equal content is byte-identical. All writes go through a
temporary file and an atomic rename; manifest read-modify-write runs under a
file lock plus an in-process lock.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
import threading
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__
from .config import RewardWeights
from .errors import StoreError
from .policy import FlowPolicy, PolicyDims
from .rewards import RewardAnnotation, SafetyCalibration
from .sim import EpisodeRecord

FORMAT_VERSION = (1, 0)
MAGIC_EPISODE = b"SGE1"
MAGIC_CHECKPOINT = b"SGC1"
MAGIC_TARGETS = b"SGT1"

_HEAD = struct.Struct("<4sHHI")
_PAYLOAD_LEN = struct.Struct("<Q")


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_json(path, obj):
    _atomic_write(Path(path), _json_bytes(obj))


def read_json(path):
    with open(path, "rb") as f:
        return json.loads(f.read().decode("utf-8"))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_container(path, magic: bytes, header: dict, arrays: dict) -> str:
    """Write one binary container; returns the file content hash.

    arrays preserve insertion order; the header gains a block table with
    shapes, dtypes and payload offsets.
    """
    blocks = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<u1" if arr.dtype == bool else "<f8"
        raw = np.ascontiguousarray(arr.astype(dtype)).tobytes()
        blocks.append({"name": name, "shape": list(arr.shape),
                       "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    full_header = dict(header)
    full_header["blocks"] = blocks
    header_bytes = _json_bytes(full_header)
    data = (_HEAD.pack(magic, *FORMAT_VERSION, len(header_bytes))
            + header_bytes
            + _PAYLOAD_LEN.pack(len(payload))
            + payload
            + hashlib.sha256(payload).digest())
    _atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def read_container(path, magic: bytes):
    """Read and verify one binary container; returns (header, arrays dict)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise StoreError(f"{path}: truncated before the {_HEAD.size}-byte "
                         f"header preamble (file is {len(data)} bytes)")
    got_magic, major, minor, header_len = _HEAD.unpack_from(data, 0)
    if got_magic != magic:
        raise StoreError(f"{path}: bad magic {got_magic!r} at offset 0, "
                         f"expected {magic!r}")
    if major != FORMAT_VERSION[0]:
        raise StoreError(f"{path}: unsupported major version {major} "
                         f"(reader supports {FORMAT_VERSION[0]}.x)")
    pos = _HEAD.size
    if len(data) < pos + header_len + _PAYLOAD_LEN.size:
        raise StoreError(f"{path}: truncated in the header section at offset {pos}")
    try:
        header = json.loads(data[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StoreError(f"{path}: corrupt JSON header at offset {pos}: {e}") from e
    pos += header_len
    (payload_len,) = _PAYLOAD_LEN.unpack_from(data, pos)
    pos += _PAYLOAD_LEN.size
    if len(data) < pos + payload_len + 32:
        raise StoreError(f"{path}: truncated in the payload section at offset "
                         f"{pos} (need {payload_len} payload bytes plus a "
                         f"32-byte checksum)")
    payload = data[pos:pos + payload_len]
    stored = data[pos + payload_len:pos + payload_len + 32]
    actual = hashlib.sha256(payload).digest()
    if stored != actual:
        raise StoreError(f"{path}: checksum mismatch over the payload section "
                         f"(bytes {pos}..{pos + payload_len})")
    arrays = {}
    for blk in header.get("blocks", ()):
        start, nbytes = blk["offset"], blk["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=blk["dtype"])
        arr = arr.reshape(blk["shape"])
        if blk["dtype"] == "<u1":
            arr = arr.astype(bool)
        else:
            arr = arr.astype(np.float64)
        arrays[blk["name"]] = arr
    return header, arrays


def write_episode(path, ep: EpisodeRecord) -> str:
    header = {
        "kind_of_file": "episode",
        "episode_id": ep.episode_id,
        "task": ep.task,
        "demo_kind": ep.kind,
        "group": ep.group,
        "success": bool(ep.success),
        "drop": bool(ep.drop),
        "damage": bool(ep.damage),
        "seed": int(ep.seed),
        "provenance": ep.provenance,
        "sensor_range": [1.0, 9.0],
    }
    arrays = {
        "frames": ep.frames,
        "gripper_closed": ep.gripper_closed,
        "proprio": ep.proprio,
        "actions": ep.actions,
        "cond": ep.cond,
    }
    return write_container(path, MAGIC_EPISODE, header, arrays)


def read_episode(path) -> EpisodeRecord:
    header, arrays = read_container(path, MAGIC_EPISODE)
    header.setdefault("sensor_range", [1.0, 9.0])
    header.setdefault("provenance", "unknown")
    try:
        return EpisodeRecord(
            episode_id=header["episode_id"], task=header["task"],
            kind=header["demo_kind"], group=header["group"],
            frames=arrays["frames"], gripper_closed=arrays["gripper_closed"],
            proprio=arrays["proprio"], actions=arrays["actions"],
            cond=arrays["cond"], success=header["success"],
            drop=header["drop"], damage=header["damage"],
            seed=header["seed"], provenance=header["provenance"])
    except KeyError as e:
        raise StoreError(f"{path}: episode header is missing field {e}") from e


def write_checkpoint(path, policy: FlowPolicy, meta: dict | None = None) -> str:
    header = {
        "kind_of_file": "checkpoint",
        "dims": dataclasses.asdict(policy.dims),
        "init_seed": policy.init_seed,
        "meta": meta or {},
    }
    arrays = {name: policy.params[name] for name in policy.block_names()}
    return write_container(path, MAGIC_CHECKPOINT, header, arrays)


def read_checkpoint(path):
    header, arrays = read_container(path, MAGIC_CHECKPOINT)
    if "dims" not in header:
        raise StoreError(f"{path}: checkpoint header is missing field 'dims'")
    known = {f.name for f in dataclasses.fields(PolicyDims)}
    raw = {k: v for k, v in header["dims"].items() if k in known}
    dims = PolicyDims(**raw)
    expected = dims.block_order()
    if tuple(arrays) != expected:
        raise StoreError(f"{path}: parameter blocks {tuple(arrays)} do not "
                         f"match the declared architecture {expected}")
    policy = FlowPolicy(dims=dims, params=dict(arrays),
                        init_seed=header.get("init_seed"))
    return policy, header.get("meta", {})


def write_targets(path, target_set) -> str:
    header = {
        "kind_of_file": "teacher_targets",
        "teacher_hash": target_set.teacher_hash,
        "dataset_hash": target_set.dataset_hash,
        "root_seed": int(target_set.root_seed),
        "sampler_steps": int(target_set.sampler_steps),
        "sample_keys": [[k, int(t)] for k, t in target_set.sample_keys],
    }
    return write_container(path, MAGIC_TARGETS, header,
                           {"targets": target_set.targets})


def read_targets(path):
    from .distill import TeacherTargetSet

    header, arrays = read_container(path, MAGIC_TARGETS)
    try:
        return TeacherTargetSet(
            targets=arrays["targets"],
            teacher_hash=header["teacher_hash"],
            dataset_hash=header["dataset_hash"],
            root_seed=header["root_seed"],
            sampler_steps=header["sampler_steps"],
            sample_keys=[(k, int(t)) for k, t in header["sample_keys"]])
    except KeyError as e:
        raise StoreError(f"{path}: target header is missing field {e}") from e


class DatasetStore:
    """Directory layout and manifest bookkeeping for one dataset.

    <root>/manifest             JSON index: episodes, hashes, calibration hash
    <root>/episodes/<id>.bin    binary episode containers
    <root>/annotations/<id>.ann JSON reward annotations (calibration-stamped)
    <root>/calibration.cfg      thresholds plus reward constants
    <root>/targets/*.tgt        teacher target sets
    <root>/checkpoints/*.ckpt   policy checkpoints
    """

    def __init__(self, root, create: bool = False):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest"
        self._mutex = threading.Lock()
        self._lock = FileLock(str(self.root / ".manifest.lock"))
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
            (self.root / "episodes").mkdir(exist_ok=True)
            (self.root / "annotations").mkdir(exist_ok=True)
            (self.root / "targets").mkdir(exist_ok=True)
            (self.root / "checkpoints").mkdir(exist_ok=True)
            if not self.manifest_path.exists():
                write_json(self.manifest_path, {
                    "format_version": f"{FORMAT_VERSION[0]}.{FORMAT_VERSION[1]}",
                    "tool_version": __version__,
                    "episodes": {},
                    "annotations": {},
                    "calibration_hash": None,
                    "generator": {},
                })
        elif not self.manifest_path.exists():
            raise StoreError(f"{self.root} is not a dataset (no manifest)")

    # -- manifest ---------------------------------------------------------

    def manifest(self) -> dict:
        return read_json(self.manifest_path)

    def _update_manifest(self, fn):
        with self._mutex, self._lock:
            m = read_json(self.manifest_path)
            fn(m)
            write_json(self.manifest_path, m)

    def set_generator_info(self, info: dict):
        self._update_manifest(lambda m: m.update({"generator": info}))

    # -- episodes ---------------------------------------------------------

    def episode_path(self, episode_id: str) -> Path:
        return self.root / "episodes" / f"{episode_id}.bin"

    def add_episode(self, ep: EpisodeRecord) -> str:
        content_hash = write_episode(self.episode_path(ep.episode_id), ep)

        def apply(m):
            if ep.episode_id in m["episodes"]:
                raise StoreError(f"episode id {ep.episode_id!r} already present")
            m["episodes"][ep.episode_id] = {
                "hash": content_hash, "task": ep.task, "kind": ep.kind,
                "group": ep.group, "seed": int(ep.seed),
                "provenance": ep.provenance,
            }

        self._update_manifest(apply)
        return content_hash

    def episode_ids(self) -> list:
        return sorted(self.manifest()["episodes"])

    def load_episode(self, episode_id: str) -> EpisodeRecord:
        path = self.episode_path(episode_id)
        if not path.exists():
            raise StoreError(f"episode {episode_id!r} not found under {self.root}")
        return read_episode(path)

    # -- calibration ------------------------------------------------------

    @property
    def calibration_path(self) -> Path:
        return self.root / "calibration.cfg"

    def set_calibration(self, calib: SafetyCalibration,
                        weights: RewardWeights = RewardWeights()) -> str:
        doc = {
            "format_version": f"{FORMAT_VERSION[0]}.{FORMAT_VERSION[1]}",
            "calibration": calib.to_dict(),
            "reward_weights": dataclasses.asdict(weights),
        }
        write_json(self.calibration_path, doc)
        calib_hash = file_sha256(self.calibration_path)

        def apply(m):
            m["calibration_hash"] = calib_hash
            m["annotations"] = {}

        self._update_manifest(apply)
        return calib_hash

    def load_calibration(self):
        if not self.calibration_path.exists():
            raise StoreError(
                f"dataset {self.root} is not calibrated yet; run calibrate first")
        doc = read_json(self.calibration_path)
        calib = SafetyCalibration.from_dict(doc["calibration"])
        weights = RewardWeights(**doc["reward_weights"])
        return calib, weights

    def calibration_hash(self):
        return self.manifest()["calibration_hash"]

    # -- annotations ------------------------------------------------------

    def annotation_path(self, episode_id: str) -> Path:
        return self.root / "annotations" / f"{episode_id}.ann"

    def attach_annotation(self, episode_id: str, ann: RewardAnnotation,
                          calibration_hash: str) -> str:
        manifest = self.manifest()
        if episode_id not in manifest["episodes"]:
            raise StoreError(f"cannot annotate unknown episode {episode_id!r}")
        current = manifest["calibration_hash"]
        if current is None:
            raise StoreError(
                f"dataset {self.root} is not calibrated yet; run calibrate first")
        if calibration_hash != current:
            raise StoreError(
                f"annotation for {episode_id!r} was computed against "
                f"calibration {calibration_hash[:12]}, dataset has {current[:12]}")
        doc = dict(ann.to_dict())
        doc["episode_id"] = episode_id
        doc["calibration_hash"] = calibration_hash
        path = self.annotation_path(episode_id)
        write_json(path, doc)
        ann_hash = file_sha256(path)

        def apply(m):
            m["annotations"][episode_id] = ann_hash

        self._update_manifest(apply)
        return ann_hash

    def load_annotation(self, episode_id: str) -> RewardAnnotation:
        path = self.annotation_path(episode_id)
        if not path.exists():
            raise StoreError(f"episode {episode_id!r} has no annotation; run annotate")
        doc = read_json(path)
        current = self.calibration_hash()
        if doc.get("calibration_hash") != current:
            raise StoreError(
                f"annotation for {episode_id!r} is stale: it references "
                f"calibration {str(doc.get('calibration_hash'))[:12]}, the "
                f"dataset now has {str(current)[:12]}")
        return RewardAnnotation.from_dict(doc)

    # -- identity ---------------------------------------------------------

    def dataset_hash(self) -> str:
        m = self.manifest()
        h = hashlib.sha256()
        h.update(m["format_version"].encode())
        for eid in sorted(m["episodes"]):
            h.update(eid.encode())
            h.update(m["episodes"][eid]["hash"].encode())
        h.update(str(m["calibration_hash"]).encode())
        return h.hexdigest()
