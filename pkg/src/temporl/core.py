"""Shared domain types, deterministic RNG streams, and on-disk array containers.

All arrays are float32 little-endian. Datasets and checkpoints share the same
container layout: a ``manifest.json`` describing shapes plus one flat ``.bin``
file per array, so artifacts stay language-neutral and auditable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

F32LE = np.dtype("<f4")


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

# Conventional stream ids. Distinct ids are statistically independent; a run's
# ids must never be reused across purposes or determinism audits get murky.
STREAM_DEMOS = 1
STREAM_PRETRAIN = 2
STREAM_FINETUNE = 3
STREAM_EVAL = 100
STREAM_ANALYSIS = 101


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible randomness source.

    Identical ``(seed, stream_id, path)`` always reproduces identical draws;
    distinct ids/paths give independent streams (via ``np.random.SeedSequence``
    spawn keys). Instances are cheap value objects; each worker owns its own.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence())

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent sub-stream at the given index path."""
        return RngStream(self.seed, self.stream_id, self.path + indices)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def _as_f32(x, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class State:
    """Environment observation: proprioception followed by object poses.

    The concatenation order is fixed per environment; ``obs()`` is what
    policies and value functions consume.
    """

    proprio: np.ndarray
    objects: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "proprio", _as_f32(self.proprio, "proprio"))
        object.__setattr__(self, "objects", _as_f32(self.objects, "objects"))

    def obs(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.objects])

    @staticmethod
    def from_obs(obs: np.ndarray, proprio_dim: int) -> "State":
        obs = np.asarray(obs, dtype=np.float32)
        return State(obs[:proprio_dim], obs[proprio_dim:])


@dataclass(frozen=True)
class ActionChunk:
    """An H x A sequence of position-target actions, the unit of policy output."""

    actions: np.ndarray

    def __post_init__(self):
        arr = _as_f32(self.actions, "actions")
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"chunk must be H x A with H >= 1, got shape {arr.shape}")
        object.__setattr__(self, "actions", arr)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]


@dataclass(frozen=True)
class Demonstration:
    """Aligned state/action sequences with success metadata.

    ``states[t]`` is the observation at which ``actions[t]`` was taken.
    Training datasets hold successful demonstrations only; failed episodes may
    still be stored when serializing rollouts for analysis.
    """

    states: np.ndarray
    actions: np.ndarray
    success: bool = True

    def __post_init__(self):
        states = _as_f32(self.states, "states")
        actions = _as_f32(self.actions, "actions")
        if states.ndim != 2 or actions.ndim != 2:
            raise ValueError("states and actions must be 2-D arrays")
        if len(states) != len(actions) or len(states) < 1:
            raise ValueError(
                f"states/actions length mismatch: {len(states)} vs {len(actions)}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class Dataset:
    """A non-empty collection of demonstrations with homogeneous dimensions."""

    demos: list[Demonstration]
    env_id: str
    action_space_kind: str = "position_target"

    def __post_init__(self):
        if not self.demos:
            raise ValueError("empty dataset")
        obs_dim = self.demos[0].states.shape[1]
        act_dim = self.demos[0].actions.shape[1]
        for i, d in enumerate(self.demos):
            if d.states.shape[1] != obs_dim or d.actions.shape[1] != act_dim:
                raise ValueError(f"demo {i} dimension mismatch")

    @property
    def obs_dim(self) -> int:
        return self.demos[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.demos[0].actions.shape[1]

    def __len__(self) -> int:
        return len(self.demos)


# ---------------------------------------------------------------------------
# Flat-array container IO
# ---------------------------------------------------------------------------


def write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=F32LE).tobytes())


def read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing array file: {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(
            f"array file {path.name} has {len(raw)} bytes, expected {expected} "
            f"for shape {tuple(shape)}"
        )
    return np.frombuffer(raw, dtype=F32LE).reshape(shape).astype(np.float32)


def save_dataset(dataset: Dataset, path: Path | str) -> None:
    """Write a dataset as manifest + per-demo float32 state/action files."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "demo_dataset",
        "env_id": dataset.env_id,
        "action_space_kind": dataset.action_space_kind,
        "obs_dim": dataset.obs_dim,
        "action_dim": dataset.action_dim,
        "demo_count": len(dataset),
        "demo_lengths": [len(d) for d in dataset.demos],
        "demo_success": [bool(d.success) for d in dataset.demos],
    }
    for i, demo in enumerate(dataset.demos):
        write_f32(path / f"demo_{i:05d}_states.bin", demo.states)
        write_f32(path / f"demo_{i:05d}_actions.bin", demo.actions)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path: Path | str) -> Dataset:
    """Reconstruct a dataset saved by :func:`save_dataset`, bit-exactly."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported format version: {manifest.get('format_version')!r}"
        )
    obs_dim = manifest["obs_dim"]
    action_dim = manifest["action_dim"]
    demos = []
    for i, (length, success) in enumerate(
        zip(manifest["demo_lengths"], manifest["demo_success"])
    ):
        try:
            states = read_f32(path / f"demo_{i:05d}_states.bin", (length, obs_dim))
            actions = read_f32(path / f"demo_{i:05d}_actions.bin", (length, action_dim))
        except (FileNotFoundError, ValueError) as e:
            raise type(e)(f"demo {i}: {e}") from e
        demos.append(Demonstration(states, actions, success=success))
    if len(demos) != manifest["demo_count"]:
        raise ValueError("manifest demo_count does not match demo_lengths")
    return Dataset(demos, env_id=manifest["env_id"],
                   action_space_kind=manifest["action_space_kind"])


# ---------------------------------------------------------------------------
# Checkpoint container (same style: manifest + float32 arrays)
# ---------------------------------------------------------------------------


def _array_filename(name: str) -> str:
    return name.replace(".", "__").replace("/", "__") + ".bin"


def save_arrays(path: Path | str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays plus a metadata manifest to a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        entries.append({"name": name, "shape": list(arr.shape),
                        "file": _array_filename(name)})
        write_f32(path / _array_filename(name), arr)
    manifest = {"format_version": FORMAT_VERSION, "arrays": entries, **meta}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_arrays(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported format version: {manifest.get('format_version')!r}"
        )
    arrays = {}
    for entry in manifest["arrays"]:
        arrays[entry["name"]] = read_f32(path / entry["file"], tuple(entry["shape"]))
    meta = {k: v for k, v in manifest.items() if k not in ("arrays", "format_version")}
    return meta, arrays


def arrays_digest(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and raw bytes, for frozen-parameter audits."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype=F32LE).tobytes())
    return h.hexdigest()
