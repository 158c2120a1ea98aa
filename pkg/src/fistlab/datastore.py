"""Trajectory containers, H-step window sampling and the on-disk corpus format.

A dataset directory holds ``manifest.json`` and two raw little-endian float32
files, ``states.bin`` and ``actions.bin``, with all trajectories concatenated
in order. The manifest records per-trajectory lengths and a CRC-32 per file.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
STORE_DTYPE = np.dtype("<f4")


class DatastoreError(RuntimeError):
    pass


class FormatVersionError(DatastoreError):
    pass


class ChecksumError(DatastoreError):
    pass


class TruncatedFileError(DatastoreError):
    pass


class EmptySupportError(ValueError):
    """No trajectory is long enough to supply an H-step window."""


class Trajectory:
    __slots__ = ("states", "actions")

    def __init__(self, states, actions):
        states = np.ascontiguousarray(states, dtype=STORE_DTYPE.newbyteorder("="))
        actions = np.ascontiguousarray(actions, dtype=STORE_DTYPE.newbyteorder("="))
        if states.ndim != 2 or actions.ndim != 2 or len(states) != len(actions):
            raise ValueError(f"states {states.shape} and actions {actions.shape} must be T x dim with equal T")
        if len(states) < 1:
            raise ValueError("trajectory must contain at least one step")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise ValueError("trajectory contains non-finite values")
        self.states, self.actions = states, actions

    def __len__(self) -> int:
        return len(self.states)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Trajectory)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )

    def __repr__(self) -> str:
        return f"Trajectory(T={len(self)}, state_dim={self.states.shape[1]}, action_dim={self.actions.shape[1]})"


@dataclass
class TrajectoryDataset:
    trajectories: list
    state_dim: int
    action_dim: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, tr in enumerate(self.trajectories):
            if tr.states.shape[1] != self.state_dim or tr.actions.shape[1] != self.action_dim:
                raise ValueError(f"trajectory {k} has dims {tr.states.shape[1]}/{tr.actions.shape[1]}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, k) -> Trajectory:
        return self.trajectories[k]

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def lengths(self) -> list[int]:
        return [len(t) for t in self.trajectories]

    def all_states(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros((0, self.state_dim), dtype=np.float32)
        return np.concatenate([t.states for t in self.trajectories])


class DemoSet(TrajectoryDataset):
    """Downstream demonstrations plus a description of their shared goal."""

    def __init__(self, trajectories, goal, state_dim, action_dim, metadata=None):
        if len(trajectories) < 1:
            raise ValueError("a demo set needs at least one trajectory")
        super().__init__(list(trajectories), state_dim, action_dim, dict(metadata or {}))
        self.goal = dict(goal)

    def __eq__(self, other) -> bool:
        return isinstance(other, DemoSet) and super().__eq__(other) and self.goal == other.goal


@dataclass(frozen=True)
class SubTrajectory:
    states: np.ndarray
    actions: np.ndarray
    traj_id: int
    start: int

    def __len__(self) -> int:
        return len(self.states)


class WindowSampler:
    """Uniform sampling (with replacement) over every valid H-step window."""

    def __init__(self, dataset: TrajectoryDataset, H: int):
        self.dataset, self.H = dataset, H
        counts = np.array([max(len(t) - H + 1, 0) for t in dataset], dtype=np.int64)
        if counts.sum() == 0:
            raise EmptySupportError(f"no trajectory of length >= {H}")
        self.traj_ids = np.repeat(np.arange(len(counts)), counts)
        self.starts = np.concatenate([np.arange(n) for n in counts])
        self._states = [t.states for t in dataset]
        self._actions = [t.actions for t in dataset]

    @property
    def n_windows(self) -> int:
        return len(self.traj_ids)

    def draw(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Indices into the window table."""
        k = rng.integers(self.n_windows, size=batch_size)
        return self.traj_ids[k], self.starts[k]

    def sample_arrays(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """(B, H, state_dim) and (B, H, action_dim) float64 arrays."""
        ids, starts = self.draw(batch_size, rng)
        H = self.H
        states = np.stack([self._states[i][s : s + H] for i, s in zip(ids, starts)]).astype(np.float64)
        actions = np.stack([self._actions[i][s : s + H] for i, s in zip(ids, starts)]).astype(np.float64)
        return states, actions

    def all_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        H = self.H
        states = np.stack([self._states[i][s : s + H] for i, s in zip(self.traj_ids, self.starts)])
        actions = np.stack([self._actions[i][s : s + H] for i, s in zip(self.traj_ids, self.starts)])
        return states.astype(np.float64), actions.astype(np.float64)


def sample_subtrajectories(dataset: TrajectoryDataset, H: int, batch_size: int, rng) -> list[SubTrajectory]:
    sampler = WindowSampler(dataset, H)
    ids, starts = sampler.draw(batch_size, rng)
    return [
        SubTrajectory(dataset[i].states[s : s + H], dataset[i].actions[s : s + H], int(i), int(s))
        for i, s in zip(ids, starts)
    ]


def _region_mask(region, states) -> np.ndarray:
    fn = region.contains if hasattr(region, "contains") else region
    return np.asarray(fn(states), dtype=bool)


def region_segments(traj: Trajectory, region, min_length: int = 1) -> list[tuple[int, int]]:
    """Maximal ``[start, stop)`` runs of states outside ``region`` with length >= min_length."""
    inside = _region_mask(region, traj.states)
    segments = []
    start = None
    for t, flag in enumerate(inside):
        if not flag and start is None:
            start = t
        elif flag and start is not None:
            segments.append((start, t))
            start = None
    if start is not None:
        segments.append((start, len(inside)))
    return [(a, b) for a, b in segments if b - a >= min_length]


def filter_region(dataset: TrajectoryDataset, region, H: int = 1) -> TrajectoryDataset:
    """Split trajectories around ``region`` states; keep outside segments of length >= H."""
    kept = []
    for traj in dataset:
        for a, b in region_segments(traj, region, H):
            kept.append(Trajectory(traj.states[a:b], traj.actions[a:b]))
    meta = dict(dataset.metadata)
    meta["filtered_region"] = getattr(region, "name", "custom")
    return TrajectoryDataset(kept, dataset.state_dim, dataset.action_dim, meta)


# persistence -----------------------------------------------------------------

def _crc(buf: bytes) -> int:
    return zlib.crc32(buf) & 0xFFFFFFFF


def save(dataset: TrajectoryDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if dataset.trajectories:
        states = np.concatenate([t.states for t in dataset]).astype(STORE_DTYPE).tobytes()
        actions = np.concatenate([t.actions for t in dataset]).astype(STORE_DTYPE).tobytes()
    else:
        states = actions = b""
    (path / "states.bin").write_bytes(states)
    (path / "actions.bin").write_bytes(actions)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "demos" if isinstance(dataset, DemoSet) else "dataset",
        "dtype": "float32",
        "endianness": "little",
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "n_trajectories": len(dataset),
        "n_transitions": dataset.n_transitions,
        "lengths": dataset.lengths,
        "crc32": {"states.bin": _crc(states), "actions.bin": _crc(actions)},
        "metadata": dataset.metadata,
    }
    if isinstance(dataset, DemoSet):
        manifest["goal"] = dataset.goal
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load(path) -> TrajectoryDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatastoreError(f"no dataset at {path} (missing manifest.json)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"dataset format version {manifest.get('format_version')} != supported {FORMAT_VERSION}"
        )
    sd, ad_ = manifest["state_dim"], manifest["action_dim"]
    n = manifest["n_transitions"]
    arrays = {}
    for fname, dim in (("states.bin", sd), ("actions.bin", ad_)):
        raw = (path / fname).read_bytes()
        expected = n * dim * STORE_DTYPE.itemsize
        if len(raw) != expected:
            raise TruncatedFileError(f"{fname}: expected {expected} bytes, found {len(raw)}")
        if _crc(raw) != manifest["crc32"][fname]:
            raise ChecksumError(f"{fname}: CRC-32 mismatch")
        arrays[fname] = np.frombuffer(raw, dtype=STORE_DTYPE).reshape(n, dim)
    bounds = np.cumsum([0] + manifest["lengths"])
    trajectories = [
        Trajectory(arrays["states.bin"][a:b], arrays["actions.bin"][a:b]) for a, b in zip(bounds[:-1], bounds[1:])
    ]
    if manifest.get("kind") == "demos":
        return DemoSet(trajectories, manifest.get("goal", {}), sd, ad_, manifest["metadata"])
    return TrajectoryDataset(trajectories, sd, ad_, manifest["metadata"])
