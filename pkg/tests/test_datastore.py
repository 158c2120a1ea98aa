import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fistlab import datastore
from fistlab.datastore import (
    ChecksumError,
    DemoSet,
    EmptySupportError,
    FormatVersionError,
    Trajectory,
    TrajectoryDataset,
    TruncatedFileError,
    WindowSampler,
)
from fistlab.maze import CellRegion


def _traj(T, rng=None, offset=0.0):
    rng = rng or np.random.default_rng(T)
    return Trajectory(rng.normal(size=(T, 4)) + offset, rng.normal(size=(T, 2)))


def _dataset(lengths, seed=0):
    rng = np.random.default_rng(seed)
    return TrajectoryDataset([_traj(T, rng) for T in lengths], 4, 2, {"seed": seed})


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 4)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Trajectory(np.zeros((0, 4)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        Trajectory(np.full((2, 4), np.nan), np.zeros((2, 2)))


def test_demo_set_needs_a_trajectory():
    with pytest.raises(ValueError):
        DemoSet([], {"cell": [1, 1]}, 4, 2)


def test_single_window_always_returned():
    ds = _dataset([10])
    subs = datastore.sample_subtrajectories(ds, 10, 5, np.random.default_rng(0))
    assert all(s.start == 0 and s.traj_id == 0 and len(s) == 10 for s in subs)


def test_too_short_trajectories_have_empty_support():
    with pytest.raises(EmptySupportError):
        datastore.sample_subtrajectories(_dataset([9, 4]), 10, 5, np.random.default_rng(0))


def test_windows_are_contiguous_slices():
    ds = _dataset([12, 30, 5])
    for s in datastore.sample_subtrajectories(ds, 10, 50, np.random.default_rng(1)):
        assert s.traj_id != 2
        np.testing.assert_array_equal(s.states, ds[s.traj_id].states[s.start : s.start + 10])
        np.testing.assert_array_equal(s.actions, ds[s.traj_id].actions[s.start : s.start + 10])


def test_window_frequencies_uniform():
    ds = _dataset([12, 20, 3, 15])
    H = 10
    # exhaustive enumeration of the valid windows
    windows = [(i, s) for i, T in enumerate(ds.lengths) for s in range(T - H + 1)]
    sampler = WindowSampler(ds, H)
    ids, starts = sampler.draw(100_000, np.random.default_rng(2))
    counts = {w: 0 for w in windows}
    for w in zip(ids.tolist(), starts.tolist()):
        counts[w] += 1
    assert sum(counts.values()) == 100_000
    obs = np.array(list(counts.values()))
    expected = 100_000 / len(windows)
    chi2 = float(np.sum((obs - expected) ** 2 / expected))
    # chi-square critical value at p = 0.01 with 19 degrees of freedom
    assert len(windows) == 20
    assert chi2 < 36.19


def test_sampling_is_reproducible():
    ds = _dataset([40, 25])
    a = WindowSampler(ds, 10).sample_arrays(32, np.random.default_rng(5))
    b = WindowSampler(ds, 10).sample_arrays(32, np.random.default_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# region filtering


def _line(T):
    xs = np.linspace(0.5, 9.5, T)
    states = np.stack([xs, np.full(T, 0.5), np.ones(T), np.zeros(T)], axis=1)
    return Trajectory(states, np.zeros((T, 2)))


def test_filter_empty_region_keeps_everything():
    ds = TrajectoryDataset([_line(40)], 4, 2)
    out = datastore.filter_region(ds, CellRegion("none"), H=1)
    assert out.trajectories == ds.trajectories


def test_filter_drops_trajectory_inside_region():
    region = CellRegion("all", frozenset((0, c) for c in range(10)))
    assert len(datastore.filter_region(TrajectoryDataset([_line(40)], 4, 2), region)) == 0


def test_filter_single_crossing_gives_two_segments():
    tr = _line(91)
    region = CellRegion("mid", frozenset({(0, 4), (0, 5)}))
    out = datastore.filter_region(TrajectoryDataset([tr], 4, 2), region, H=5)
    assert len(out) == 2
    # per-state membership scan
    inside = [(int(np.floor(s[1])), int(np.floor(s[0]))) in region.cells for s in tr.states]
    first_in = inside.index(True)
    last_in = len(inside) - 1 - inside[::-1].index(True)
    np.testing.assert_array_equal(out[0].states, tr.states[:first_in])
    np.testing.assert_array_equal(out[1].states, tr.states[last_in + 1 :])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60), st.integers(1, 5))
def test_filter_partitions_indices(mask, H):
    T = len(mask)
    cols = np.where(mask, 1, 0)  # inside cells have column 1
    states = np.stack([cols + 0.5, np.full(T, 0.5), np.zeros(T), np.arange(T, dtype=float)], axis=1)
    tr = Trajectory(states, np.zeros((T, 2)))
    region = CellRegion("r", frozenset({(0, 1)}))
    segs = datastore.region_segments(tr, region, 1)
    kept = [t for a, b in segs for t in range(a, b)]
    removed = [t for t in range(T) if mask[t]]
    assert sorted(kept + removed) == list(range(T))
    out = datastore.filter_region(TrajectoryDataset([tr], 4, 2), region, H)
    for seg in out:
        assert len(seg) >= H
        assert not region.contains(seg.states).any()


# persistence


def test_roundtrip(tmp_path):
    ds = _dataset([7, 1, 13])
    loaded = datastore.load(datastore.save(ds, tmp_path / "d"))
    assert loaded.trajectories == ds.trajectories
    assert loaded.metadata == ds.metadata
    assert (loaded.state_dim, loaded.action_dim) == (4, 2)


def test_demo_roundtrip_keeps_goal(tmp_path):
    demos = DemoSet([_traj(5), _traj(8)], {"region": "left", "cell": [5, 1]}, 4, 2)
    loaded = datastore.load(datastore.save(demos, tmp_path / "d"))
    assert isinstance(loaded, DemoSet)
    assert loaded == demos


def test_empty_dataset_roundtrip(tmp_path):
    loaded = datastore.load(datastore.save(TrajectoryDataset([], 4, 2), tmp_path / "d"))
    assert len(loaded) == 0 and loaded.n_transitions == 0


def test_corrupted_byte_fails_checksum(tmp_path):
    path = datastore.save(_dataset([6]), tmp_path / "d")
    raw = bytearray((path / "actions.bin").read_bytes())
    raw[-1] ^= 0xFF
    (path / "actions.bin").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        datastore.load(path)


def test_truncated_file(tmp_path):
    path = datastore.save(_dataset([6]), tmp_path / "d")
    (path / "states.bin").write_bytes((path / "states.bin").read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        datastore.load(path)


def test_version_mismatch(tmp_path):
    path = datastore.save(_dataset([6]), tmp_path / "d")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatVersionError):
        datastore.load(path)


def test_files_are_little_endian_float32(tmp_path):
    ds = _dataset([3])
    path = datastore.save(ds, tmp_path / "d")
    raw = np.frombuffer((path / "states.bin").read_bytes(), dtype="<f4").reshape(3, 4)
    np.testing.assert_array_equal(raw, ds[0].states)
