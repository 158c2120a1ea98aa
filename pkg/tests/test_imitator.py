import json
import math

import numpy as np
import pytest

from fistlab import imitator as im
from fistlab import maze, metric
from fistlab import skillmodel as sm
from fistlab.datastore import DemoSet, Trajectory, TrajectoryDataset
from fistlab.imitator import (
    Artifacts,
    BCConfig,
    EpisodeResult,
    EvalConfig,
    EvalReport,
    MazeTask,
    MissingArtifactError,
    PolicyKind,
    SkillPolicy,
)
from fistlab.maze import EnvConfig, MazeLayout
from fistlab.metric import DemoIndex, DistanceConfig, DistanceEncoder
from fistlab.skillmodel import SkillModel, SkillModelConfig

TINY = SkillModelConfig(
    H=5, z_dim=4, hidden=16, decoder_layers=2, prior_layers=2, batch_size=16, pretrain_epochs=1, finetune_epochs=1,
    train_dtype="float64",
)
TINY_BC = BCConfig(H=5, hidden=16, n_hidden=2, batch_size=16, pretrain_epochs=1, finetune_epochs=1, train_dtype="float64")
CORRIDOR = MazeLayout.from_text("#######\n#.....#\n#####.#\n#.....#\n#######")


def _corridor_demo():
    start = np.array([1.5, 1.5, 0.0, 0.0])
    states, actions, final = maze.rollout_to_goal(CORRIDOR, start, (3, 1), EnvConfig())
    states, actions = np.vstack([states, final]), np.vstack([actions, np.zeros(2)])
    return DemoSet([Trajectory(states, actions)], {"cell": [3, 1], "region": "corridor"}, 4, 2)


@pytest.fixture(scope="module")
def corridor():
    demos = _corridor_demo()
    return MazeTask(CORRIDOR, (3, 1), EnvConfig(), "corridor"), demos


@pytest.fixture(scope="module")
def artifacts(corridor):
    task, demos = corridor
    return Artifacts(
        task,
        demos,
        skills=SkillModel(TINY, 4, 2, seed=0),
        skills_pretrained=SkillModel(TINY, 4, 2, seed=1),
        skills_scratch=SkillModel(TINY, 4, 2, seed=2),
        spirl=SkillModel(TINY, 4, 2, seed=3, conditioning="current"),
        distance=DistanceEncoder(DistanceConfig(H=5, embed_dim=4, hidden=8), 4, seed=0),
        bc=im.BCNet(TINY_BC, 4, 2, seed=0),
        goal_bc=im.BCNet(TINY_BC, 4, 2, seed=0, goal_conditioned=True),
    )


# episodes


def test_zero_step_budget_fails_immediately(corridor, artifacts):
    task, demos = corridor
    r = im.run_fist_episode(artifacts.skills, None, DemoIndex(demos), task, EvalConfig(max_steps=0), demos[0].states[0])
    assert r.length == 0 and not r.success


def test_start_inside_goal_succeeds_at_zero(corridor, artifacts):
    task, demos = corridor
    r = im.run_episode(im.build_policy("bc_ft", artifacts, EvalConfig()), task, demos[0].states[-1], EvalConfig(), None)
    assert r.length == 0 and r.success


@pytest.mark.parametrize("kind", list(PolicyKind))
def test_every_policy_respects_budget_and_stays_finite(corridor, artifacts, kind):
    task, demos = corridor
    cfg = EvalConfig(max_steps=30, record_trace=True)
    policy = im.build_policy(kind, artifacts, cfg)
    r = im.run_episode(policy, task, np.array([1.5, 1.5, 0.0, 0.0]), cfg, np.random.default_rng(0))
    assert r.length <= 30
    assert np.all(np.isfinite(r.trace))


def test_overfit_model_replays_demo(corridor):
    task, demos = corridor
    cfg = SkillModelConfig(**{**TINY.__dict__, "hidden": 32, "pretrain_epochs": 150, "beta": 1e-3, "lr": 3e-3})
    model, _ = sm.pretrain(demos, cfg, seed=0)
    r = im.run_fist_episode(model, None, DemoIndex(demos), task, EvalConfig(max_steps=400, deterministic=True), demos[0].states[0])
    assert r.success
    assert r.length <= 1.2 * len(demos[0])


def test_resample_period_controls_skill_changes(artifacts):
    calls = []

    def record(mean, std, rng):
        calls.append(len(calls))
        return np.full_like(mean, float(len(calls)))

    policy = SkillPolicy(artifacts.skills, lambda s: (s, s), period=5, sample_z=record)
    for t in range(12):
        policy.act(np.zeros(4), t, None)
    assert len(calls) == 3  # t = 0, 5, 10


def test_period_h_equals_committing_to_each_skill(corridor, artifacts):
    task, demos = corridor
    H = artifacts.skills.config.H
    zs = np.random.default_rng(0).normal(size=(20, 4))
    # period H draws a new z every H steps; period 1 with the z repeated H times must match
    it_h, it_1 = iter(zs), iter(np.repeat(zs, H, axis=0))
    cond = im.fist_condition(DemoIndex(demos), H)
    p_h = SkillPolicy(artifacts.skills, cond, period=H, sample_z=lambda m, s, r: next(it_h))
    p_1 = SkillPolicy(artifacts.skills, cond, period=1, sample_z=lambda m, s, r: next(it_1))
    cfg = EvalConfig(max_steps=60, record_trace=True)
    start = np.array([1.5, 1.5, 0.0, 0.0])
    a = im.run_episode(p_h, task, start, cfg, None)
    b = im.run_episode(p_1, task, start, cfg, None)
    np.testing.assert_array_equal(a.trace, b.trace)


def test_period_outside_horizon_rejected(artifacts):
    with pytest.raises(ValueError):
        SkillPolicy(artifacts.skills, lambda s: (s, s), period=TINY.H + 1)


def test_spirl_without_lookup_never_touches_index(corridor, artifacts):
    task, _ = corridor

    class Exploding:
        def __getattr__(self, name):
            raise AssertionError("index used")

    r = im.run_spirl_episode(artifacts.spirl, Exploding(), task, EvalConfig(max_steps=20), np.array([1.5, 1.5, 0, 0]))
    assert r.length == 20


@pytest.mark.parametrize("lookup", ["none", "closest", "hstep"])
def test_spirl_variants_respect_budget(corridor, artifacts, lookup):
    task, demos = corridor
    r = im.run_spirl_episode(artifacts.spirl, DemoIndex(demos), task, EvalConfig(max_steps=15), np.array([1.5, 1.5, 0, 0]), lookup)
    assert r.length <= 15


def test_spirl_needs_current_state_prior(corridor, artifacts):
    task, demos = corridor
    with pytest.raises(sm.ConfigMismatchError):
        im.run_spirl_episode(artifacts.skills, DemoIndex(demos), task, EvalConfig(max_steps=5), np.zeros(4))


def test_evaluation_is_deterministic(artifacts):
    cfg = EvalConfig(max_steps=25, n_starts=3, repeats=2, seed=4)
    a = im.evaluate("fist", artifacts, cfg)
    b = im.evaluate("fist", artifacts, cfg)
    assert [e.length for e in a.episodes] == [e.length for e in b.episodes]
    assert a.n_episodes == 6
    assert [(e.start_id, e.repeat) for e in a.episodes] == [(k, r) for k in range(3) for r in range(2)]


def test_parallel_evaluation_matches_serial(artifacts):
    cfg = EvalConfig(max_steps=20, n_starts=2, seed=1)
    serial = im.evaluate("spirl", artifacts, cfg)
    parallel = im.evaluate("spirl", artifacts, cfg, jobs=2)
    assert [e.length for e in serial.episodes] == [e.length for e in parallel.episodes]


def test_missing_artifact_is_named(artifacts):
    partial = Artifacts(artifacts.task, artifacts.demos, skills=artifacts.skills)
    with pytest.raises(MissingArtifactError) as err:
        im.evaluate("fist", partial, EvalConfig(max_steps=1))
    assert err.value.artifact == "distance"


def test_policy_aliases():
    assert PolicyKind.parse("bc") is PolicyKind.BC_FT
    assert PolicyKind.parse("FIST-no-FT") is PolicyKind.FIST_NO_FT
    with pytest.raises(ValueError):
        PolicyKind.parse("dqn")


# behavioural cloning


def _single_transition():
    s = np.array([[0.3, -0.2, 0.1, 0.4]])
    return TrajectoryDataset([Trajectory(s, np.array([[0.5, -0.25]]))], 4, 2)


def test_bc_overfits_one_transition():
    ds = _single_transition()
    cfg = BCConfig(**{**TINY_BC.__dict__, "H": 1, "pretrain_epochs": 300, "finetune_epochs": 0, "lr": 3e-3})
    net, _ = im.train_bc(ds, ds, cfg)
    assert np.sum((net(ds[0].states[0]) - ds[0].actions[0]) ** 2) < 1e-3


def test_bc_zero_finetune_is_pure_bc():
    rng = np.random.default_rng(0)
    ds = TrajectoryDataset([Trajectory(rng.normal(size=(20, 4)), rng.normal(size=(20, 2)))], 4, 2)
    other = TrajectoryDataset([Trajectory(rng.normal(size=(20, 4)), rng.normal(size=(20, 2)))], 4, 2)
    cfg = BCConfig(**{**TINY_BC.__dict__, "finetune_epochs": 0})
    a, _ = im.train_bc(ds, other, cfg, seed=1)
    b, _ = im.train_bc(ds, ds, cfg, seed=1)
    s = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(a.forward(s).data, b.forward(s).data)


@pytest.mark.parametrize("train", [im.train_bc, im.train_goal_bc])
def test_bc_is_deterministic(train):
    rng = np.random.default_rng(0)
    ds = TrajectoryDataset([Trajectory(rng.normal(size=(30, 4)), rng.normal(size=(30, 2)))], 4, 2)
    a, ca = train(ds, ds, TINY_BC, seed=2)
    b, cb = train(ds, ds, TINY_BC, seed=2)
    assert ca == cb
    for name, value in a.params.state_dict().items():
        np.testing.assert_array_equal(value, b.params.state_dict()[name])


def test_goal_pairs_match_window_enumeration():
    rng = np.random.default_rng(0)
    trajs = [Trajectory(rng.normal(size=(T, 4)), rng.normal(size=(T, 2))) for T in (12, 4, 7)]
    H = 5
    expected = [(tr.states[t], tr.states[t + H - 1], tr.actions[t]) for tr in trajs for t in range(len(tr)) if t + H - 1 < len(tr)]
    s, g, a = im.goal_pairs(TrajectoryDataset(trajs, 4, 2), H)
    assert len(s) == len(expected) == 8 + 3
    for k, (es, eg, ea) in enumerate(expected):
        np.testing.assert_array_equal(s[k], es)
        np.testing.assert_array_equal(g[k], eg)
        np.testing.assert_array_equal(a[k], ea)


def test_goal_pairs_h1_repeats_current_state():
    rng = np.random.default_rng(0)
    ds = TrajectoryDataset([Trajectory(rng.normal(size=(6, 4)), rng.normal(size=(6, 2)))], 4, 2)
    s, g, _ = im.goal_pairs(ds, 1)
    np.testing.assert_array_equal(s, g)


def test_bc_checkpoint_roundtrip(tmp_path):
    net = im.BCNet(TINY_BC, 4, 2, seed=0, goal_conditioned=True)
    net.params.load_state_dict({k: v.astype(np.float32).astype(np.float64) for k, v in net.params.state_dict().items()})
    loaded = im.BCNet.load(net.save(tmp_path / "bc"))
    s = np.ones((2, 4))
    np.testing.assert_array_equal(loaded.forward(s, s).data, net.forward(s, s).data)


# statistics


def _report(lengths, successes, max_steps=2000):
    episodes = [EpisodeResult(n, ok, start_id=k) for k, (n, ok) in enumerate(zip(lengths, successes))]
    return EvalReport("fist", "left", max_steps, episodes)


def test_report_all_timeouts():
    rep = _report([2000] * 10, [False] * 10)
    assert rep.success_rate == 0.0 and rep.mean_length == 2000.0 and rep.normalized_score == 0.0


def test_report_all_same_length():
    rep = _report([150] * 10, [True] * 10)
    assert rep.mean_length == 150.0 and rep.stderr_length == 0.0 and rep.success_rate == 1.0


def test_report_matches_hand_recomputation(tmp_path):
    lengths = [120, 2000, 95, 310, 2000, 150, 130, 88, 400, 101]
    successes = [n < 2000 for n in lengths]
    rep = _report(lengths, successes)
    path = im.write_episode_log([rep], tmp_path / "episodes.jsonl")
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    n = len(rows)
    mean = sum(r["length"] for r in rows) / n
    var = sum((r["length"] - mean) ** 2 for r in rows) / (n - 1)
    assert rep.mean_length == pytest.approx(mean, abs=1e-12)
    assert rep.std_length == pytest.approx(math.sqrt(var), abs=1e-9)
    assert rep.stderr_length == pytest.approx(math.sqrt(var) / math.sqrt(n), abs=1e-9)
    assert rep.success_rate == pytest.approx(sum(r["success"] for r in rows) / n)
    assert rep.normalized_score == pytest.approx(sum((2000 - r["length"]) / 2000 for r in rows) / n)


def test_episode_log_roundtrip(tmp_path):
    a = _report([10, 20], [True, False])
    b = EvalReport("spirl", "left", 2000, [EpisodeResult(2000, False, start=[1.5, 2.5, 0.0, 0.0])])
    loaded = im.read_episode_log(im.write_episode_log([a, b], tmp_path / "log.jsonl"))
    assert [(r.policy, r.n_episodes) for r in loaded] == [("fist", 2), ("spirl", 1)]
    assert loaded[1].episodes[0].start == [1.5, 2.5, 0.0, 0.0]
    assert loaded[0].row() == a.row()


def test_malformed_log_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"policy": "fist"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        im.read_episode_log(path)


def test_report_csv_has_one_row_per_report(tmp_path):
    path = im.write_report_csv([_report([5], [True]), _report([7], [True])], tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == im.REPORT_FIELDS
    assert len(lines) == 3


@pytest.mark.parametrize("length,expected", [(2000, 0.0), (0, 1.0), (500, 0.75)])
def test_normalized_score(length, expected):
    assert im.normalized_score(length, 2000) == expected


def test_normalized_score_rejects_out_of_range():
    with pytest.raises(ValueError):
        im.normalized_score(2001, 2000)
    with pytest.raises(ValueError):
        im.normalized_score(1, 0)
