"""Semi-parametric imitation loop, baseline policies and evaluation statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .datastore import DemoSet, TrajectoryDataset, WindowSampler
from .maze import EnvConfig, MazeLayout, cell_center, evaluation_starts, reached, step, trajectory_rng
from .metric import DemoIndex, DistanceEncoder, lookahead, nearest, oracle_lookahead
from .numerics import MLP, AdamState, ParamSet, Tape, adam_step, load_params, save_params
from .numerics import autodiff as ad
from .skillmodel import (
    ConfigMismatchError,
    Normalizer,
    SkillModel,
    TrainingDivergedError,
    steps_per_epoch,
    training_precision,
)

log = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    FIST = "fist"
    FIST_EUC = "fist_euc"
    FIST_NO_FT = "fist_no_ft"
    FIST_NO_PRETRAIN = "fist_no_pretrain"
    FIST_ORACLE = "fist_oracle"
    SPIRL = "spirl"
    SPIRL_CLOSEST = "spirl_closest"
    SPIRL_HSTEP = "spirl_hstep"
    BC_FT = "bc_ft"
    GOAL_BC = "goal_bc"

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        key = name.strip().lower().replace("-", "_")
        aliases = {"bc": "bc_ft", "goalbc": "goal_bc", "oracle": "fist_oracle", "euc": "fist_euc"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown policy {name!r}; choose from {[k.value for k in cls]}") from None


class MissingArtifactError(LookupError):
    def __init__(self, policy: str, artifact: str):
        super().__init__(f"policy {policy} needs the {artifact!r} artifact, which has not been produced")
        self.policy, self.artifact = policy, artifact


class MalformedLogError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    max_steps: int = 2000
    resample_period: int = 1
    n_starts: int = 10
    repeats: int = 1
    seed: int = 0
    deterministic: bool = False
    record_trace: bool = False

    def __post_init__(self):
        if self.max_steps < 0 or self.n_starts < 1 or self.repeats < 1 or self.resample_period < 1:
            raise ValueError(f"invalid evaluation config {self}")


@dataclass
class MazeTask:
    """Downstream task: the full maze, a goal cell and the simulator constants."""

    layout: MazeLayout
    goal_cell: tuple
    env: EnvConfig = field(default_factory=EnvConfig)
    name: str = "task"

    @property
    def goal(self) -> np.ndarray:
        return cell_center(self.goal_cell)

    def step(self, state, action) -> np.ndarray:
        return step(state, action, self.layout, self.env)

    def success(self, state) -> bool:
        return reached(state, self.goal, self.env)

    @classmethod
    def from_demos(cls, layout: MazeLayout, demos: DemoSet, env: EnvConfig | None = None) -> "MazeTask":
        env = env or EnvConfig()
        return cls(layout, tuple(demos.goal["cell"]), env, demos.goal.get("region", "task"))


@dataclass
class EpisodeResult:
    length: int
    success: bool
    start_id: int = 0
    repeat: int = 0
    seed: int = 0
    trace: np.ndarray | None = None
    start: list | None = None

    def to_json(self, policy: str, task: str) -> dict:
        return {
            "policy": policy,
            "task": task,
            "start_id": self.start_id,
            "start": self.start,
            "repeat": self.repeat,
            "length": self.length,
            "success": self.success,
            "seed": self.seed,
        }


# policies ----------------------------------------------------------------------

class SkillPolicy:
    """Decode actions from a skill chosen every ``period`` steps.

    ``condition(state)`` returns the prior inputs ``(s_now, s_target)``; the
    prior's output distribution is then sampled (or its mean taken) to get z.
    """

    def __init__(
        self,
        model: SkillModel,
        condition: Callable,
        period: int = 1,
        deterministic: bool = False,
        sample_z: Callable | None = None,
    ):
        if not 1 <= period <= model.config.H:
            raise ValueError(f"resample period {period} must lie in [1, H={model.config.H}]")
        self.model, self.condition, self.period = model, condition, period
        self.deterministic, self.sample_z = deterministic, sample_z
        self.z = None

    def reset(self) -> None:
        self.z = None

    def choose_skill(self, state, rng) -> np.ndarray:
        s_now, s_target = self.condition(state)
        s_target = None if s_target is None else np.atleast_2d(s_target)
        g = self.model.prior(np.atleast_2d(s_now), s_target)
        mean, std = g.mean.data[0], np.exp(g.log_std.data[0])
        if self.sample_z is not None:
            return np.asarray(self.sample_z(mean, std, rng), dtype=np.float64)
        if self.deterministic:
            return mean
        return mean + std * rng.standard_normal(mean.shape)

    def act(self, state, t: int, rng) -> np.ndarray:
        if t % self.period == 0 or self.z is None:
            self.z = self.choose_skill(state, rng)
        a = self.model.decode(np.atleast_2d(state), np.atleast_2d(self.z)).data[0]
        return np.clip(a, -1.0, 1.0)


class ReactivePolicy:
    """Stateless ``a = f(state)`` wrapper used by the BC baselines."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def reset(self) -> None:
        pass

    def act(self, state, t: int, rng) -> np.ndarray:
        return np.clip(self.fn(state), -1.0, 1.0)


def fist_condition(index: DemoIndex, H: int) -> Callable:
    def condition(state):
        i, j = nearest(index, state)
        return state, lookahead(index, i, j, H)

    return condition


def spirl_condition(index: DemoIndex | None, H: int, lookup: str) -> Callable:
    if lookup == "none":
        return lambda state: (state, None)
    if index is None:
        raise ValueError(f"lookup={lookup} needs a demo index")
    if lookup == "closest":
        return lambda state: (index.state(*nearest(index, state)), None)
    if lookup == "hstep":
        return lambda state: (lookahead(index, *nearest(index, state), H), None)
    raise ValueError(f"unknown lookup {lookup!r}; choose none, closest or hstep")


def oracle_condition(task: MazeTask, H: int) -> Callable:
    return lambda state: (state, oracle_lookahead(task.layout, task.env, state, task.goal_cell, H))


def run_episode(policy, task: MazeTask, start_state, config: EvalConfig, rng) -> EpisodeResult:
    state = np.asarray(start_state, dtype=np.float64)
    policy.reset()
    trace = [state] if config.record_trace else None
    for t in range(config.max_steps):
        if task.success(state):
            return EpisodeResult(t, True, trace=None if trace is None else np.array(trace))
        action = policy.act(state, t, rng)
        if not np.all(np.isfinite(action)):
            raise FloatingPointError(f"policy produced a non-finite action at step {t}")
        state = task.step(state, action)
        if trace is not None:
            trace.append(state)
    success = config.max_steps > 0 and task.success(state)
    return EpisodeResult(config.max_steps, bool(success), trace=None if trace is None else np.array(trace))


def run_fist_episode(model, encoder, demo_index, task, config, start_state, rng=None) -> EpisodeResult:
    """One rollout of lookup, lookahead, skill inference and decoding.

    ``encoder`` is only used when ``demo_index`` is None; otherwise the index
    already carries its embeddings.
    """
    if demo_index is None:
        raise ValueError("FIST needs a demo index")
    del encoder
    policy = SkillPolicy(model, fist_condition(demo_index, model.config.H), config.resample_period, config.deterministic)
    return run_episode(policy, task, start_state, config, rng or np.random.default_rng(config.seed))


def run_spirl_episode(model, demo_index, task, config, start_state, lookup: str = "none", rng=None) -> EpisodeResult:
    if model.conditioning != "current":
        raise ConfigMismatchError("SPiRL rollouts need a model whose prior sees only the current state")
    policy = SkillPolicy(
        model, spirl_condition(demo_index, model.config.H, lookup), config.resample_period, config.deterministic
    )
    return run_episode(policy, task, start_state, config, rng or np.random.default_rng(config.seed))


# behavioural cloning baselines ----------------------------------------------------

@dataclass(frozen=True)
class BCConfig:
    H: int = 10
    hidden: int = 128
    n_hidden: int = 5
    lr: float = 1e-3
    batch_size: int = 128
    pretrain_epochs: int = 200
    finetune_epochs: int = 50
    finetune_cycles: int = 10
    train_dtype: str = "float32"

    def __post_init__(self):
        if self.H < 1 or self.batch_size < 1 or self.lr <= 0 or self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError(f"invalid BC config {self}")


class BCNet:
    """Feed-forward regressor to the action; ``goal_conditioned`` adds a future-state input."""

    def __init__(self, config: BCConfig, state_dim, action_dim, seed=0, goal_conditioned=False, normalizer=None):
        self.config, self.state_dim, self.action_dim = config, state_dim, action_dim
        self.goal_conditioned = goal_conditioned
        self.normalizer = normalizer or Normalizer.identity(state_dim)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9 if goal_conditioned else 10]))
        self.params = ParamSet()
        n_in = 2 * state_dim if goal_conditioned else state_dim
        self.net = MLP(self.params, "bc", n_in, action_dim, config.hidden, config.n_hidden, rng)

    def forward(self, states, targets=None) -> ad.Tensor:
        x = [self.normalizer(np.atleast_2d(states))]
        if self.goal_conditioned:
            if targets is None:
                raise ValueError("goal-conditioned policy needs a target state")
            x.append(self.normalizer(np.atleast_2d(targets)))
        return self.net(np.concatenate(x, axis=-1))

    def __call__(self, state, target=None) -> np.ndarray:
        return self.forward(state, target).data[0]

    def save(self, path):
        meta = {
            "kind": "bc_policy",
            "config": asdict(self.config),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "goal_conditioned": self.goal_conditioned,
            "normalizer": self.normalizer.to_json(),
        }
        return save_params(self.params, path, meta)

    @classmethod
    def load(cls, path) -> "BCNet":
        state, meta = load_params(path)
        if meta.get("kind") != "bc_policy":
            raise ConfigMismatchError(f"{path} is not a BC checkpoint")
        net = cls(
            BCConfig(**meta["config"]),
            meta["state_dim"],
            meta["action_dim"],
            goal_conditioned=meta["goal_conditioned"],
            normalizer=Normalizer.from_json(meta["normalizer"]),
        )
        net.params.load_state_dict(state)
        return net


def bc_loss(net: BCNet, states, actions, targets=None) -> ad.Tensor:
    """Mean squared action error."""
    err = ad.sub(net.forward(states, targets), np.asarray(actions, dtype=np.float64))
    return ad.mean(ad.square(err))


def goal_pairs(dataset: TrajectoryDataset, H: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every (s_t, s_{t+H-1}, a_t) triple with both states in the same trajectory."""
    states, targets, actions = [], [], []
    for tr in dataset:
        n = len(tr) - H + 1
        if n <= 0:
            continue
        states.append(tr.states[:n])
        targets.append(tr.states[H - 1 : H - 1 + n])
        actions.append(tr.actions[:n])
    if not states:
        raise ValueError(f"no trajectory of length >= {H}")
    return tuple(np.concatenate(x).astype(np.float64) for x in (states, targets, actions))


def _transitions(dataset: TrajectoryDataset, goal_conditioned: bool, H: int):
    if goal_conditioned:
        return goal_pairs(dataset, H)
    s = np.concatenate([t.states for t in dataset]).astype(np.float64)
    a = np.concatenate([t.actions for t in dataset]).astype(np.float64)
    return s, None, a


def _fit_bc(net: BCNet, dataset: TrajectoryDataset, epochs: int, cycles: int, rng, label: str) -> list[float]:
    cfg = net.config
    if epochs == 0:
        return []
    if dataset.n_transitions == 0:
        raise ValueError(f"{label}: empty dataset")
    states, targets, actions = _transitions(dataset, net.goal_conditioned, cfg.H)
    # same number of updates per epoch as the skill model sees
    n_steps = steps_per_epoch(dataset.n_transitions, cfg.H, cfg.batch_size, cycles)
    opt = AdamState(lr=cfg.lr)
    curve = []
    with training_precision(net.params, cfg.train_dtype):
        for epoch in range(epochs):
            for _ in range(n_steps):
                k = rng.integers(len(states), size=cfg.batch_size)
                with Tape() as tape:
                    loss = bc_loss(net, states[k], actions[k], None if targets is None else targets[k])
                    if not np.isfinite(loss.data):
                        raise TrainingDivergedError(f"{label} epoch {epoch}: loss is non-finite")
                    tape.backward(loss)
                adam_step(net.params, opt)
                curve.append(float(loss.data))
            if epoch % 10 == 0 or epoch == epochs - 1:
                log.info("%s epoch %d/%d loss %.5f", label, epoch + 1, epochs, np.mean(curve[-n_steps:]))
    return curve


def _train_regressor(dataset, demos, config, seed, goal_conditioned, label) -> tuple[BCNet, list[float]]:
    if len(dataset) == 0 or len(demos) == 0:
        raise ValueError("both the offline corpus and the demos must be nonempty")
    net = BCNet(config, dataset.state_dim, dataset.action_dim, seed, goal_conditioned, Normalizer.fit(dataset.all_states()))
    stream = 11 if goal_conditioned else 12
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    curve = _fit_bc(net, dataset, config.pretrain_epochs, 1, rng, f"{label}-pretrain")
    curve += _fit_bc(net, demos, config.finetune_epochs, config.finetune_cycles, rng, f"{label}-finetune")
    return net, curve


def train_bc(dataset, demos, config: BCConfig | None = None, seed: int = 0) -> tuple[BCNet, list[float]]:
    """pi(a | s): pretrain on the corpus, then fine-tune on the demos."""
    return _train_regressor(dataset, demos, config or BCConfig(), seed, False, "bc")


def train_goal_bc(dataset, demos, config: BCConfig | None = None, seed: int = 0) -> tuple[BCNet, list[float]]:
    """q(a_t | s_t, s_{t+H-1}): atomic-action inverse model."""
    return _train_regressor(dataset, demos, config or BCConfig(), seed, True, "goal-bc")


# evaluation ----------------------------------------------------------------------

@dataclass
class Artifacts:
    """Everything an evaluation may need; unused fields stay None."""

    task: MazeTask
    demos: DemoSet
    skills: SkillModel | None = None  # fine-tuned
    skills_pretrained: SkillModel | None = None
    skills_scratch: SkillModel | None = None
    spirl: SkillModel | None = None  # fine-tuned
    distance: DistanceEncoder | None = None
    bc: BCNet | None = None
    goal_bc: BCNet | None = None


REQUIREMENTS = {
    PolicyKind.FIST: ("skills", "distance"),
    PolicyKind.FIST_EUC: ("skills",),
    PolicyKind.FIST_NO_FT: ("skills_pretrained", "distance"),
    PolicyKind.FIST_NO_PRETRAIN: ("skills_scratch", "distance"),
    PolicyKind.FIST_ORACLE: ("skills",),
    PolicyKind.SPIRL: ("spirl",),
    PolicyKind.SPIRL_CLOSEST: ("spirl", "distance"),
    PolicyKind.SPIRL_HSTEP: ("spirl", "distance"),
    PolicyKind.BC_FT: ("bc",),
    PolicyKind.GOAL_BC: ("goal_bc", "distance"),
}


def check_artifacts(kind: PolicyKind, artifacts: Artifacts) -> None:
    for name in REQUIREMENTS[kind]:
        if getattr(artifacts, name) is None:
            raise MissingArtifactError(kind.value, name)


def build_policy(kind: PolicyKind, artifacts: Artifacts, config: EvalConfig):
    """Resolve a policy kind to an object with ``reset()`` and ``act(state, t, rng)``."""
    kind = PolicyKind(kind)
    check_artifacts(kind, artifacts)
    a, period, det = artifacts, config.resample_period, config.deterministic

    def index(encoder):
        return DemoIndex(a.demos, encoder)

    if kind in (PolicyKind.FIST, PolicyKind.FIST_NO_FT, PolicyKind.FIST_NO_PRETRAIN):
        model = {PolicyKind.FIST: a.skills, PolicyKind.FIST_NO_FT: a.skills_pretrained}.get(kind, a.skills_scratch)
        return SkillPolicy(model, fist_condition(index(a.distance), model.config.H), period, det)
    if kind is PolicyKind.FIST_EUC:
        return SkillPolicy(a.skills, fist_condition(index(None), a.skills.config.H), period, det)
    if kind is PolicyKind.FIST_ORACLE:
        return SkillPolicy(a.skills, oracle_condition(a.task, a.skills.config.H), period, det)
    if kind in (PolicyKind.SPIRL, PolicyKind.SPIRL_CLOSEST, PolicyKind.SPIRL_HSTEP):
        lookup = {PolicyKind.SPIRL: "none", PolicyKind.SPIRL_CLOSEST: "closest"}.get(kind, "hstep")
        idx = None if lookup == "none" else index(a.distance)
        return SkillPolicy(a.spirl, spirl_condition(idx, a.spirl.config.H, lookup), period, det)
    if kind is PolicyKind.BC_FT:
        return ReactivePolicy(a.bc)
    idx, H = index(a.distance), a.goal_bc.config.H
    return ReactivePolicy(lambda s: a.goal_bc(s, lookahead(idx, *nearest(idx, s), H)))


def start_states(task: MazeTask, config: EvalConfig) -> list[np.ndarray]:
    """Fixed starting states outside the goal's region, drawn once from the seed."""
    cells = evaluation_starts(task.layout, task.name if task.name in task.layout.regions else None, config.n_starts, config.seed)
    return [np.array([*cell_center(c), 0.0, 0.0]) for c in cells]


def episode_rng(seed: int, start_id: int, repeat: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 30_000 + int(start_id), int(repeat)]))


def _run_one(args) -> EpisodeResult:
    kind, artifacts, config, start_id, repeat, start = args
    policy = build_policy(kind, artifacts, config)
    result = run_episode(policy, artifacts.task, start, config, episode_rng(config.seed, start_id, repeat))
    result.start_id, result.repeat, result.seed = start_id, repeat, config.seed
    result.start = [float(x) for x in start]
    return result


@dataclass
class EvalReport:
    policy: str
    task: str
    max_steps: int
    episodes: list = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def _lengths(self) -> np.ndarray:
        return np.array([e.length for e in self.episodes], dtype=np.float64)

    def _successes(self) -> np.ndarray:
        return np.array([e.success for e in self.episodes], dtype=np.float64)

    @property
    def mean_length(self) -> float:
        return float(self._lengths().mean())

    @property
    def std_length(self) -> float:
        return float(self._lengths().std(ddof=1)) if self.n_episodes > 1 else 0.0

    @property
    def stderr_length(self) -> float:
        return self.std_length / math.sqrt(self.n_episodes)

    @property
    def success_rate(self) -> float:
        return float(self._successes().mean())

    @property
    def success_std(self) -> float:
        return float(self._successes().std(ddof=1)) if self.n_episodes > 1 else 0.0

    @property
    def normalized_score(self) -> float:
        # fsum keeps the value independent of summation order
        return math.fsum(normalized_score(e.length, self.max_steps) for e in self.episodes) / self.n_episodes

    def row(self) -> dict:
        return {
            "policy": self.policy,
            "task": self.task,
            "n_episodes": self.n_episodes,
            "mean_length": self.mean_length,
            "std_length": self.std_length,
            "stderr_length": self.stderr_length,
            "success_rate": self.success_rate,
            "success_std": self.success_std,
            "normalized_score": self.normalized_score,
            "max_steps": self.max_steps,
        }


def evaluate(kind, artifacts: Artifacts, config: EvalConfig | None = None, jobs: int = 1) -> EvalReport:
    """Roll out ``n_starts x repeats`` episodes from the fixed starts."""
    config = config or EvalConfig()
    kind = PolicyKind(kind)
    check_artifacts(kind, artifacts)
    starts = start_states(artifacts.task, config)
    work = [(kind, artifacts, config, k, r, s) for k, s in enumerate(starts) for r in range(config.repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            episodes = list(pool.map(_run_one, work))
    else:
        episodes = [_run_one(w) for w in work]
    report = EvalReport(kind.value, artifacts.task.name, config.max_steps, episodes)
    log.info(
        "%s on %s: success %.2f, length %.1f +- %.1f",
        kind.value, report.task, report.success_rate, report.mean_length, report.stderr_length,
    )
    return report


def normalized_score(episode_length, max_length) -> float:
    if max_length <= 0:
        raise ValueError("max_length must be positive")
    if not 0 <= episode_length <= max_length:
        raise ValueError(f"episode length {episode_length} outside [0, {max_length}]")
    return (max_length - episode_length) / max_length


# persistence -------------------------------------------------------------------

REPORT_FIELDS = [
    "policy", "task", "n_episodes", "mean_length", "std_length", "stderr_length",
    "success_rate", "success_std", "normalized_score", "max_steps",
]


def write_episode_log(reports, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rep in reports:
            for e in rep.episodes:
                fh.write(json.dumps({**e.to_json(rep.policy, rep.task), "max_steps": rep.max_steps}, sort_keys=True) + "\n")
    return path


def read_episode_log(path) -> list[EvalReport]:
    """Regroup a JSON-lines episode log into one report per (policy, task)."""
    reports: dict[tuple, EvalReport] = {}
    with Path(path).open() as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                key = (d["policy"], d["task"])
                ep = EpisodeResult(int(d["length"]), bool(d["success"]), int(d["start_id"]), int(d["repeat"]), int(d["seed"]))
                ep.start = d.get("start")
                max_steps = int(d["max_steps"])
            except (ValueError, KeyError, TypeError) as err:
                raise MalformedLogError(f"{path}:{n}: malformed episode record ({err})") from err
            reports.setdefault(key, EvalReport(key[0], key[1], max_steps)).episodes.append(ep)
    return list(reports.values())


def write_report_csv(reports, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rep.row().items()})
    return path
