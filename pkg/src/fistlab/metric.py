"""Learned state distance, nearest-demo lookup and the H-step lookahead.

The encoder ``h`` is trained contrastively so that a state and the state
H-1 steps later on the same trajectory score higher under ``h(s)^T W h(s')``
than states drawn from other windows. At query time only ``h`` is used and
the distance is the squared Euclidean distance between embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .datastore import TrajectoryDataset, WindowSampler
from .maze import EnvConfig, MazeLayout, WaypointController, cell_of, plan_waypoints, step
from .numerics import MLP, AdamState, ParamSet, Tape, adam_step, load_params, save_params
from .numerics import autodiff as ad
from .skillmodel import ConfigMismatchError, Normalizer, TrainingDivergedError, steps_per_epoch, training_precision

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistanceConfig:
    H: int = 10
    embed_dim: int = 32
    hidden: int = 128
    n_hidden: int = 2
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 20
    train_dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2 for negatives")
        if self.H < 1 or self.epochs < 0 or self.embed_dim < 1 or self.hidden < 1 or self.lr <= 0:
            raise ValueError(f"invalid distance config {self}")


class DistanceEncoder:
    def __init__(self, config: DistanceConfig, state_dim: int, seed: int = 0, normalizer: Normalizer | None = None):
        self.config, self.state_dim = config, state_dim
        self.normalizer = normalizer or Normalizer.identity(state_dim)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
        self.params = ParamSet()
        self.body = MLP(self.params, "h", state_dim, config.embed_dim, config.hidden, config.n_hidden, rng)
        k = config.embed_dim
        self.W = self.params.add("W", np.eye(k) + rng.uniform(-1, 1, (k, k)) / np.sqrt(k))

    def embed(self, states) -> ad.Tensor:
        return self.body(self.normalizer(np.atleast_2d(states)))

    def embed_numpy(self, states) -> np.ndarray:
        return self.embed(states).data

    def logits(self, queries, keys) -> ad.Tensor:
        """(B, B) matrix with entry (i, j) = h(q_i)^T W h(k_j)."""
        return ad.matmul(ad.matmul(self.embed(queries), self.W), ad.transpose(self.embed(keys)))

    def copy(self) -> "DistanceEncoder":
        other = DistanceEncoder(self.config, self.state_dim, 0, self.normalizer)
        other.params.load_state_dict(self.params.state_dict())
        return other

    def save(self, path):
        meta = {
            "kind": "distance_encoder",
            "config": asdict(self.config),
            "state_dim": self.state_dim,
            "normalizer": self.normalizer.to_json(),
        }
        return save_params(self.params, path, meta)

    @classmethod
    def load(cls, path) -> "DistanceEncoder":
        state, meta = load_params(path)
        if meta.get("kind") != "distance_encoder":
            raise ConfigMismatchError(f"{path} is not a distance encoder checkpoint")
        enc = cls(DistanceConfig(**meta["config"]), meta["state_dim"], normalizer=Normalizer.from_json(meta["normalizer"]))
        enc.params.load_state_dict(state)
        return enc


def infonce_from_logits(logits) -> ad.Tensor:
    """Mean softmax cross-entropy of each row against its diagonal entry."""
    logits = ad.as_tensor(logits)
    B = logits.shape[0]
    if len(logits.shape) != 2 or logits.shape[1] != B:
        raise ad.ShapeError(f"logits must be square, got {logits.shape}")
    if B < 2:
        raise ValueError("InfoNCE needs at least two pairs so that negatives exist")
    diag = (np.arange(B), np.arange(B))
    return ad.neg(ad.mean(ad.log_softmax(logits, axis=-1)[diag]))


def infonce_loss(encoder: DistanceEncoder, queries, keys) -> ad.Tensor:
    queries, keys = np.atleast_2d(queries), np.atleast_2d(keys)
    if len(queries) != len(keys):
        raise ad.ShapeError(f"{len(queries)} queries but {len(keys)} keys")
    if len(queries) < 2:
        raise ValueError("InfoNCE needs at least two pairs so that negatives exist")
    return infonce_from_logits(encoder.logits(queries, keys))


def _pairs(sampler: WindowSampler, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    ids, starts = sampler.draw(batch_size, rng)
    last = sampler.H - 1
    q = np.stack([sampler._states[i][s] for i, s in zip(ids, starts)]).astype(np.float64)
    k = np.stack([sampler._states[i][s + last] for i, s in zip(ids, starts)]).astype(np.float64)
    return q, k


def _fit_distance(encoder: DistanceEncoder, dataset: TrajectoryDataset, epochs: int, rng, label: str) -> list[float]:
    cfg = encoder.config
    sampler = WindowSampler(dataset, cfg.H)
    n_steps = steps_per_epoch(dataset.n_transitions, cfg.H, cfg.batch_size)
    opt = AdamState(lr=cfg.lr)
    curve = []
    with training_precision(encoder.params, cfg.train_dtype):
        for epoch in range(epochs):
            for _ in range(n_steps):
                q, k = _pairs(sampler, cfg.batch_size, rng)
                with Tape() as tape:
                    loss = infonce_loss(encoder, q, k)
                    if not np.isfinite(loss.data):
                        raise TrainingDivergedError(f"{label} epoch {epoch}: InfoNCE loss is non-finite")
                    tape.backward(loss)
                adam_step(encoder.params, opt)
                curve.append(float(loss.data))
            if epoch % 5 == 0 or epoch == epochs - 1:
                log.info("%s epoch %d/%d loss %.4f", label, epoch + 1, epochs, np.mean(curve[-n_steps:]))
    return curve


def train_distance(
    dataset: TrajectoryDataset, config: DistanceConfig | None = None, seed: int = 0
) -> tuple[DistanceEncoder, list[float]]:
    config = config or DistanceConfig()
    encoder = DistanceEncoder(config, dataset.state_dim, seed, Normalizer.fit(dataset.all_states()))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    curve = _fit_distance(encoder, dataset, config.epochs, rng, "distance")
    return encoder, curve


def finetune_distance(
    encoder: DistanceEncoder, demos: TrajectoryDataset, epochs: int, seed: int = 0
) -> tuple[DistanceEncoder, list[float]]:
    """Optional extra InfoNCE training on the demo windows; returns a new encoder."""
    tuned = encoder.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    curve = _fit_distance(tuned, demos, epochs, rng, "distance-finetune")
    return tuned, curve


def separation_rate(
    encoder: DistanceEncoder, dataset: TrajectoryDataset, n_batches: int = 1000, batch_size: int = 128, seed: int = 0
) -> float:
    """Fraction of batches where true H-1-step pairs are closer on average than cross-trajectory pairs."""
    sampler = WindowSampler(dataset, encoder.config.H)
    if len(dataset) < 2:
        raise ValueError("cross-trajectory pairs need at least two trajectories")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    last = encoder.config.H - 1
    wins = 0
    for _ in range(n_batches):
        ids, starts = sampler.draw(batch_size, rng)
        q = np.stack([sampler._states[i][s] for i, s in zip(ids, starts)])
        k = np.stack([sampler._states[i][s + last] for i, s in zip(ids, starts)])
        # random partner from a different trajectory for every query
        pid, pstart = sampler.draw(batch_size, rng)
        clash = pid == ids
        while clash.any():
            pid[clash], pstart[clash] = sampler.draw(int(clash.sum()), rng)
            clash = pid == ids
        other = np.stack([sampler._states[i][s] for i, s in zip(pid, pstart)])
        hq, hk, ho = encoder.embed_numpy(q), encoder.embed_numpy(k), encoder.embed_numpy(other)
        pos = np.sum((hq - hk) ** 2, axis=1).mean()
        neg = np.sum((hq - ho) ** 2, axis=1).mean()
        wins += pos < neg
    return wins / n_batches


# query-time distances ---------------------------------------------------------

def distance(encoder: DistanceEncoder, s, s_other) -> float:
    a, b = encoder.embed_numpy(s), encoder.embed_numpy(s_other)
    if np.shape(s)[-1] != np.shape(s_other)[-1]:
        raise ad.ShapeError("state dimensions differ")
    return float(np.sum((a - b) ** 2))


def euclidean_distance(s, s_other) -> float:
    s, s_other = np.asarray(s, dtype=np.float64), np.asarray(s_other, dtype=np.float64)
    if s.shape != s_other.shape:
        raise ad.ShapeError(f"state shapes differ: {s.shape} vs {s_other.shape}")
    return float(np.sum((s - s_other) ** 2))


class DemoIndex:
    """Every demo state with its embedding; lookups are an exhaustive scan.

    ``encoder=None`` indexes raw states, which makes the lookup use plain
    Euclidean distance.
    """

    def __init__(self, demos: TrajectoryDataset, encoder: DistanceEncoder | None = None):
        if len(demos) == 0 or demos.n_transitions == 0:
            raise ValueError("cannot build an index over an empty demo set")
        self.encoder = encoder
        self.trajectories = [np.asarray(t.states, dtype=np.float64) for t in demos]
        self.lengths = np.array([len(t) for t in self.trajectories])
        self.states = np.concatenate(self.trajectories)
        self.traj_of = np.repeat(np.arange(len(self.lengths)), self.lengths)
        self.step_of = np.concatenate([np.arange(n) for n in self.lengths])
        self.embeddings = self._embed(self.states)

    def _embed(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return states if self.encoder is None else self.encoder.embed_numpy(states)

    def __len__(self) -> int:
        return len(self.states)

    def distances(self, s) -> np.ndarray:
        e = self._embed(s)[0]
        return np.sum((self.embeddings - e) ** 2, axis=1)

    def state(self, i: int, j: int) -> np.ndarray:
        return self.trajectories[i][j]


def nearest(index: DemoIndex, s) -> tuple[int, int]:
    """(trajectory, step) of the closest indexed state; ties go to the lowest (i, j)."""
    k = int(np.argmin(index.distances(s)))
    return int(index.traj_of[k]), int(index.step_of[k])


def lookahead_step(j: int, H: int, T: int) -> int:
    if not (0 <= j < T) or H < 1:
        raise IndexError(f"step {j} outside trajectory of length {T} (H={H})")
    return min(j + H - 1, T - 1)


def lookahead(index: DemoIndex, i: int, j: int, H: int) -> np.ndarray:
    return index.state(i, lookahead_step(j, H, int(index.lengths[i])))


def oracle_lookahead(layout: MazeLayout, env: EnvConfig, state, goal_cell, H: int) -> np.ndarray:
    """Where the waypoint controller actually takes ``state`` after H-1 steps."""
    state = np.asarray(state, dtype=np.float64)
    path = plan_waypoints(layout, cell_of(state), tuple(goal_cell))
    # head for the next cell; the current cell's centre would pull the agent back
    controller = WaypointController(path, env, index=min(1, len(path) - 1), layout=layout)
    for _ in range(H - 1):
        state = step(state, controller(state), layout, env)
    return state
