"""Skill latent-variable model with an inverse skill-dynamics prior.

* encoder  q(z | s_t, a_t, ..., s_{t+H-1}, a_{t+H-1})   LSTM -> diagonal Gaussian
* decoder  pi(a | s, z)                                  MLP  -> action mean, unit variance
* prior    q(z | s_t, s_{t+H-1})                          MLP  -> diagonal Gaussian

With ``conditioning="current"`` the prior only sees ``s_t``; that is the
state-conditioned skill prior of the SPiRL baseline, trained by the same loop.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace

import numpy as np

from .datastore import SubTrajectory, TrajectoryDataset, WindowSampler
from .numerics import autodiff as ad
from .numerics import (
    MLP,
    AdamState,
    DiagGaussian,
    LSTMCell,
    Linear,
    ParamSet,
    Tape,
    adam_step,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_rsample,
    load_params,
    save_params,
)

log = logging.getLogger(__name__)

CONDITIONINGS = ("future", "current")


class TrainingDivergedError(FloatingPointError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SkillModelConfig:
    H: int = 10
    z_dim: int = 128
    hidden: int = 128
    encoder_layers: int = 1
    decoder_layers: int = 5
    prior_layers: int = 5
    beta: float = 1e-2
    lr: float = 1e-3
    batch_size: int = 128
    pretrain_epochs: int = 200
    finetune_epochs: int = 50
    pretrain_cycles: int = 1
    finetune_cycles: int = 10
    train_dtype: str = "float32"

    def __post_init__(self):
        if self.H < 2:
            raise ValueError("H must be at least 2")
        if self.encoder_layers != 1:
            raise ValueError("only a single recurrent layer is supported")
        if self.train_dtype not in ("float32", "float64"):
            raise ValueError("train_dtype must be float32 or float64")
        for k, v in asdict(self).items():
            if k not in ("beta", "pretrain_epochs", "finetune_epochs", "train_dtype") and v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.beta < 0 or self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("beta and epoch counts must be non-negative")


def steps_per_epoch(n_transitions: int, H: int, batch_size: int, cycles: int = 1) -> int:
    """Batches per epoch: enough H-windows to cover the corpus once, times ``cycles``."""
    return cycles * max(1, math.ceil(n_transitions / (H * batch_size)))


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray) -> "Normalizer":
        states = np.asarray(states, dtype=np.float64)
        return cls(states.mean(axis=0), np.maximum(states.std(axis=0), 1e-6))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, states) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


class SkillModel:
    def __init__(
        self,
        config: SkillModelConfig,
        state_dim: int,
        action_dim: int,
        seed: int = 0,
        conditioning: str = "future",
        normalizer: Normalizer | None = None,
    ):
        if conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}")
        self.config, self.state_dim, self.action_dim = config, state_dim, action_dim
        self.conditioning = conditioning
        self.normalizer = normalizer or Normalizer.identity(state_dim)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        h, z = config.hidden, config.z_dim
        self.params = ParamSet()
        self.encoder = LSTMCell(self.params, "enc.lstm", state_dim + action_dim, h, rng)
        self.encoder_head = Linear(self.params, "enc.head", h, 2 * z, rng)
        self.decoder = MLP(self.params, "dec", state_dim + z, action_dim, h, config.decoder_layers, rng)
        prior_in = 2 * state_dim if conditioning == "future" else state_dim
        self.prior_net = MLP(self.params, "prior", prior_in, 2 * z, h, config.prior_layers, rng)

    # parameter groups
    @property
    def phi(self) -> ParamSet:
        return self.params.subset("enc.")

    @property
    def theta(self) -> ParamSet:
        return self.params.subset("dec.")

    @property
    def psi(self) -> ParamSet:
        return self.params.subset("prior.")

    def encode(self, states: np.ndarray, actions: np.ndarray) -> DiagGaussian:
        """Posterior over z for a batch of (B, H, .) windows."""
        s = self.normalizer(states)
        x = np.concatenate([s, np.asarray(actions, dtype=np.float64)], axis=-1)
        h, _ = self.encoder.unroll([x[:, t] for t in range(x.shape[1])])
        return DiagGaussian.from_output(self.encoder_head(h))

    def decode(self, states: np.ndarray, z) -> ad.Tensor:
        """Action means for (N, state_dim) states and (N, z_dim) skills."""
        return self.decoder(ad.concat([self.normalizer(states), z], axis=-1))

    def prior(self, s_now: np.ndarray, s_target: np.ndarray | None = None) -> DiagGaussian:
        inputs = [self.normalizer(s_now)]
        if self.conditioning == "future":
            if s_target is None:
                raise ValueError("future-conditioned prior needs a target state")
            inputs.append(self.normalizer(s_target))
        return DiagGaussian.from_output(self.prior_net(np.concatenate(inputs, axis=-1)))

    def prior_for_window(self, states: np.ndarray) -> DiagGaussian:
        return self.prior(states[:, 0], states[:, -1])

    def copy(self) -> "SkillModel":
        other = SkillModel(self.config, self.state_dim, self.action_dim, 0, self.conditioning, self.normalizer)
        other.params.load_state_dict(self.params.state_dict())
        return other

    # persistence
    def metadata(self) -> dict:
        return {
            "kind": "skill_model",
            "config": asdict(self.config),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "conditioning": self.conditioning,
            "normalizer": self.normalizer.to_json(),
        }

    def save(self, path):
        return save_params(self.params, path, self.metadata())

    @classmethod
    def load(cls, path, expect_H: int | None = None) -> "SkillModel":
        state, meta = load_params(path)
        if meta.get("kind") != "skill_model":
            raise ConfigMismatchError(f"{path} is not a skill model checkpoint")
        config = SkillModelConfig(**meta["config"])
        if expect_H is not None and config.H != expect_H:
            raise ConfigMismatchError(f"checkpoint H={config.H} but evaluation expects H={expect_H}")
        model = cls(
            config,
            meta["state_dim"],
            meta["action_dim"],
            conditioning=meta["conditioning"],
            normalizer=Normalizer.from_json(meta["normalizer"]),
        )
        model.params.load_state_dict(state)
        return model


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        states, actions = batch
    else:
        batch = list(batch)
        if not batch:
            raise ValueError("empty batch")
        if not isinstance(batch[0], SubTrajectory):
            raise TypeError("batch must be (states, actions) arrays or SubTrajectory items")
        states = np.stack([b.states for b in batch])
        actions = np.stack([b.actions for b in batch])
    if len(states) == 0:
        raise ValueError("empty batch")
    return np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)


def _check_finite(value: ad.Tensor, what: str, states: np.ndarray) -> None:
    if not np.all(np.isfinite(value.data)):
        raise TrainingDivergedError(
            f"{what} is non-finite on a batch of {len(states)} windows "
            f"(state range {np.min(states):.3g}..{np.max(states):.3g})"
        )


def loss_terms(
    model: SkillModel, batch, beta: float, noise: np.ndarray | None = None, rng=None, prior_target=None
) -> dict:
    """All joint-loss pieces from a single encoder pass.

    ``noise`` is the standard-normal draw for the reparameterized skill; if it
    is omitted one is drawn from ``rng``. ``prior_target`` replaces the
    (gradient-stopped) posterior that the prior is fit to; finite-difference
    checks pass it so that perturbing the encoder leaves the target fixed,
    which is exactly what the stop-gradient means.
    """
    states, actions = _as_arrays(batch)
    B, H = states.shape[:2]
    q = model.encode(states, actions)
    if noise is None:
        noise = (rng or np.random.default_rng()).standard_normal(q.mean.shape)
    z = gaussian_rsample(q, noise)
    z_steps = ad.reshape(ad.add(ad.reshape(z, (B, 1, -1)), np.zeros((B, H, z.shape[-1]))), (B * H, -1))
    mean_a = model.decode(states.reshape(B * H, -1), z_steps)
    unit = DiagGaussian(mean_a, np.zeros(mean_a.shape))
    rec = ad.neg(ad.mean(gaussian_log_prob(unit, actions.reshape(B * H, -1))))
    reg = ad.mean(gaussian_kl(q, DiagGaussian.standard(q.mean.shape[-1], B)))
    # stop-gradient: the prior fits a frozen posterior, so this term trains psi only
    target = q.detach() if prior_target is None else prior_target.detach()
    prior = ad.mean(gaussian_kl(target, model.prior_for_window(states)))
    total = rec + beta * reg + prior
    for name, v in (("reconstruction loss", rec), ("KL regularizer", reg), ("prior loss", prior)):
        _check_finite(v, name, states)
    return {"rec": rec, "reg": reg, "prior": prior, "total": total}


def elbo_terms(model: SkillModel, batch, beta: float, noise=None, rng=None) -> tuple[ad.Tensor, ad.Tensor]:
    t = loss_terms(model, batch, beta, noise, rng)
    return t["rec"], t["reg"]


def prior_loss(model: SkillModel, batch, noise=None, rng=None) -> ad.Tensor:
    return loss_terms(model, batch, 0.0, noise, rng)["prior"]


def joint_loss(model: SkillModel, batch, beta: float, noise=None, rng=None, prior_target=None) -> ad.Tensor:
    return loss_terms(model, batch, beta, noise, rng, prior_target)["total"]


@contextmanager
def training_precision(params: ParamSet, dtype: str):
    """Train in ``dtype``; parameters are returned to float64 afterwards."""
    params.astype(np.dtype(dtype))
    try:
        with ad.default_dtype(dtype):
            yield
    finally:
        params.astype(np.float64)


def _fit(model: SkillModel, dataset: TrajectoryDataset, epochs: int, cycles: int, rng, label: str) -> list[float]:
    cfg = model.config
    if epochs == 0:
        return []
    sampler = WindowSampler(dataset, cfg.H)
    n_steps = steps_per_epoch(dataset.n_transitions, cfg.H, cfg.batch_size, cycles)
    opt = AdamState(lr=cfg.lr)
    curve = []
    with training_precision(model.params, cfg.train_dtype):
        for epoch in range(epochs):
            for _ in range(n_steps):
                batch = sampler.sample_arrays(cfg.batch_size, rng)
                noise = rng.standard_normal((cfg.batch_size, cfg.z_dim))
                with Tape() as tape:
                    try:
                        loss = joint_loss(model, batch, cfg.beta, noise)
                    except TrainingDivergedError as err:
                        raise TrainingDivergedError(f"{label} epoch {epoch}: {err}") from err
                    tape.backward(loss)
                adam_step(model.params, opt)
                curve.append(float(loss.data))
            if epoch % 10 == 0 or epoch == epochs - 1:
                log.info("%s epoch %d/%d loss %.4f", label, epoch + 1, epochs, np.mean(curve[-n_steps:]))
    return curve


def pretrain(
    dataset: TrajectoryDataset,
    config: SkillModelConfig,
    seed: int = 0,
    conditioning: str = "future",
) -> tuple[SkillModel, list[float]]:
    """Fit encoder, decoder and prior jointly on the offline corpus."""
    model = SkillModel(
        config, dataset.state_dim, dataset.action_dim, seed, conditioning, Normalizer.fit(dataset.all_states())
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    curve = _fit(model, dataset, config.pretrain_epochs, config.pretrain_cycles, rng, "pretrain")
    return model, curve


def finetune(
    model: SkillModel,
    demos: TrajectoryDataset,
    config: SkillModelConfig | None = None,
    seed: int = 0,
) -> tuple[SkillModel, list[float]]:
    """Continue joint-loss training of every parameter on the demo windows only.

    Returns a new model; the input model is left untouched.
    """
    config = config or model.config
    tuned = model.copy()
    tuned.config = replace(tuned.config, **{k: getattr(config, k) for k in ("beta", "lr", "batch_size")})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    curve = _fit(tuned, demos, config.finetune_epochs, config.finetune_cycles, rng, "finetune")
    return tuned, curve


def train_from_scratch(
    demos: TrajectoryDataset, config: SkillModelConfig, seed: int = 0, conditioning: str = "future"
) -> tuple[SkillModel, list[float]]:
    """No-pretraining ablation: a fresh model fit on demos with the fine-tuning budget."""
    model = SkillModel(config, demos.state_dim, demos.action_dim, seed, conditioning, Normalizer.fit(demos.all_states()))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    curve = _fit(model, demos, config.finetune_epochs, config.finetune_cycles, rng, "scratch")
    return model, curve


def evaluate_loss(model: SkillModel, dataset: TrajectoryDataset, seed: int = 0, term: str = "total") -> float:
    """Deterministic loss over every window of ``dataset`` (fixed noise)."""
    states, actions = WindowSampler(dataset, model.config.H).all_arrays()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(states), model.config.z_dim))
    return float(loss_terms(model, (states, actions), model.config.beta, noise)[term].data)


def infer_skill(model: SkillModel, s_now, s_target=None) -> DiagGaussian:
    s_now = np.atleast_2d(s_now)
    s_target = None if s_target is None else np.atleast_2d(s_target)
    g = model.prior(s_now, s_target)
    return DiagGaussian(g.mean.data[0], g.log_std.data[0])


def decode_action(model: SkillModel, s, z, clip: float = 1.0) -> np.ndarray:
    out = model.decode(np.atleast_2d(s), np.atleast_2d(ad.as_tensor(z).data)).data[0]
    return np.clip(out, -clip, clip)
