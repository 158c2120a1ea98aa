"""Parameter containers and the three network bodies used by every model."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ParamSet:
    """Ordered name -> Tensor mapping; every entry is a trainable leaf."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def subset(self, prefix: str) -> "ParamSet":
        sub = ParamSet()
        for name, p in self._params.items():
            if name.startswith(prefix):
                sub._params[name] = p
        return sub

    def merge(self, other: "ParamSet") -> "ParamSet":
        for name, p in other.items():
            if name in self._params:
                raise KeyError(f"duplicate parameter {name!r}")
            self._params[name] = p
        return self

    def astype(self, dtype) -> "ParamSet":
        for p in self._params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            value = np.asarray(state[name], dtype=ad.DTYPE)
            if value.shape != p.shape:
                raise ad.ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, params: ParamSet, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = params.add(f"{name}.weight", _uniform_fan_in(rng, (n_out, n_in), n_in))
        self.bias = params.add(f"{name}.bias", _uniform_fan_in(rng, (n_out,), n_in))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class MLP:
    """Feed-forward stack: ``n_hidden`` leaky-ReLU layers then a linear head."""

    def __init__(
        self,
        params: ParamSet,
        name: str,
        n_in: int,
        n_out: int,
        hidden: int,
        n_hidden: int,
        rng: np.random.Generator,
    ):
        sizes = [n_in] + [hidden] * n_hidden + [n_out]
        self.layers = [
            Linear(params, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = ad.leaky_relu(layer(h))
        return self.layers[-1](h)


class LSTMCell:
    """Single-layer LSTM cell with gate order (input, forget, candidate, output)."""

    def __init__(self, params: ParamSet, name: str, n_in: int, hidden: int, rng: np.random.Generator):
        self.n_in, self.hidden = n_in, hidden
        self.w_ih = params.add(f"{name}.w_ih", _uniform_fan_in(rng, (4 * hidden, n_in), hidden))
        self.w_hh = params.add(f"{name}.w_hh", _uniform_fan_in(rng, (4 * hidden, hidden), hidden))
        self.bias = params.add(f"{name}.bias", _uniform_fan_in(rng, (4 * hidden,), hidden))

    def __call__(self, x, state):
        return recurrent_step(x, state, self.w_ih, self.w_hh, self.bias)

    def initial_state(self, batch: int | None = None):
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def unroll(self, xs, state=None):
        """Run the cell over ``xs`` (a sequence of inputs); returns the final (h, c)."""
        if state is None:
            state = self.initial_state(None if np.ndim(_data(xs[0])) == 1 else len(_data(xs[0])))
        for x in xs:
            state = self(x, state)
        return state


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def recurrent_step(x, state, w_ih, w_hh, bias):
    h, c = state
    w_ih, w_hh = ad.as_tensor(w_ih), ad.as_tensor(w_hh)
    hidden = w_hh.shape[1]
    if ad.as_tensor(h).shape[-1] != hidden or ad.as_tensor(x).shape[-1] != w_ih.shape[1]:
        raise ad.ShapeError(
            f"recurrent_step: x {ad.as_tensor(x).shape}, h {ad.as_tensor(h).shape}, w_ih {w_ih.shape}"
        )
    gates = ad.add(ad.linear(x, w_ih, bias), ad.linear(h, w_hh))
    i = ad.sigmoid(gates[..., :hidden])
    f = ad.sigmoid(gates[..., hidden : 2 * hidden])
    g = ad.tanh(gates[..., 2 * hidden : 3 * hidden])
    o = ad.sigmoid(gates[..., 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def linear_forward(x, weight, bias):
    return ad.linear(x, weight, bias)
