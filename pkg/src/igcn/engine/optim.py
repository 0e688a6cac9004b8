from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, parameter


class ParameterStore:
    """Named trainable tensors; names are unique and shapes never change."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.init_spec: dict[str, str] = {}

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, shape, init: str = "glorot", rng: np.random.Generator | None = None,
            fan: tuple[int, int] | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "glorot":
            fan_in, fan_out = fan if fan is not None else _fans(shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown initializer {init!r}")
        t = parameter(value, name=name)
        self._params[name] = t
        self.init_spec[name] = init
        return t

    def set_value(self, name: str, value) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != t.shape:
            raise ValueError(f"{name}: shape {value.shape} does not match {t.shape}")
        t.value = value.copy()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._params.items()}

    def astype(self, dtype) -> "ParameterStore":
        other = ParameterStore(dtype)
        for name, t in self._params.items():
            other._params[name] = parameter(t.value.astype(dtype), name=name)
            other.init_spec[name] = self.init_spec[name]
        return other


def _fans(shape):
    if len(shape) == 4:  # k, k, cin, cout
        rf = shape[0] * shape[1]
        return shape[2] * rf, shape[3] * rf
    if len(shape) == 2:
        return shape
    return shape[0], shape[0]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState, grads: dict | None = None) -> AdamState:
    """One bias-corrected Adam update in place; gradients default to ``param.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if grads is None:
        grads = {name: t.grad for name, t in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        if state.lr:
            p.value = (p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state
