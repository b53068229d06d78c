"""Named parameter storage with task partitions, and a masked Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .autodiff import Tensor, param

PARTITIONS = ("target", "source", "shared")


class StateError(RuntimeError):
    pass


class ParamStore:
    """Trainable tensors keyed by hierarchical name, each owned by a partition."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.partition: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, partition: str) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        t = param(value, name=name)
        self.tensors[name] = t
        self.partition[name] = partition
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, partitions: Iterable[str] | None = None) -> list[str]:
        if partitions is None:
            return list(self.tensors)
        keep = set(partitions)
        return [n for n in self.tensors if self.partition[n] in keep]

    def size(self) -> int:
        return int(sum(t.value.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self.tensors.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self.tensors[n].value[...] = v


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def clip_grad_norm(store: ParamStore, names: list[str], max_norm: float) -> float:
    """Rescale the gradients of ``names`` so their joint l2 norm is at most ``max_norm``."""
    sq = 0.0
    for n in names:
        g = store[n].grad
        if g is not None:
            sq += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for n in names:
            g = store[n].grad
            if g is not None:
                g *= k
    return norm


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter update counts; masked-out parameters do not age
    t: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, **hyper) -> "AdamState":
        st = cls(**hyper)
        for n, p in store.tensors.items():
            st.m[n] = np.zeros_like(p.value)
            st.v[n] = np.zeros_like(p.value)
            st.t[n] = 0
        return st


def adam_step(store: ParamStore, state: AdamState, masks: Iterable[str]) -> None:
    """Bias-corrected Adam update of every parameter whose partition is in ``masks``.

    All gradients are cleared afterwards, including those of parameters
    outside the mask.
    """
    keep = set(masks)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for n, p in store.tensors.items():
        if store.partition[n] not in keep:
            continue
        if n not in state.m:
            raise StateError(f"no Adam moments for parameter {n!r}")
        g = p.grad
        if g is None:
            continue
        m, v = state.m[n], state.v[n]
        if m.shape != p.value.shape:
            raise StateError(f"moment shape {m.shape} does not match {n!r} {p.value.shape}")
        state.t[n] += 1
        k = state.t[n]
        # in place, in the same operation order as
        #   m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
        #   p -= lr * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
        step = np.multiply(g, 1.0 - b1)
        m *= b1
        m += step
        denom = np.multiply(g, g)
        denom *= 1.0 - b2
        v *= b2
        v += denom
        np.divide(v, 1.0 - b2 ** k, out=denom)
        np.sqrt(denom, out=denom)
        denom += state.eps
        np.divide(m, 1.0 - b1 ** k, out=step)
        step *= state.lr
        step /= denom
        p.value -= step
    store.zero_grad()
