"""Embeddings, LSTM cells and runners, linear projections, dropout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .errors import ConfigError
from .optim import ParamStore, xavier_uniform


@dataclass
class EmbeddingTable:
    matrix: Tensor
    trainable: bool = True

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def create(cls, store: ParamStore, name: str, vocab_size: int, dim: int,
               partition: str, rng: np.random.Generator) -> "EmbeddingTable":
        # same range as the out-of-vocabulary rows of pretrained tables
        values = rng.uniform(-0.25, 0.25, size=(vocab_size, dim))
        return cls(store.add(name, values, partition))


def embed_lookup(table: EmbeddingTable, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"embedding id out of range [0, {table.vocab_size})")
    if not table.trainable:
        return Tensor(table.matrix.value[ids])
    return ad.take_rows(table.matrix, ids)


@dataclass
class LstmCell:
    """One-direction LSTM; gate blocks ordered (input, forget, output, candidate)."""

    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_dim: int, hidden_dim: int,
               partition: str, rng: np.random.Generator) -> "LstmCell":
        h = hidden_dim
        w = xavier_uniform(rng, input_dim, 4 * h)
        u = np.concatenate([xavier_uniform(rng, h, h) for _ in range(4)], axis=1)
        b = np.zeros(4 * h)
        b[h: 2 * h] = 1.0
        return cls(store.add(f"{prefix}.W", w, partition),
                   store.add(f"{prefix}.U", u, partition),
                   store.add(f"{prefix}.b", b, partition))

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "LstmCell":
        return cls(store[f"{prefix}.W"], store[f"{prefix}.U"], store[f"{prefix}.b"])

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "U": self.U, "b": self.b}


def lstm_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrence step composed from primitive ops (reference path)."""
    h = cell.hidden_dim
    if x.shape[-1] != cell.input_dim or h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise DimensionError(
            f"lstm_step: x{x.shape} h{h_prev.shape} c{c_prev.shape} vs cell "
            f"in={cell.input_dim} hidden={h}"
        )
    z = ad.add(ad.affine(x, cell.W, cell.b), ad.matmul(h_prev, cell.U))
    i = ad.sigmoid(ad.slice_last(z, 0, h))
    f = ad.sigmoid(ad.slice_last(z, h, 2 * h))
    o = ad.sigmoid(ad.slice_last(z, 2 * h, 3 * h))
    g = ad.tanh(ad.slice_last(z, 3 * h, 4 * h))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c)), c


def run_lstm(cell: LstmCell, xs: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
    """Batched run over time-major [T, B, in]; returns [T, B, hidden]."""
    if xs.shape[-1] != cell.input_dim:
        raise DimensionError(f"lstm input dim {xs.shape[-1]} != cell input dim {cell.input_dim}")
    return ad.lstm_sequence(xs, cell.W, cell.U, cell.b, mask, reverse)


def bilstm_states(fwd: LstmCell, bwd: LstmCell, xs: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    return run_lstm(fwd, xs, mask), run_lstm(bwd, xs, mask, reverse=True)


def bilstm_full_batch(fwd: LstmCell, bwd: LstmCell, xs: Tensor, mask: np.ndarray) -> Tensor:
    hf, hb = bilstm_states(fwd, bwd, xs, mask)
    return ad.concat([hf, hb], axis=-1)


def bilstm_final_batch(fwd: LstmCell, bwd: LstmCell, xs: Tensor, mask: np.ndarray) -> Tensor:
    """[L, N, in] padded sequences -> [N, 2*hidden] final states of both directions.

    Padding sits at the end of each column, so the forward state at L-1 and
    the backward state at 0 are both the states after the last real step.
    """
    hf, hb = bilstm_states(fwd, bwd, xs, mask)
    return ad.concat([ad.index_time(hf, xs.shape[0] - 1), ad.index_time(hb, 0)], axis=-1)


def run_bilstm_final(fwd: LstmCell, bwd: LstmCell, xs: Tensor) -> Tensor:
    """[L, in] -> [2*hidden]: concatenated last states of the two directions."""
    if xs.shape[0] < 1:
        raise ValueError("run_bilstm_final needs at least one timestep")
    L = xs.shape[0]
    out = bilstm_final_batch(fwd, bwd, ad.reshape(xs, (L, 1, xs.shape[1])), np.ones((L, 1)))
    return ad.reshape(out, (out.shape[-1],))


def run_bilstm_full(fwd: LstmCell, bwd: LstmCell, xs: Tensor) -> Tensor:
    """[T, in] -> [T, 2*hidden], per-step concatenation of both directions."""
    if xs.shape[0] < 1:
        raise ValueError("run_bilstm_full needs at least one timestep")
    T = xs.shape[0]
    out = bilstm_full_batch(fwd, bwd, ad.reshape(xs, (T, 1, xs.shape[1])), np.ones((T, 1)))
    return ad.reshape(out, (T, out.shape[-1]))


@dataclass
class LinearLayer:
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d_in: int, d_out: int, partition: str,
               rng: np.random.Generator) -> "LinearLayer":
        return cls(store.add(f"{prefix}.W", xavier_uniform(rng, d_in, d_out), partition),
                   store.add(f"{prefix}.b", np.zeros(d_out), partition))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.W, self.b)


def dropout_apply(x: Tensor, rate: float, mode: str = "train",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout when ``mode == "train"``; identity in ``"eval"`` mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return ad.mul_const(x, mask)
