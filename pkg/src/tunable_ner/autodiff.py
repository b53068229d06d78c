"""Reverse-mode differentiation over float64 numpy arrays.

Every op records itself on the active :class:`Tape` (if any input is
tracked). ``backward(loss)`` replays the tape in reverse once.  Without an
active tape the ops are plain forward computations, which is how inference
runs.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from . import kernels


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class PairingError(ValueError):
    pass


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_tape", "_index")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def param(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of the ops executed inside a ``with Tape():`` block."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out._tape = self
        out._index = len(self.records)
        out.requires_grad = True
        self.records.append((out, inputs, backward))


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor the scalar ``loss`` depends on.

    Leaf parameters accumulate across calls; intermediate tensors hold the
    gradient of the most recent pass.
    """
    tape = loss._tape
    if tape is None or loss._index < 0:
        raise TapeError("loss was not produced by recorded ops")
    if loss.value.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, fn in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        in_grads = fn(g)
        for t, tg in zip(inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            if t._tape is tape:
                prev = grads.get(id(t))
                grads[id(t)] = tg if prev is None else prev + tg
            else:
                t.grad = tg.copy() if t.grad is None else t.grad + tg


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def sigmoid(x: Tensor) -> Tensor:
    s = kernels.sigmoid(x.value)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.value * c, (x,), lambda g: (g * c,))


def mul_const(x: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout masks, padding masks)."""
    m = np.asarray(m, dtype=np.float64)
    return _emit(x.value * m, (x,), lambda g: (_unbroadcast(g * m, x.shape),))


def blend(g: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``(1 - g) * a + g * b``, the gated mixture of two representations."""
    _check_same("blend", a, b)
    _check_same("blend", g, a)
    gv, av, bv = g.value, a.value, b.value
    out = (1.0 - gv) * av + gv * bv
    return _emit(out, (g, a, b), lambda d: (d * (bv - av), d * (1.0 - gv), d * gv))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to {x.shape}")
    return _emit(x.value + b.value, (x, b), lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., k] and ``b`` of shape [k, n]."""
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def grad(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(av @ bv, (a, b), grad)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as a single recorded op."""
    if w.value.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} are not aligned")
    xv, wv = x.value, w.value

    def grad(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv.T, xv.reshape(-1, xv.shape[-1]).T @ g2, g2.sum(axis=0)

    return _emit(xv @ wv + b.value, (x, w, b), grad)


# ---------------------------------------------------------------- structure

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].value.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.value.ndim != ndim or any(
            i != ax and p.shape[i] != parts[0].shape[i] for i in range(ndim)
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}"
            )
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(np.concatenate([p.value for p in parts], axis=ax), tuple(parts), grad)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``table[idx]``; the backward pass scatters into those rows only."""
    idx = np.asarray(idx, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    tv_shape = table.shape

    def grad(g):
        # selection-matrix product: same summation order as np.add.at, faster
        flat = idx.ravel()
        pick = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                 shape=(n, flat.size))
        out = np.asarray(pick @ g.reshape(-1, tv_shape[-1]))
        return (out.reshape(tv_shape),)

    return _emit(table.value[idx], (table,), grad)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _emit(x.value[..., start:stop], (x,), grad)


def index_time(x: Tensor, t: int) -> Tensor:
    """Slice ``x[t]`` along the leading axis."""
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        out[t] = g
        return (out,)

    return _emit(x.value[t], (x,), grad)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def add_scalars(a: Tensor, b: Tensor) -> Tensor:
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the leading (time) axis of [L, N, d], counting only mask==1 steps."""
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    cnt = np.maximum(m.sum(axis=0), 1.0)
    out = (x.value * m).sum(axis=0) / cnt
    return _emit(out, (x,), lambda g: (m * (g / cnt)[None],))


# ---------------------------------------------------------------- losses

def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, gold: int) -> tuple[Tensor, np.ndarray]:
    """Cross entropy of one logit vector against a gold index.

    Returns the scalar loss tensor and the probability vector.
    """
    if logits.value.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= gold < n:
        raise IndexError(f"gold index {gold} outside [0, {n})")
    loss, probs = softmax_cross_entropy_rows(reshape(logits, (1, n)), np.array([gold]))
    return loss, probs[0]


def softmax_cross_entropy_rows(logits: Tensor, gold: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Summed cross entropy over the rows of [N, n] logits."""
    gold = np.asarray(gold, dtype=np.intp)
    lv = logits.value
    n = lv.shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= n):
        raise IndexError(f"gold index outside [0, {n})")
    z = lv - lv.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(lv.shape[0])
    loss = np.asarray((logsum - z[rows, gold]).sum())
    probs = np.exp(z - logsum[:, None])

    def grad(g):
        d = probs.copy()
        d[rows, gold] -= 1.0
        return (d * g,)

    return _emit(loss, (logits,), grad), probs


def l2_distance_sq(a: dict[str, Tensor], b: dict[str, Tensor]) -> Tensor:
    """Sum of squared differences over name-matched tensors of two groups."""
    if set(a) != set(b):
        odd = sorted(set(a) ^ set(b))
        raise PairingError(f"unmatched tensor names: {odd}")
    names = sorted(a)
    for k in names:
        if a[k].shape != b[k].shape:
            raise PairingError(f"{k}: shape {a[k].shape} vs {b[k].shape}")
    if not names:
        return Tensor(0.0)
    diffs = [a[k].value - b[k].value for k in names]
    total = np.asarray(sum(float(np.dot(d.ravel(), d.ravel())) for d in diffs))
    inputs = tuple(a[k] for k in names) + tuple(b[k] for k in names)

    def grad(g):
        ga = [2.0 * g * d for d in diffs]
        return tuple(ga) + tuple(-x for x in ga)

    return _emit(total, inputs, grad)


# ---------------------------------------------------------------- recurrent

def lstm_sequence(
    x: Tensor, w: Tensor, u: Tensor, b: Tensor, mask: np.ndarray, reverse: bool = False
) -> Tensor:
    """Run an LSTM over time-major input [T, B, in]; returns states [T, B, h].

    Gate layout along the 4h axis is (input, forget, output, candidate).
    Where ``mask[t, b] == 0`` the state is carried through unchanged, so
    padded tails do not disturb either direction.
    """
    T, B, d_in = x.shape
    h = u.shape[0]
    if w.shape != (d_in, 4 * h) or u.shape != (h, 4 * h) or b.shape != (4 * h,):
        raise DimensionError(
            f"lstm: input {x.shape} incompatible with W{w.shape} U{u.shape} b{b.shape}"
        )
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    xv, wv, uv = x.value, w.value, u.value
    xw = (xv.reshape(T * B, d_in) @ wv + b.value).reshape(T, B, 4 * h)
    hs, cs, gates = kernels.lstm_forward(xw, uv, mask, reverse)

    def grad(g):
        dz, du = kernels.lstm_backward(np.ascontiguousarray(g), uv, hs, cs, gates, mask, reverse)
        dz2 = dz.reshape(T * B, 4 * h)
        dx = (dz2 @ wv.T).reshape(T, B, d_in)
        dw = xv.reshape(T * B, d_in).T @ dz2
        return dx, dw, du, dz2.sum(axis=0)

    return _emit(hs, (x, w, u, b), grad)


# ---------------------------------------------------------------- verification

def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild the loss from the current parameter values on each
    call and be deterministic.  The relative error of each coordinate is
    ``|a - n| / max(|a| + |n|, floor)``; coordinates where both gradients
    are below ``floor`` are compared on that floor.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f().item()
            flat[i] = old - step
            down = f().item()
            flat[i] = old
            num = (up - down) / (2.0 * step)
            err = abs(af[i] - num) / max(abs(af[i]) + abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
