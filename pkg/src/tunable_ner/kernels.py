"""LSTM recurrence kernels.

The compiled extension ``_lstm_ext`` is used when it imports; otherwise the
numpy implementations below run.  Set ``TUNABLE_NER_KERNEL=numpy`` to force
the fallback.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.special import expit as sigmoid

__all__ = ["BACKEND", "lstm_forward", "lstm_backward", "sigmoid", "numpy_lstm_forward",
           "numpy_lstm_backward"]


def numpy_lstm_forward(xw, u, mask, reverse):
    """Recurrence over precomputed input projections ``xw`` [T, B, 4h].

    Returns carried hidden states, cell states and activated gates, all
    time-major.  Gates of masked steps are zero.
    """
    T, B, four_h = xw.shape
    h = four_h // 4
    hs = np.empty((T, B, h))
    cs = np.empty((T, B, h))
    gates = np.empty((T, B, four_h))
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = xw[t] + h_prev @ u
        a = gates[t]
        a[:, : 3 * h] = sigmoid(z[:, : 3 * h])
        a[:, 3 * h:] = np.tanh(z[:, 3 * h:])
        c_new = a[:, h: 2 * h] * c_prev + a[:, :h] * a[:, 3 * h:]
        h_new = a[:, 2 * h: 3 * h] * np.tanh(c_new)
        m = mask[t][:, None] > 0
        c_prev = np.where(m, c_new, c_prev)
        h_prev = np.where(m, h_new, h_prev)
        cs[t] = c_prev
        hs[t] = h_prev
        a *= m
    return hs, cs, gates


def numpy_lstm_backward(dhs, u, hs, cs, gates, mask, reverse):
    """Backpropagate ``dhs`` [T, B, h] through the recurrence.

    Returns gradients w.r.t. the pre-activations [T, B, 4h] and ``u``.
    """
    T, B, h = hs.shape
    dz = np.zeros((T, B, 4 * h))
    h_prevs = np.zeros((T, B, h))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    zeros = np.zeros((B, h))
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        prev = t + 1 if reverse else t - 1
        if 0 <= prev < T:
            h_prev, c_prev = hs[prev], cs[prev]
        else:
            h_prev, c_prev = zeros, zeros
        h_prevs[t] = h_prev
        m = mask[t][:, None] > 0
        a = gates[t]
        i, f, o, g = a[:, :h], a[:, h: 2 * h], a[:, 2 * h: 3 * h], a[:, 3 * h:]
        dh = dhs[t] + dh_next
        tc = np.tanh(cs[t])
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[:, :h] = dc * g * i * (1.0 - i)
        d[:, h: 2 * h] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * h: 3 * h] = dh * tc * o * (1.0 - o)
        d[:, 3 * h:] = dc * i * (1.0 - g * g)
        d *= m
        dh_next = np.where(m, d @ u.T, dh)
        dc_next = np.where(m, dc * f, dc_next)
    du = h_prevs.reshape(T * B, h).T @ dz.reshape(T * B, 4 * h)
    return dz, du


BACKEND = "numpy"
lstm_forward = numpy_lstm_forward
lstm_backward = numpy_lstm_backward

if os.environ.get("TUNABLE_NER_KERNEL", "").lower() != "numpy":
    try:
        from . import _lstm_ext
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        lstm_forward = _lstm_ext.lstm_forward
        lstm_backward = _lstm_ext.lstm_backward
