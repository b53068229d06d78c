# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence; same contract as the numpy kernels."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def lstm_forward(double[:, :, ::1] xw, double[:, ::1] u, double[:, ::1] mask, bint reverse):
    cdef int T = xw.shape[0], B = xw.shape[1], H4 = xw.shape[2]
    cdef int H = H4 // 4
    cdef int H3 = 3 * H
    hs_a = np.empty((T, B, H))
    cs_a = np.empty((T, B, H))
    gates_a = np.zeros((T, B, H4))
    if T == 0 or B == 0 or H == 0:
        return hs_a, cs_a, gates_a
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] cs = cs_a
    cdef double[:, :, ::1] gates = gates_a
    cdef double[:, ::1] hp = np.zeros((B, H))
    cdef double[:, ::1] cp = np.zeros((B, H))
    z_a = np.empty((B, H4))
    e_a = np.empty((B, H))
    cdef double[:, ::1] z = z_a
    cdef double[:, ::1] e = e_a
    cdef int step, t, b, j
    cdef double one = 1.0
    cdef char nt = b'N'
    cdef double *zr
    cdef double *gr
    cdef double *hr
    cdef double *cr
    cdef double *er
    # activations go through numpy's vectorized exp, one call per step;
    # sigmoid(x) = 1 / (1 + exp(-x)), tanh(x) = 1 - 2 / (exp(2x) + 1)
    with np.errstate(over="ignore"):
        for step in range(T):
            t = T - 1 - step if reverse else step
            memcpy(&z[0, 0], &xw[t, 0, 0], B * H4 * sizeof(double))
            dgemm(&nt, &nt, &H4, &B, &H, &one, &u[0, 0], &H4, &hp[0, 0], &H, &one, &z[0, 0], &H4)
            for b in range(B):
                zr = &z[b, 0]
                for j in range(H3):
                    zr[j] = -zr[j]
                for j in range(H3, H4):
                    zr[j] = 2.0 * zr[j]
            np.exp(z_a, out=z_a)
            for b in range(B):
                if mask[t, b] > 0:
                    zr = &z[b, 0]
                    gr = &gates[t, b, 0]
                    cr = &cp[b, 0]
                    er = &e[b, 0]
                    for j in range(H3):
                        gr[j] = 1.0 / (1.0 + zr[j])
                    for j in range(H3, H4):
                        gr[j] = 1.0 - 2.0 / (zr[j] + 1.0)
                    for j in range(H):
                        cr[j] = gr[H + j] * cr[j] + gr[j] * gr[H3 + j]
                        er[j] = 2.0 * cr[j]
            np.exp(e_a, out=e_a)
            for b in range(B):
                hr = &hp[b, 0]
                cr = &cp[b, 0]
                if mask[t, b] > 0:
                    gr = &gates[t, b, 0]
                    er = &e[b, 0]
                    for j in range(H):
                        hr[j] = gr[2 * H + j] * (1.0 - 2.0 / (er[j] + 1.0))
                memcpy(&cs[t, b, 0], cr, H * sizeof(double))
                memcpy(&hs[t, b, 0], hr, H * sizeof(double))
    return hs_a, cs_a, gates_a


def lstm_backward(double[:, :, ::1] dhs, double[:, ::1] u, double[:, :, ::1] hs,
                  cs_a, double[:, :, ::1] gates, double[:, ::1] mask,
                  bint reverse):
    cdef int T = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    cdef double[:, :, ::1] cs = cs_a
    cdef int H4 = 4 * H
    dz_a = np.zeros((T, B, H4))
    hprev_a = np.zeros((T, B, H))
    if T == 0 or B == 0 or H == 0:
        return dz_a, np.zeros((H, H4))
    cdef double[:, :, ::1] dz = dz_a
    cdef double[:, :, ::1] hprev = hprev_a
    cdef double[:, ::1] dh = np.zeros((B, H))
    cdef double[:, ::1] dc = np.zeros((B, H))
    cdef double[:, ::1] back = np.zeros((B, H))
    cdef double[::1] zeros = np.zeros(H)
    with np.errstate(over="ignore"):
        tanh_a = 1.0 - 2.0 / (np.exp(2.0 * cs_a) + 1.0)
    cdef double[:, :, ::1] tanh_c = tanh_a
    cdef int step, t, prev, b, j
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N'
    cdef char tt = b'T'
    cdef double ig, fg, og, gg, tc, dhv, dcv
    cdef double *gr
    cdef double *dzr
    cdef double *cpr
    cdef double *dhr
    cdef double *dcr
    cdef double *tr
    with nogil:
        for step in range(T):
            t = step if reverse else T - 1 - step
            prev = t + 1 if reverse else t - 1
            for b in range(B):
                dhr = &dh[b, 0]
                dcr = &dc[b, 0]
                if mask[t, b] > 0:
                    gr = &gates[t, b, 0]
                    dzr = &dz[t, b, 0]
                    if 0 <= prev < T:
                        cpr = &cs[prev, b, 0]
                        memcpy(&hprev[t, b, 0], &hs[prev, b, 0], H * sizeof(double))
                    else:
                        cpr = &zeros[0]
                    tr = &tanh_c[t, b, 0]
                    for j in range(H):
                        ig = gr[j]
                        fg = gr[H + j]
                        og = gr[2 * H + j]
                        gg = gr[3 * H + j]
                        tc = tr[j]
                        dhv = dhs[t, b, j] + dhr[j]
                        dcv = dcr[j] + dhv * og * (1.0 - tc * tc)
                        dzr[j] = dcv * gg * ig * (1.0 - ig)
                        dzr[H + j] = dcv * cpr[j] * fg * (1.0 - fg)
                        dzr[2 * H + j] = dhv * tc * og * (1.0 - og)
                        dzr[3 * H + j] = dcv * ig * (1.0 - gg * gg)
                        dcr[j] = dcv * fg
                else:
                    if 0 <= prev < T:
                        memcpy(&hprev[t, b, 0], &hs[prev, b, 0], H * sizeof(double))
                    for j in range(H):
                        dhr[j] = dhs[t, b, j] + dhr[j]
            dgemm(&tt, &nt, &H, &B, &H4, &one, &u[0, 0], &H4, &dz[t, 0, 0], &H4, &zero, &back[0, 0], &H)
            for b in range(B):
                if mask[t, b] > 0:
                    memcpy(&dh[b, 0], &back[b, 0], H * sizeof(double))
    du = hprev_a.reshape(T * B, H).T @ dz_a.reshape(T * B, H4)
    return dz_a, du
