"""Numeric kernel backends.

The two hot kernels of the package — same-padded kernel-3 temporal
convolution and the pointwise LSTM cell update — exist in two
implementations: a numba ``@njit`` version and a pure-numpy version.
Selection happens once at import from the ``GMVC_BACKEND`` environment
variable (``numba`` or ``numpy``); the default is numba when it is
importable, numpy otherwise. ``set_backend`` allows tests and the
benchmark script to switch inside one process.

Both implementations are deterministic on a fixed platform. They are
not bit-identical to each other (summation order differs), which is why
parity tests compare with tolerances.

Conventions:
  * conv inputs are ``(M, T, C_in)``; weights are ``(3 * C_in, C_out)``
    with tap k at rows ``[k*C_in, (k+1)*C_in)`` and taps ordered
    t-1, t, t+1; padding is zero.
  * LSTM pre-activations are ``(B, 4H)`` with gate order
    input, forget, cell, output.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - mirror always has numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# numpy implementations


def _conv1d_fwd_numpy(x, w, b):
    # one gemm per tap against the middle/left/right shifts; zero padding
    # falls out of the slice bounds
    m, t, ci = x.shape
    y = x @ w[ci : 2 * ci]
    y += b
    y[:, 1:] += x[:, : t - 1] @ w[:ci]
    y[:, : t - 1] += x[:, 1:] @ w[2 * ci :]
    return y


def _conv1d_bwd_numpy(x, w, gy, need_gx):
    m, t, ci = x.shape
    gb = gy.sum(axis=(0, 1))
    gw = np.empty_like(w)
    gw[:ci] = np.tensordot(x[:, : t - 1], gy[:, 1:], axes=([0, 1], [0, 1]))
    gw[ci : 2 * ci] = np.tensordot(x, gy, axes=([0, 1], [0, 1]))
    gw[2 * ci :] = np.tensordot(x[:, 1:], gy[:, : t - 1], axes=([0, 1], [0, 1]))
    gx = None
    if need_gx:
        gx = gy @ w[ci : 2 * ci].T
        gx[:, : t - 1] += gy[:, 1:] @ w[:ci].T
        gx[:, 1:] += gy[:, : t - 1] @ w[2 * ci :].T
    return gx, gw, gb


def _lstm_gates_fwd_numpy(preact, c_prev):
    h = preact.shape[1] // 4
    i = _sigmoid(preact[:, 0:h])
    f = _sigmoid(preact[:, h : 2 * h])
    g = np.tanh(preact[:, 2 * h : 3 * h])
    o = _sigmoid(preact[:, 3 * h :])
    c = f * c_prev + i * g
    hh = o * np.tanh(c)
    gates = np.concatenate((i, f, g, o), axis=1)
    return hh, c, gates


def _lstm_gates_bwd_numpy(gates, c_prev, c_new, gh, gc):
    h = c_prev.shape[1]
    i = gates[:, 0:h]
    f = gates[:, h : 2 * h]
    g = gates[:, 2 * h : 3 * h]
    o = gates[:, 3 * h :]
    tc = np.tanh(c_new)
    gc_total = gc + gh * o * (1.0 - tc * tc)
    gpre = np.empty_like(gates)
    gpre[:, 0:h] = gc_total * g * i * (1.0 - i)
    gpre[:, h : 2 * h] = gc_total * c_prev * f * (1.0 - f)
    gpre[:, 2 * h : 3 * h] = gc_total * i * (1.0 - g * g)
    gpre[:, 3 * h :] = gh * tc * o * (1.0 - o)
    gc_prev = gc_total * f
    return gpre, gc_prev


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# numba implementations


@njit(cache=True)
def _conv1d_fwd_numba(x, w, b):
    m, t, ci = x.shape
    co = w.shape[1]
    w0 = np.ascontiguousarray(w[:ci])
    w1 = np.ascontiguousarray(w[ci : 2 * ci])
    w2 = np.ascontiguousarray(w[2 * ci :])
    y = np.empty((m, t, co), dtype=x.dtype)
    for mm in range(m):
        xi = x[mm]
        yi = np.dot(xi, w1)
        for tt in range(t):
            for c in range(co):
                yi[tt, c] += b[c]
        if t > 1:
            left = np.dot(xi[: t - 1], w0)
            right = np.dot(xi[1:], w2)
            for tt in range(t - 1):
                for c in range(co):
                    yi[tt + 1, c] += left[tt, c]
                    yi[tt, c] += right[tt, c]
        y[mm] = yi
    return y


@njit(cache=True)
def _conv1d_bwd_numba(x, w, gy, need_gx):
    m, t, ci = x.shape
    co = w.shape[1]
    gx = np.zeros((m, t, ci), dtype=x.dtype)
    gw = np.zeros(w.shape, dtype=w.dtype)
    gb = np.zeros(co, dtype=w.dtype)
    w0t = np.ascontiguousarray(w[:ci].T)
    w1t = np.ascontiguousarray(w[ci : 2 * ci].T)
    w2t = np.ascontiguousarray(w[2 * ci :].T)
    for mm in range(m):
        gyi = gy[mm]
        xt = np.ascontiguousarray(x[mm].T)
        for tt in range(t):
            for c in range(co):
                gb[c] += gyi[tt, c]
        gw[ci : 2 * ci] += np.dot(xt, gyi)
        if t > 1:
            gw[:ci] += np.dot(np.ascontiguousarray(xt[:, : t - 1]), gyi[1:])
            gw[2 * ci :] += np.dot(np.ascontiguousarray(xt[:, 1:]), gyi[: t - 1])
        if need_gx:
            gxi = np.dot(gyi, w1t)
            if t > 1:
                gl = np.dot(gyi[1:], w0t)
                gr = np.dot(gyi[: t - 1], w2t)
                for tt in range(t - 1):
                    for c in range(ci):
                        gxi[tt, c] += gl[tt, c]
                        gxi[tt + 1, c] += gr[tt, c]
            gx[mm] = gxi
    return gx, gw, gb


@njit(cache=True)
def _lstm_gates_fwd_numba(preact, c_prev):
    b, h4 = preact.shape
    h = h4 // 4
    hh = np.empty((b, h), dtype=preact.dtype)
    c = np.empty((b, h), dtype=preact.dtype)
    gates = np.empty((b, h4), dtype=preact.dtype)
    for bb in range(b):
        for j in range(h):
            i = 1.0 / (1.0 + np.exp(-preact[bb, j]))
            f = 1.0 / (1.0 + np.exp(-preact[bb, h + j]))
            g = np.tanh(preact[bb, 2 * h + j])
            o = 1.0 / (1.0 + np.exp(-preact[bb, 3 * h + j]))
            cc = f * c_prev[bb, j] + i * g
            c[bb, j] = cc
            hh[bb, j] = o * np.tanh(cc)
            gates[bb, j] = i
            gates[bb, h + j] = f
            gates[bb, 2 * h + j] = g
            gates[bb, 3 * h + j] = o
    return hh, c, gates


@njit(cache=True)
def _lstm_gates_bwd_numba(gates, c_prev, c_new, gh, gc):
    b, h = c_prev.shape
    gpre = np.empty((b, 4 * h), dtype=gates.dtype)
    gc_prev = np.empty((b, h), dtype=gates.dtype)
    for bb in range(b):
        for j in range(h):
            i = gates[bb, j]
            f = gates[bb, h + j]
            g = gates[bb, 2 * h + j]
            o = gates[bb, 3 * h + j]
            tc = np.tanh(c_new[bb, j])
            gct = gc[bb, j] + gh[bb, j] * o * (1.0 - tc * tc)
            gpre[bb, j] = gct * g * i * (1.0 - i)
            gpre[bb, h + j] = gct * c_prev[bb, j] * f * (1.0 - f)
            gpre[bb, 2 * h + j] = gct * i * (1.0 - g * g)
            gpre[bb, 3 * h + j] = gh[bb, j] * tc * o * (1.0 - o)
            gc_prev[bb, j] = gct * f
    return gpre, gc_prev


def _conv1d_bwd_numba_wrap(x, w, gy, need_gx):
    gx, gw, gb = _conv1d_bwd_numba(x, w, gy, need_gx)
    return (gx if need_gx else None), gw, gb


_IMPL = {
    "numpy": {
        "conv1d_fwd": _conv1d_fwd_numpy,
        "conv1d_bwd": _conv1d_bwd_numpy,
        "lstm_fwd": _lstm_gates_fwd_numpy,
        "lstm_bwd": _lstm_gates_bwd_numpy,
    },
}
if HAS_NUMBA:
    _IMPL["numba"] = {
        "conv1d_fwd": _conv1d_fwd_numba,
        "conv1d_bwd": _conv1d_bwd_numba_wrap,
        "lstm_fwd": _lstm_gates_fwd_numba,
        "lstm_bwd": _lstm_gates_bwd_numba,
    }


def _initial_backend() -> str:
    req = os.environ.get("GMVC_BACKEND", "").strip().lower()
    if req in ("numpy", "numba"):
        if req == "numba" and not HAS_NUMBA:
            return "numpy"
        return req
    return "numba" if HAS_NUMBA else "numpy"


_ACTIVE = _initial_backend()


def active_backend() -> str:
    return _ACTIVE


def set_backend(name: str) -> None:
    """Switch kernel implementations ('numba' or 'numpy')."""
    if name not in _IMPL:
        from gmvc.errors import InvalidInput

        raise InvalidInput(f"unknown backend {name!r}; have {sorted(_IMPL)}")
    global _ACTIVE
    _ACTIVE = name


# dispatchers -- read the active table on every call so set_backend works


def conv1d_forward(x, w, b):
    """Kernel-3 same-padded convolution over the middle (time) axis."""
    return _IMPL[_ACTIVE]["conv1d_fwd"](x, w, b)


def conv1d_backward(x, w, gy, need_gx=True):
    return _IMPL[_ACTIVE]["conv1d_bwd"](x, w, gy, need_gx)


def lstm_gates_forward(preact, c_prev):
    """Pointwise LSTM cell update; returns (h, c, post-activation gates)."""
    return _IMPL[_ACTIVE]["lstm_fwd"](preact, c_prev)


def lstm_gates_backward(gates, c_prev, c_new, gh, gc):
    return _IMPL[_ACTIVE]["lstm_bwd"](gates, c_prev, c_new, gh, gc)
