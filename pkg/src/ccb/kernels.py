"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``CCB_DISABLE_NUMBA`` (any of
``1/true/yes`` forces numpy) and can be switched at runtime with
:func:`use_numba`. Both paths compute the same quantities; they agree to
rounding (summation order differs), and each path is bitwise deterministic.
"""
from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


def _env_disabled() -> bool:
    return os.environ.get("CCB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


_USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def numba_enabled() -> bool:
    return _USE_NUMBA


@contextlib.contextmanager
def use_numba(flag: bool):
    """Temporarily select the numba (True) or numpy (False) backend."""
    global _USE_NUMBA
    prev = _USE_NUMBA
    _USE_NUMBA = bool(flag) and HAVE_NUMBA
    try:
        yield
    finally:
        _USE_NUMBA = prev


def backend_name() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# stable binary cross-entropy on raw scores
# ---------------------------------------------------------------------------

def _bce_np(z, y, w):
    # max(z,0) - z*y + log1p(exp(-|z|)); never materialises sigmoid inside a log
    elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    grad = w * (sig - y)
    return (w * elem).sum(axis=1), grad


@njit(cache=True)
def _bce_nb(z, y, w):
    n, a = z.shape
    rows = np.zeros(n)
    grad = np.empty_like(z)
    for i in range(n):
        acc = 0.0
        for j in range(a):
            zi = z[i, j]
            ez = math.exp(-abs(zi))
            acc += w[i, j] * (max(zi, 0.0) - zi * y[i, j] + math.log1p(ez))
            if zi >= 0:
                s = 1.0 / (1.0 + ez)
            else:
                s = ez / (1.0 + ez)
            grad[i, j] = w[i, j] * (s - y[i, j])
        rows[i] = acc
    return rows, grad


def bce_rows(z: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Per-instance weighted BCE (summed over answers) and its gradient wrt z.

    The gradient is of the *summed* (not averaged) loss.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _USE_NUMBA:
        return _bce_nb(z, y, w)
    return _bce_np(z, y, w)


# ---------------------------------------------------------------------------
# question-conditioned soft attention over regions
# ---------------------------------------------------------------------------

def _attn_fwd_np(vp, keys, fq):
    # vp, keys: [B, R, d]; fq: [B, d_q] with keys already projected to d_q
    s = np.einsum("brk,bk->br", keys, fq)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    alpha = e / e.sum(axis=1, keepdims=True)
    fv = np.einsum("br,brd->bd", alpha, vp)
    return alpha, fv


@njit(cache=True)
def _attn_fwd_nb(vp, keys, fq):
    b, r, d = vp.shape
    dq = fq.shape[1]
    alpha = np.empty((b, r))
    fv = np.zeros((b, d))
    for i in range(b):
        m = -np.inf
        for k in range(r):
            acc = 0.0
            for c in range(dq):
                acc += keys[i, k, c] * fq[i, c]
            alpha[i, k] = acc
            if acc > m:
                m = acc
        tot = 0.0
        for k in range(r):
            alpha[i, k] = math.exp(alpha[i, k] - m)
            tot += alpha[i, k]
        for k in range(r):
            alpha[i, k] /= tot
            for c in range(d):
                fv[i, c] += alpha[i, k] * vp[i, k, c]
    return alpha, fv


def attention_forward(vp: np.ndarray, keys: np.ndarray, fq: np.ndarray):
    """Softmax over regions of <key_r, fq>; returns (weights [B,R], pooled [B,d])."""
    vp = np.ascontiguousarray(vp, dtype=np.float64)
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    fq = np.ascontiguousarray(fq, dtype=np.float64)
    if _USE_NUMBA:
        return _attn_fwd_nb(vp, keys, fq)
    return _attn_fwd_np(vp, keys, fq)


def _attn_bwd_np(vp, keys, fq, alpha, dfv):
    d_alpha = np.einsum("bd,brd->br", dfv, vp)
    d_vp = alpha[:, :, None] * dfv[:, None, :]
    ds = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
    d_keys = ds[:, :, None] * fq[:, None, :]
    d_fq = np.einsum("br,brk->bk", ds, keys)
    return d_vp, d_keys, d_fq


@njit(cache=True)
def _attn_bwd_nb(vp, keys, fq, alpha, dfv):
    b, r, d = vp.shape
    dq = fq.shape[1]
    d_vp = np.empty_like(vp)
    d_keys = np.empty_like(keys)
    d_fq = np.zeros_like(fq)
    ds = np.empty(r)
    for i in range(b):
        dot = 0.0
        for k in range(r):
            acc = 0.0
            for c in range(d):
                acc += dfv[i, c] * vp[i, k, c]
                d_vp[i, k, c] = alpha[i, k] * dfv[i, c]
            ds[k] = acc
            dot += alpha[i, k] * acc
        for k in range(r):
            g = alpha[i, k] * (ds[k] - dot)
            for c in range(dq):
                d_keys[i, k, c] = g * fq[i, c]
                d_fq[i, c] += g * keys[i, k, c]
    return d_vp, d_keys, d_fq


def attention_backward(vp, keys, fq, alpha, dfv):
    """Gradients of the pooled vector wrt (region values, region keys, query)."""
    args = [np.ascontiguousarray(x, dtype=np.float64) for x in (vp, keys, fq, alpha, dfv)]
    if _USE_NUMBA:
        return _attn_bwd_nb(*args)
    return _attn_bwd_np(*args)


# ---------------------------------------------------------------------------
# soft-label mass per question type
# ---------------------------------------------------------------------------

def _type_mass_np(qtypes, labels, n_types):
    out = np.zeros((n_types, labels.shape[1]))
    np.add.at(out, qtypes, labels)
    return out


@njit(cache=True)
def _type_mass_nb(qtypes, labels, n_types):
    out = np.zeros((n_types, labels.shape[1]))
    for i in range(qtypes.shape[0]):
        t = qtypes[i]
        for j in range(labels.shape[1]):
            out[t, j] += labels[i, j]
    return out


def type_label_mass(qtypes: np.ndarray, labels: np.ndarray, n_types: int) -> np.ndarray:
    """Sum of label vectors per question type, shape [n_types, |A|]."""
    qtypes = np.ascontiguousarray(qtypes, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if _USE_NUMBA:
        return _type_mass_nb(qtypes, labels, int(n_types))
    return _type_mass_np(qtypes, labels, int(n_types))
