"""Reference implementations used to check the fast kernels.

Everything here is written as plain nested loops over numpy arrays, with no
shared code paths with :mod:`stkit.ops`.  They are slow and only meant for
small inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def naive_matmul(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, m = W.shape
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += W[i, j] * x[j]
        out[i] = acc
    return out


def _same(n, k, s):
    out = math.ceil(n / s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), padding="VALID"):
    """Direct convolution: one loop per output and kernel index."""
    N, T, H, W, C = x.shape
    kt, kh, kw, cin, cout = w.shape
    assert cin == C
    st, sh, sw = stride
    if padding == "VALID":
        To, Ho, Wo = (T - kt) // st + 1, (H - kh) // sh + 1, (W - kw) // sw + 1
        pt = ph = pw = 0
    else:
        (To, pt), (Ho, ph), (Wo, pw) = _same(T, kt, st), _same(H, kh, sh), _same(W, kw, sw)
    y = np.zeros((N, To, Ho, Wo, cout), dtype=np.float64)
    for n in range(N):
        for t in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    for o in range(cout):
                        acc = 0.0 if b is None else float(b[o])
                        for a in range(kt):
                            tt = t * st + a - pt
                            if not 0 <= tt < T:
                                continue
                            for c in range(kh):
                                ii = i * sh + c - ph
                                if not 0 <= ii < H:
                                    continue
                                for d in range(kw):
                                    jj = j * sw + d - pw
                                    if not 0 <= jj < W:
                                        continue
                                    for ch in range(C):
                                        acc += x[n, tt, ii, jj, ch] * w[a, c, d, ch, o]
                        y[n, t, i, j, o] = acc
    return y


def naive_maxpool3d(x, window, stride, padding="SAME"):
    N, T, H, W, C = x.shape
    wt, wh, ww = window
    st, sh, sw = stride
    if padding == "VALID":
        To, Ho, Wo = (T - wt) // st + 1, (H - wh) // sh + 1, (W - ww) // sw + 1
        pt = ph = pw = 0
    else:
        (To, pt), (Ho, ph), (Wo, pw) = _same(T, wt, st), _same(H, wh, sh), _same(W, ww, sw)
    y = np.full((N, To, Ho, Wo, C), -np.inf)
    for n in range(N):
        for t in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    for ch in range(C):
                        best = -np.inf
                        for a in range(wt):
                            for c in range(wh):
                                for d in range(ww):
                                    tt, ii, jj = t * st + a - pt, i * sh + c - ph, j * sw + d - pw
                                    if 0 <= tt < T and 0 <= ii < H and 0 <= jj < W:
                                        best = max(best, x[n, tt, ii, jj, ch])
                        y[n, t, i, j, ch] = best
    return y


def naive_spacetime_mean(x):
    N, T, H, W, C = x.shape
    out = np.zeros((N, C))
    for n in range(N):
        for ch in range(C):
            acc = 0.0
            for t in range(T):
                for i in range(H):
                    for j in range(W):
                        acc += x[n, t, i, j, ch]
            out[n, ch] = acc / (T * H * W)
    return out


def naive_gate(x, W, b):
    """Gate values ``sigmoid(W mean(x) + b)`` per batch element, by loops."""
    m = naive_spacetime_mean(x)
    N, C = m.shape
    g = np.zeros((N, C))
    for n in range(N):
        z = naive_matmul(W, m[n]) + b
        for c in range(C):
            g[n, c] = 1.0 / (1.0 + math.exp(-z[c]))
    return g


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5, indices: Sequence | None = None):
    """Central differences of scalar ``f`` with respect to entries of ``arr`` (edited in place).

    Returns the full gradient array, or a vector matching ``indices`` when given.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
    out = np.asarray(out)
    return out.reshape(arr.shape) if indices is None else out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)
