"""Spatiotemporal primitives on channels-last video tensors ``(N, T, H, W, C)``.

Convolutions are lowered to one matrix product over im2col patches.  SAME
padding follows the usual convention: ``out = ceil(n / stride)`` and the odd
pad element goes to the trailing side.  The temporal axis can be padded with
zeros or by repeating edge frames; edge padding keeps temporally constant
clips constant through every layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make, as_tensor

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected three extents, got {v!r}")
    return t  # type: ignore[return-value]


def same_padding(n: int, k: int, s: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for SAME padding on one axis."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def output_extents(extents: Sequence[int], kernel, stride, padding: str = "SAME") -> Triple:
    kernel, stride = _triple(kernel), _triple(stride)
    if padding == "SAME":
        return tuple(same_padding(n, k, s)[0] for n, k, s in zip(extents, kernel, stride))  # type: ignore[return-value]
    if padding == "VALID":
        return tuple((n - k) // s + 1 if n >= k else 0 for n, k, s in zip(extents, kernel, stride))  # type: ignore[return-value]
    raise ValueError(f"padding must be SAME or VALID, got {padding!r}")


def _pads(extents, kernel, stride, padding):
    if padding == "VALID":
        out = output_extents(extents, kernel, stride, "VALID")
        return out, ((0, 0), (0, 0), (0, 0))
    res = [same_padding(n, k, s) for n, k, s in zip(extents, kernel, stride)]
    return tuple(r[0] for r in res), tuple((r[1], r[2]) for r in res)


def _pad(x: np.ndarray, pads, temporal: str, fill: float) -> np.ndarray:
    if not any(p for pair in pads for p in pair):
        return x
    (t0, t1), (h0, h1), (w0, w1) = pads
    if temporal == "edge" and (t0 or t1):
        x = np.pad(x, ((0, 0), (t0, t1), (0, 0), (0, 0), (0, 0)), mode="edge")
        t0 = t1 = 0
    return np.pad(x, ((0, 0), (t0, t1), (h0, h1), (w0, w1), (0, 0)), constant_values=fill)


def _unpad(gp: np.ndarray, pads, temporal: str, shape) -> np.ndarray:
    """Adjoint of :func:`_pad`: crop, folding edge-padded frames back onto the ends."""
    (t0, t1), (h0, _), (w0, _) = pads
    T, H, W = shape[1:4]
    g = gp[:, :, h0 : h0 + H, w0 : w0 + W]
    core = g[:, t0 : t0 + T]
    if temporal == "edge" and (t0 or t1):
        core = core.copy()
        if t0:
            core[:, 0] += g[:, :t0].sum(axis=1)
        if t1:
            core[:, -1] += g[:, t0 + T :].sum(axis=1)
        return core
    return np.ascontiguousarray(core)


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Strided view ``(N, To, Ho, Wo, C, kt, kh, kw)`` of all kernel windows."""
    v = sliding_window_view(xp, kernel, axis=(1, 2, 3))
    st, sh, sw = stride
    To, Ho, Wo = out
    return v[:, : (To - 1) * st + 1 : st, : (Ho - 1) * sh + 1 : sh, : (Wo - 1) * sw + 1 : sw]


def _scatter_windows(dcols: np.ndarray, padded_shape, kernel: Triple, stride: Triple, out: Triple, dtype) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum ``(N,To,Ho,Wo,kt,kh,kw,C)`` back onto the padded input."""
    dxp = np.zeros(padded_shape, dtype=dtype)
    st, sh, sw = stride
    To, Ho, Wo = out
    kt, kh, kw = kernel
    for a in range(kt):
        ts = slice(a, a + (To - 1) * st + 1, st)
        for b in range(kh):
            hs = slice(b, b + (Ho - 1) * sh + 1, sh)
            for c in range(kw):
                ws = slice(c, c + (Wo - 1) * sw + 1, sw)
                dxp[:, ts, hs, ws, :] += dcols[:, :, :, :, a, b, c, :]
    return dxp


# -- convolution ---------------------------------------------------------------
@dataclass
class FilterBank:
    """Convolution weights ``(kt, kh, kw, c_in, c_out)`` with bias and geometry."""

    weight: Tensor
    bias: Tensor | None = None
    stride: Triple = (1, 1, 1)
    padding: str = "SAME"
    temporal_pad: str = "zeros"

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
        self.stride = _triple(self.stride)
        if self.weight.ndim != 5:
            raise ShapeError(f"filter weights must be rank 5 (kt,kh,kw,cin,cout), got {self.weight.shape}")
        if min(self.weight.shape[:3]) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel extents and strides must be >= 1: {self.weight.shape[:3]}, {self.stride}")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.c_out}")
        if self.padding not in ("SAME", "VALID"):
            raise ValueError(f"padding must be SAME or VALID, got {self.padding!r}")
        if self.temporal_pad not in ("zeros", "edge"):
            raise ValueError(f"temporal_pad must be 'zeros' or 'edge', got {self.temporal_pad!r}")

    @property
    def kernel(self) -> Triple:
        return self.weight.shape[:3]  # type: ignore[return-value]

    @property
    def c_in(self) -> int:
        return self.weight.shape[3]

    @property
    def c_out(self) -> int:
        return self.weight.shape[4]

    @property
    def is_2d(self) -> bool:
        return self.kernel[0] == 1

    @property
    def is_temporal(self) -> bool:
        return self.kernel[1] == 1 and self.kernel[2] == 1


def conv3d(x: Tensor, f: FilterBank) -> Tensor:
    """3D convolution (cross-correlation) of a video tensor with a filter bank."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (N,T,H,W,C) input, got {x.shape}")
    N, T, H, W, C = x.shape
    if C != f.c_in:
        raise ShapeError(f"conv3d channel mismatch: input has {C} channels, filter expects {f.c_in}")
    kernel, stride = f.kernel, f.stride
    out, pads = _pads((T, H, W), kernel, stride, f.padding)
    if min(out) < 1:
        raise ShapeError(f"VALID convolution of extents {(T, H, W)} with kernel {kernel} leaves no output")
    w = f.weight
    cout = f.c_out
    wmat = w.data.reshape(-1, cout)

    if kernel == (1, 1, 1) and pads == ((0, 0), (0, 0), (0, 0)):
        xs = x.data[:, :: stride[0], :: stride[1], :: stride[2]]
        cols = np.ascontiguousarray(xs).reshape(-1, C)
        padded_shape = None
    else:
        xp = _pad(x.data, pads, f.temporal_pad, 0.0)
        padded_shape = xp.shape
        v = _windows(xp, kernel, stride, out)
        cols = np.ascontiguousarray(v.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(-1, wmat.shape[0])
    y = cols @ wmat
    if f.bias is not None:
        y += f.bias.data
    y = y.reshape(N, *out, cout)
    bias = f.bias

    def fn(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if padded_shape is None:
                gx = np.zeros(x.shape, dtype=g.dtype)
                gx[:, :: stride[0], :: stride[1], :: stride[2]] = dcols.reshape(N, *out, C)
            else:
                dcols = dcols.reshape(N, *out, *kernel, C)
                gp = _scatter_windows(dcols, padded_shape, kernel, stride, out, g.dtype)
                gx = _unpad(gp, pads, f.temporal_pad, x.shape)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return _make(y, parents, fn)


def sepconv3d(x: Tensor, spatial: FilterBank, temporal: FilterBank) -> Tensor:
    """Spatial ``1 x k x k`` convolution followed by temporal ``kt x 1 x 1``."""
    if not spatial.is_2d:
        raise ShapeError(f"spatial filter must have kt == 1, got kernel {spatial.kernel}")
    if not temporal.is_temporal:
        raise ShapeError(f"temporal filter must have kh == kw == 1, got kernel {temporal.kernel}")
    if spatial.c_out != temporal.c_in:
        raise ShapeError(f"sepconv3d: spatial c_out {spatial.c_out} != temporal c_in {temporal.c_in}")
    return conv3d(conv3d(x, spatial), temporal)


# -- pooling -------------------------------------------------------------------
def maxpool3d(x: Tensor, window, stride, padding: str = "SAME") -> Tensor:
    """Windowed maximum; gradients route to the first maximal element in scan order."""
    window, stride = _triple(window), _triple(stride)
    if min(window) < 1 or min(stride) < 1:
        raise ValueError(f"window and stride must be positive: {window}, {stride}")
    N, T, H, W, C = x.shape
    out, pads = _pads((T, H, W), window, stride, padding)
    padded = [n + p0 + p1 for n, (p0, p1) in zip((T, H, W), pads)]
    if any(k > n for k, n in zip(window, padded)):
        raise ShapeError(f"pool window {window} larger than padded input {tuple(padded)}")
    if window == (1, 1, 1):
        xs = x.data[:, :: stride[0], :: stride[1], :: stride[2]]

        def fn_id(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[:, :: stride[0], :: stride[1], :: stride[2]] = g
            return (gx,)

        return _make(np.ascontiguousarray(xs), (x,), fn_id)
    xp = _pad(x.data, pads, "zeros", -np.inf)
    v = _windows(xp, window, stride, out)
    flat = v.reshape(N, *out, C, -1)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        K = flat.shape[-1]
        routed = np.zeros((N, *out, C, K), dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(N, *out, C, *window).transpose(0, 1, 2, 3, 5, 6, 7, 4)
        gp = _scatter_windows(routed, xp.shape, window, stride, out, g.dtype)
        return (_unpad(gp, pads, "zeros", x.shape),)

    return _make(np.ascontiguousarray(y), (x,), fn)


def avgpool_spacetime(x: Tensor) -> Tensor:
    """Mean over ``(T, H, W)``: ``(N, T, H, W, C) -> (N, C)``."""
    if x.ndim != 5:
        raise ShapeError(f"avgpool_spacetime expects a rank-5 tensor, got {x.shape}")
    return x.mean(axis=(1, 2, 3))


def temporal_avgpool(x: Tensor, size: int) -> Tensor:
    """Average non-overlapping groups of ``size`` frames.

    A ragged tail is completed by repeating the last frame.
    """
    N, T, H, W, C = x.shape
    groups = -(-T // size)
    extra = groups * size - T
    data = x.data
    if extra:
        data = np.concatenate([data, np.repeat(data[:, -1:], extra, axis=1)], axis=1)
    y = data.reshape(N, groups, size, H, W, C).mean(axis=2)

    def fn(g):
        gx = np.repeat(g / size, size, axis=1)
        if extra:
            tail = gx[:, T:].sum(axis=1)
            gx = gx[:, :T].copy()
            gx[:, -1] += tail
        return (gx,)

    return _make(y, (x,), fn)


# -- normalization ---------------------------------------------------------------
@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


def batchnorm(
    x: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    gamma: Tensor | None = None,
) -> Tensor:
    """Per-channel batch normalization over ``(N, T, H, W)``.

    Training mode normalizes with batch statistics and updates the running
    averages; evaluation mode uses the running averages.  ``gamma=None``
    means a fixed unit scale.
    """
    C = x.shape[-1]
    if beta.shape != (C,) or (gamma is not None and gamma.shape != (C,)):
        raise ShapeError(f"batchnorm parameters must have length {C}")
    axes = tuple(range(x.ndim - 1))
    scale = gamma.data if gamma is not None else 1.0
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mean).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var).astype(state.var.dtype)
    else:
        mean, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv
    y = xhat * scale + beta.data
    count = x.size // C

    def fn(g):
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gg = (g * xhat).sum(axis=axes) if gamma is not None and gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * scale
            if training:
                gx = (inv / count) * (
                    count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
                )
            else:
                gx = dxhat * inv
        return (gx, gb, gg) if gamma is not None else (gx, gb)

    parents = (x, beta, gamma) if gamma is not None else (x, beta)
    return _make(y.astype(x.dtype, copy=False), parents, fn)


# -- activations and losses ----------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (logits,), fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N = logits.shape[0]
    if labels.shape[0] != N:
        raise ShapeError(f"{labels.shape[0]} labels for {N} logit rows")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(N), labels].mean()

    def fn(g):
        grad = np.exp(logp)
        grad[np.arange(N), labels] -= 1.0
        return (grad * (g / N),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def reverse_time(x):
    """Flip a clip or batch of clips along the temporal axis."""
    if isinstance(x, Tensor):
        from .tensor import flip

        return flip(x, 1)
    arr = np.asarray(x)
    return np.flip(arr, axis=1 if arr.ndim == 5 else 0).copy()
