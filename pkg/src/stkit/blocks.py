"""Composite units: conv/BN/ReLU, separable convs, feature gating, Inception blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .ops import BatchNormState, FilterBank
from .tensor import ShapeError, Tensor, concat, default_dtype, matmul_vec, reshape

CONV_KINDS = ("2d", "3d", "sep")


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    ``BatchNormState`` attributes.  Child modules may be attributes or live in
    lists.  Traversal follows attribute insertion order, so names are stable.
    """

    training = False

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, BatchNormState):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")

    def modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.modules(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[f"{name}.mean"] = buf.mean.copy()
            state[f"{name}.var"] = buf.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype, copy=True)
        for name, buf in self.named_buffers():
            buf.mean = state[f"{name}.mean"].astype(buf.mean.dtype, copy=True)
            buf.var = state[f"{name}.var"].astype(buf.var.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=True)


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(default_dtype())


class ConvUnit(Module):
    """Convolution (no bias) followed by batch norm and an optional ReLU."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel,
        stride=(1, 1, 1),
        rng: np.random.Generator | None = None,
        temporal_pad: str = "edge",
        bn_scale: bool = False,
        activation: bool = True,
    ):
        rng = rng or np.random.default_rng(0)
        kernel = ops._triple(kernel)
        self.weight = _param(he_normal(rng, (*kernel, c_in, c_out)))
        self.beta = _param(np.zeros(c_out, dtype=default_dtype()))
        self.gamma = _param(np.ones(c_out, dtype=default_dtype())) if bn_scale else None
        self.bn = BatchNormState.create(c_out, dtype=default_dtype())
        self.stride = ops._triple(stride)
        self.temporal_pad = temporal_pad
        self.activation = activation

    @property
    def bank(self) -> FilterBank:
        return FilterBank(self.weight, None, self.stride, "SAME", self.temporal_pad)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv3d(x, self.bank)
        y = ops.batchnorm(y, self.beta, self.bn, self.training, self.gamma)
        return ops.relu(y) if self.activation else y


def feature_gate(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``sigmoid(W pool(x) + b)`` per (batch, channel), replicated over space-time."""
    n = W.shape[0]
    if x.shape[-1] != n:
        raise ShapeError(f"feature gate over {n} channels applied to input with {x.shape[-1]} channels")
    pooled = ops.avgpool_spacetime(x)
    gate = ops.sigmoid(matmul_vec(W, pooled, b))
    return x * reshape(gate, (x.shape[0], 1, 1, 1, n))


class FeatureGate(Module):
    """Channel gate with a square weight over channels; zero-initialized (gate = 0.5)."""

    def __init__(self, channels: int):
        self.W = _param(np.zeros((channels, channels), dtype=default_dtype()))
        self.b = _param(np.zeros(channels, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return feature_gate(x, self.W, self.b)


class SpatioTemporalConv(Module):
    """One ``kt x k x k`` convolution realized as 2D, full 3D or separable.

    ``2d`` drops the temporal extent.  A temporal stride on a 2D unit is
    realized by averaging non-overlapping frame groups after the spatial
    convolution, which keeps the unit insensitive to frame order.
    ``sep`` runs ``1 x k x k`` then ``kt x 1 x 1`` (each with BN and ReLU),
    optionally followed by a feature gate.
    """

    def __init__(
        self,
        kind: str,
        c_in: int,
        c_out: int,
        k: int,
        kt: int,
        stride=(1, 1),
        gated: bool = False,
        rng: np.random.Generator | None = None,
        temporal_pad: str = "edge",
        bn_scale: bool = False,
    ):
        if kind not in CONV_KINDS:
            raise ValueError(f"conv kind must be one of {CONV_KINDS}, got {kind!r}")
        if gated and kind != "sep":
            raise ValueError("gates are only placed after temporal convolutions (sep kind)")
        st, ss = stride
        self.kind = kind
        self.temporal_stride = st
        opts = dict(rng=rng, temporal_pad=temporal_pad, bn_scale=bn_scale)
        if kind == "3d":
            self.conv = ConvUnit(c_in, c_out, (kt, k, k), (st, ss, ss), **opts)
        elif kind == "2d":
            self.conv = ConvUnit(c_in, c_out, (1, k, k), (1, ss, ss), **opts)
        else:
            self.spatial = ConvUnit(c_in, c_out, (1, k, k), (1, ss, ss), **opts)
            self.temporal = ConvUnit(c_out, c_out, (kt, 1, 1), (st, 1, 1), **opts)
        self.gate = FeatureGate(c_out) if gated else None

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "sep":
            y = self.temporal(self.spatial(x))
            return self.gate(y) if self.gate is not None else y
        y = self.conv(x)
        if self.kind == "2d" and self.temporal_stride > 1:
            y = ops.temporal_avgpool(y, self.temporal_stride)
        return y


@dataclass(frozen=True)
class InceptionConfig:
    """Branch widths of one Inception block plus its convolution kind.

    Branches: ``b0`` 1x1; ``b1_reduce`` 1x1 then ``b1`` kxk; ``b2_reduce``
    1x1 then ``b2`` kxk; max-pool then ``b3`` 1x1.
    """

    b0: int
    b1_reduce: int
    b1: int
    b2_reduce: int
    b2: int
    b3: int
    kind: str = "2d"
    kt: int = 3
    k: int = 3
    gated: bool = False
    temporal_all_branches: bool = True

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"conv kind must be one of {CONV_KINDS}, got {self.kind!r}")
        if self.gated and self.kind != "sep":
            raise ValueError("gating requires the separable kind")
        for field_name in ("b0", "b1_reduce", "b1", "b2_reduce", "b2", "b3"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"branch width {field_name} must be positive")

    @property
    def out_channels(self) -> int:
        return self.b0 + self.b1 + self.b2 + self.b3

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.b0, self.b1_reduce, self.b1, self.b2_reduce, self.b2, self.b3)


class InceptionBlock(Module):
    """Four-branch Inception block of 2D, 3D or temporally separable kind.

    In the separable kind with ``temporal_all_branches`` every branch ends in
    a ``kt x 1 x 1`` convolution: the two kxk branches through their
    separable conv, the 1x1 and pool branches through a width-preserving
    temporal conv.  Gates follow each temporal conv when ``cfg.gated``.
    """

    def __init__(
        self,
        cfg: InceptionConfig,
        c_in: int,
        rng: np.random.Generator | None = None,
        temporal_pad: str = "edge",
        bn_scale: bool = False,
    ):
        self.cfg = cfg
        self.c_in = c_in
        opts = dict(rng=rng, temporal_pad=temporal_pad, bn_scale=bn_scale)
        sep = cfg.kind == "sep"
        extra_temporal = sep and cfg.temporal_all_branches
        gate_1x1 = cfg.gated and extra_temporal

        self.b0 = ConvUnit(c_in, cfg.b0, 1, **opts)
        self.b0_temporal = ConvUnit(cfg.b0, cfg.b0, (cfg.kt, 1, 1), **opts) if extra_temporal else None
        self.b0_gate = FeatureGate(cfg.b0) if gate_1x1 else None

        self.b1_reduce = ConvUnit(c_in, cfg.b1_reduce, 1, **opts)
        self.b1 = SpatioTemporalConv(cfg.kind, cfg.b1_reduce, cfg.b1, cfg.k, cfg.kt, gated=cfg.gated, **opts)
        self.b2_reduce = ConvUnit(c_in, cfg.b2_reduce, 1, **opts)
        self.b2 = SpatioTemporalConv(cfg.kind, cfg.b2_reduce, cfg.b2, cfg.k, cfg.kt, gated=cfg.gated, **opts)

        self.pool_window = (3, 3, 3) if cfg.kind == "3d" else (1, 3, 3)
        self.b3 = ConvUnit(c_in, cfg.b3, 1, **opts)
        self.b3_temporal = ConvUnit(cfg.b3, cfg.b3, (cfg.kt, 1, 1), **opts) if extra_temporal else None
        self.b3_gate = FeatureGate(cfg.b3) if gate_1x1 else None

    def branches(self, x: Tensor) -> list[Tensor]:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"Inception block expects {self.c_in} input channels, got {x.shape[-1]}")
        y0 = self.b0(x)
        if self.b0_temporal is not None:
            y0 = self.b0_temporal(y0)
        if self.b0_gate is not None:
            y0 = self.b0_gate(y0)
        y1 = self.b1(self.b1_reduce(x))
        y2 = self.b2(self.b2_reduce(x))
        y3 = self.b3(ops.maxpool3d(x, self.pool_window, (1, 1, 1)))
        if self.b3_temporal is not None:
            y3 = self.b3_temporal(y3)
        if self.b3_gate is not None:
            y3 = self.b3_gate(y3)
        return [y0, y1, y2, y3]

    def forward(self, x: Tensor) -> Tensor:
        return concat(self.branches(x), axis=-1)

    def temporal_units(self) -> list[ConvUnit]:
        """Every ``kt x 1 x 1`` conv unit in the block, in branch order."""
        units = []
        if self.b0_temporal is not None:
            units.append(self.b0_temporal)
        for branch in (self.b1, self.b2):
            if branch.kind == "sep":
                units.append(branch.temporal)
        if self.b3_temporal is not None:
            units.append(self.b3_temporal)
        return units


def inception_block(x: Tensor, block: InceptionBlock) -> Tensor:
    """Apply a 2D/3D Inception block (functional spelling)."""
    return block(x)


def sep_inception_block(x: Tensor, block: InceptionBlock) -> Tensor:
    if block.cfg.kind != "sep":
        raise ValueError(f"expected a separable block, got kind {block.cfg.kind!r}")
    return block(x)


def set_center_delta(unit: ConvUnit) -> None:
    """Make a temporal conv unit an exact identity map (center tap = I, BN = identity).

    Used to reduce separable blocks to their 2D counterparts.
    """
    kt, kh, kw, cin, cout = unit.weight.shape
    if (kh, kw) != (1, 1) or cin != cout:
        raise ShapeError(f"center delta needs a channel-preserving temporal kernel, got {unit.weight.shape}")
    w = np.zeros(unit.weight.shape, dtype=unit.weight.dtype)
    w[kt // 2, 0, 0] = np.eye(cin, dtype=w.dtype)
    unit.weight.data = w
    unit.beta.data = np.zeros_like(unit.beta.data)
    unit.bn.mean = np.zeros_like(unit.bn.mean)
    unit.bn.var = np.full_like(unit.bn.var, 1.0) - unit.bn.var.dtype.type(unit.bn.eps)
    if not np.all(unit.bn.var + unit.bn.var.dtype.type(unit.bn.eps) == 1.0):
        raise ArithmeticError("cannot represent an identity batch norm at this precision")
