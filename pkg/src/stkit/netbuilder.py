"""Declarative construction of the I3D / I2D / S3D / S3D-G network family.

An :class:`ArchSpec` is a flat list of :class:`LayerSpec` rows following the
inflated Inception-V1 layout.  Convolutional units that can be 2D, 3D or
separable carry a *surgery index* ``1..K_TOTAL`` (the two stem convs, then
the nine Inception blocks).  Top-heavy and bottom-heavy variants pick which
indices are 3D.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import yaml

from . import ops
from .blocks import ConvUnit, InceptionBlock, InceptionConfig, Module, SpatioTemporalConv, _param
from .tensor import Tensor, default_dtype, matmul

FAMILIES = ("I3D", "I2D", "BottomHeavy", "TopHeavy")
CONV_MODES = ("full", "separable")
FORMAT_TAG = "stkit-arch/1"

# name: (b0, b1_reduce, b1, b2_reduce, b2, b3)
INCEPTION_V1 = {
    "Mixed_3b": (64, 96, 128, 16, 32, 32),
    "Mixed_3c": (128, 128, 192, 32, 96, 64),
    "Mixed_4b": (192, 96, 208, 16, 48, 64),
    "Mixed_4c": (160, 112, 224, 24, 64, 64),
    "Mixed_4d": (128, 128, 256, 24, 64, 64),
    "Mixed_4e": (112, 144, 288, 32, 64, 64),
    "Mixed_4f": (256, 160, 320, 32, 128, 128),
    "Mixed_5b": (256, 160, 320, 32, 128, 128),
    "Mixed_5c": (384, 192, 384, 48, 128, 128),
}
SURGERY_UNITS = ("Conv_1a", "Conv_2c", *INCEPTION_V1)
K_TOTAL = len(SURGERY_UNITS)

FULL_INPUT = (64, 224, 224, 3)
MINI_INPUT = (16, 32, 32, 3)
MINI_DIVISOR = 8


@dataclass(frozen=True)
class LayerSpec:
    """One row of the layer table.

    ``type`` is ``conv``, ``maxpool``, ``inception`` or ``head``.  For convs
    ``kernel`` is ``(kt, k, k)`` with ``kt`` the temporal extent used when the
    unit is 3D or separable; for pools it is the window.
    """

    name: str
    type: str
    conv: str | None = None
    gated: bool = False
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)
    out_channels: int = 0
    widths: tuple[int, ...] = ()
    surgery: int | None = None

    def __post_init__(self):
        if self.type not in ("conv", "maxpool", "inception", "head"):
            raise ValueError(f"{self.name}: unknown layer type {self.type!r}")
        if self.type in ("conv", "inception") and self.conv not in ("2d", "3d", "sep"):
            raise ValueError(f"{self.name}: conv kind must be 2d, 3d or sep, got {self.conv!r}")
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))

    def inception_config(self) -> InceptionConfig:
        return InceptionConfig(*self.widths, kind=self.conv, kt=self.kernel[0], k=self.kernel[1], gated=self.gated)

    @property
    def channels(self) -> int:
        if self.type == "inception":
            b0, _, b1, _, b2, b3 = self.widths
            return b0 + b1 + b2 + b3
        return self.out_channels


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input: tuple[int, int, int, int] = FULL_INPUT
    classes: int = 400
    family: str = "I3D"
    conv_mode: str = "full"
    K: int | None = None
    gated: bool = False
    channel_divisor: int = 1
    bn_scale: bool = False
    dropout: float = 0.5
    temporal_pad: str = "edge"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        c = self.input[3]
        heads = 0
        for layer in self.layers:
            if layer.type == "conv":
                c = layer.out_channels
            elif layer.type == "inception":
                c = layer.channels
            elif layer.type == "head":
                heads += 1
                if layer.widths and layer.widths[0] != c:
                    raise ValueError(f"head expects {layer.widths[0]} channels, chain provides {c}")
        if heads != 1 or self.layers[-1].type != "head":
            raise ValueError("an architecture needs exactly one classifier head, as its last layer")
        indices = [l.surgery for l in self.layers if l.surgery is not None]
        if indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"surgery indices must run 1..K without gaps, got {indices}")

    def surgery_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.surgery is not None]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no layer named {name!r}; valid names: {[l.name for l in self.layers]}")

    def n_3d(self) -> int:
        return sum(1 for l in self.surgery_layers() if l.conv != "2d")


# -- variant construction ------------------------------------------------------------
def _scaled(width: int, divisor: int) -> int:
    return max(1, round(width / divisor))


def _unit_kinds(family: str, conv: str, K: int | None) -> list[str]:
    three = "sep" if conv == "separable" else "3d"
    if family == "I3D":
        return [three] * K_TOTAL
    if family == "I2D":
        return ["2d"] * K_TOTAL
    if K is None:
        raise ValueError(f"{family} needs a transition index K")
    if not 0 <= K <= K_TOTAL + 1:
        raise ValueError(f"K={K} out of range 0..{K_TOTAL + 1}")
    if family == "BottomHeavy":
        return [three if i <= K else "2d" for i in range(1, K_TOTAL + 1)]
    if family == "TopHeavy":
        return [three if i >= K else "2d" for i in range(1, K_TOTAL + 1)]
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def backbone_layers(kinds: Sequence[str], gated: bool = False, divisor: int = 1, classes: int = 400) -> list[LayerSpec]:
    """Inflated Inception-V1 layer table for per-unit conv kinds (length ``K_TOTAL``)."""
    if len(kinds) != K_TOTAL:
        raise ValueError(f"need {K_TOTAL} unit kinds, got {len(kinds)}")
    d = lambda w: _scaled(w, divisor)  # noqa: E731
    kind = dict(zip(SURGERY_UNITS, kinds))
    gate = lambda name: gated and kind[name] == "sep"  # noqa: E731
    # temporally strided pools overlap in time only next to temporal convs
    pool_t = lambda following: 3 if kind[following] != "2d" else 2  # noqa: E731
    layers = [
        LayerSpec("Conv_1a", "conv", kind["Conv_1a"], gate("Conv_1a"), (7, 7, 7), (2, 2, 2), d(64), surgery=1),
        LayerSpec("MaxPool_2a", "maxpool", kernel=(1, 3, 3), stride=(1, 2, 2)),
        LayerSpec("Conv_2b", "conv", "2d", False, (1, 1, 1), (1, 1, 1), d(64)),
        LayerSpec("Conv_2c", "conv", kind["Conv_2c"], gate("Conv_2c"), (3, 3, 3), (1, 1, 1), d(192), surgery=2),
        LayerSpec("MaxPool_3a", "maxpool", kernel=(1, 3, 3), stride=(1, 2, 2)),
    ]
    surgery = 3
    for name, widths in INCEPTION_V1.items():
        if name == "Mixed_4b":
            layers.append(LayerSpec("MaxPool_4a", "maxpool", kernel=(pool_t(name), 3, 3), stride=(2, 2, 2)))
        if name == "Mixed_5b":
            layers.append(LayerSpec("MaxPool_5a", "maxpool", kernel=(2, 2, 2), stride=(2, 2, 2)))
        layers.append(
            LayerSpec(name, "inception", kind[name], gate(name), (3, 3, 3), widths=tuple(d(w) for w in widths), surgery=surgery)
        )
        surgery += 1
    last = layers[-1].channels
    layers.append(LayerSpec("Logits", "head", out_channels=classes, widths=(last,)))
    return layers


def build_variant(
    family: str,
    conv: str = "full",
    K: int | None = None,
    gated: bool = False,
    preset: str = "full",
    classes: int | None = None,
    input_geometry: Sequence[int] | None = None,
    **options,
) -> ArchSpec:
    """Build one member of the surgery family.

    ``BottomHeavy(K)`` makes units with index ``<= K`` 3D; ``TopHeavy(K)``
    makes units with index ``>= K`` 3D.  ``conv="separable"`` turns every 3D
    unit into a spatial-then-temporal pair, and ``gated`` adds a feature gate
    after every temporal convolution.
    """
    if conv not in CONV_MODES:
        raise ValueError(f"conv must be one of {CONV_MODES}, got {conv!r}")
    if gated and conv != "separable":
        raise ValueError("gating is placed after temporal convolutions, which need conv='separable'")
    if preset not in ("full", "mini"):
        raise ValueError(f"preset must be 'full' or 'mini', got {preset!r}")
    divisor = MINI_DIVISOR if preset == "mini" else 1
    geometry = tuple(input_geometry) if input_geometry else (MINI_INPUT if preset == "mini" else FULL_INPUT)
    if classes is None:
        classes = 2 if preset == "mini" else 400
    kinds = _unit_kinds(family, conv, K)
    layers = backbone_layers(kinds, gated, divisor, classes)
    label = family if family in ("I3D", "I2D") else f"{family}(K={K})"
    if conv == "separable" and family != "I2D":
        label = label.replace("I3D", "S3D") + ("-G" if gated and family == "I3D" else "")
    return ArchSpec(
        name=label,
        layers=tuple(layers),
        input=geometry,
        classes=classes,
        family=family,
        conv_mode=conv,
        K=K if family in ("BottomHeavy", "TopHeavy") else None,
        gated=gated,
        channel_divisor=divisor,
        **options,
    )


PRESETS = {
    "i3d": dict(family="I3D", conv="full"),
    "i2d": dict(family="I2D", conv="full"),
    "s3d": dict(family="I3D", conv="separable"),
    "s3dg": dict(family="I3D", conv="separable", gated=True),
    "fast-s3d": dict(family="TopHeavy", conv="separable", K=K_TOTAL - 1),
}


def preset(name: str, **kw) -> ArchSpec:
    """Named variants: ``i3d``, ``i2d``, ``s3d``, ``s3dg``, ``fast-s3d``."""
    key = name.lower()
    if key not in PRESETS:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(PRESETS)}")
    spec = build_variant(**PRESETS[key], **kw)
    return replace(spec, name={"i3d": "I3D", "i2d": "I2D", "s3d": "S3D", "s3dg": "S3D-G", "fast-s3d": "Fast-S3D"}[key])


def with_kinds(spec: ArchSpec, kinds: Sequence[str]) -> ArchSpec:
    """Same backbone as ``spec`` but with the given per-unit kinds."""
    layers = backbone_layers(kinds, spec.gated, spec.channel_divisor, spec.classes)
    return replace(spec, layers=tuple(layers), name=spec.name + "-kinds")


def as_2d(spec: ArchSpec) -> ArchSpec:
    """The fully 2D counterpart used as the inflation source."""
    layers = backbone_layers(["2d"] * K_TOTAL, False, spec.channel_divisor, spec.classes)
    return replace(spec, layers=tuple(layers), name=spec.name + "-2d", family="I2D", gated=False, K=None)


# -- geometry / describe --------------------------------------------------------------
def _unit_stride(layer: LayerSpec) -> tuple[int, int, int]:
    return layer.stride


def walk_geometry(spec: ArchSpec, geometry: Sequence[int] | None = None) -> Iterator[tuple[LayerSpec, tuple[int, int, int, int]]]:
    """Yield each layer with its output geometry ``(T, H, W, C)``."""
    T, H, W, C = geometry or spec.input
    for layer in spec.layers:
        if layer.type in ("conv", "maxpool"):
            T, H, W = ops.output_extents((T, H, W), layer.kernel, layer.stride)
            if layer.type == "conv":
                C = layer.out_channels
        elif layer.type == "inception":
            C = layer.channels
        else:
            T, H, W, C = 1, 1, 1, layer.out_channels
        yield layer, (T, H, W, C)


def describe(spec: ArchSpec, geometry: Sequence[int] | None = None) -> list[dict]:
    """Per-layer table: kind, kernel actually applied, stride, channels, output geometry."""
    rows = []
    for layer, (T, H, W, C) in walk_geometry(spec, geometry):
        kernel = layer.kernel
        if layer.type in ("conv", "inception") and layer.conv == "2d":
            kernel = (1, *kernel[1:])
        if layer.type == "inception":
            kernel = (kernel[0] if layer.conv != "2d" else 1, 3, 3)
        rows.append(
            {
                "name": layer.name,
                "type": layer.type,
                "conv": layer.conv or "",
                "gated": layer.gated,
                "kernel": "x".join(map(str, kernel)) if layer.type != "head" else "",
                "stride": _stride_text(layer),
                "channels": C,
                "output": f"{T}x{H}x{W}x{C}",
                "surgery": layer.surgery if layer.surgery is not None else "",
            }
        )
    return rows


def _stride_text(layer: LayerSpec) -> str:
    if layer.type == "head":
        return ""
    st, sh, sw = layer.stride
    if layer.type == "conv" and layer.conv == "2d" and st > 1:
        # frame order is discarded by averaging pairs instead of striding
        return f"1x{sh}x{sw}+tavg{st}"
    return f"{st}x{sh}x{sw}"


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).ljust(width[c]) for c in cols) for r in rows]
    return "\n".join(line.rstrip() for line in lines)


def temporal_pools(spec: ArchSpec) -> list[LayerSpec]:
    return [l for l in spec.layers if l.type == "maxpool" and l.stride[0] > 1]


# -- config file format ---------------------------------------------------------------
_HEADER_KEYS = ("name", "family", "conv_mode", "K", "gated", "classes", "channel_divisor", "bn_scale", "dropout", "temporal_pad")


def serialize(spec: ArchSpec) -> str:
    """YAML text: header keys, input geometry, then the full layer list."""
    doc = {"format": FORMAT_TAG}
    for key in _HEADER_KEYS:
        doc[key] = getattr(spec, key)
    doc["input"] = dict(zip(("frames", "height", "width", "channels"), spec.input))
    doc["layers"] = []
    for layer in spec.layers:
        row = {k: v for k, v in asdict(layer).items() if v not in (None, (), 0) or k in ("name", "type")}
        for k in ("kernel", "stride", "widths"):
            if k in row:
                row[k] = list(row[k])
        if not row.get("gated"):
            row.pop("gated", None)
        doc["layers"].append(row)
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None, width=120)


def parse(text: str, overrides: dict | None = None) -> ArchSpec:
    """Inverse of :func:`serialize`.

    A file may instead give only ``family``/``conv_mode``/``K``/``gated``/
    ``preset`` keys, in which case the layer list is generated.  Keys in
    ``overrides`` take precedence over the file.
    """
    doc = yaml.safe_load(text) or {}
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if doc.get("format", FORMAT_TAG) != FORMAT_TAG:
        raise ValueError(f"unsupported architecture format {doc.get('format')!r}")
    geom = doc.get("input")
    geometry = None
    if isinstance(geom, dict):
        geometry = tuple(int(geom[k]) for k in ("frames", "height", "width", "channels"))
    elif geom:
        geometry = tuple(int(v) for v in geom)
    if "layers" not in doc:
        preset_name = doc.get("preset", "full")
        opts = {k: doc[k] for k in ("bn_scale", "dropout", "temporal_pad") if k in doc}
        spec = build_variant(
            doc.get("family", "I3D"),
            doc.get("conv_mode", "full"),
            doc.get("K"),
            bool(doc.get("gated", False)),
            preset=preset_name,
            classes=doc.get("classes"),
            input_geometry=geometry,
            **opts,
        )
        return replace(spec, name=doc.get("name", spec.name))
    layers = []
    for row in doc["layers"]:
        layers.append(LayerSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in row.items()}))
    kw = {k: doc[k] for k in _HEADER_KEYS if k in doc}
    if geometry:
        kw["input"] = geometry
    return ArchSpec(layers=tuple(layers), **kw)


# -- runnable network -----------------------------------------------------------------
class Head(Module):
    """Space-time average pool, dropout, linear map to class logits."""

    def __init__(self, c_in: int, classes: int, rng: np.random.Generator, dropout: float = 0.5):
        # small logits at init so the first loss sits at ln(classes)
        self.weight = _param(rng.normal(0.0, 0.01, size=(c_in, classes)).astype(default_dtype()))
        self.bias = _param(np.zeros(classes, dtype=default_dtype()))
        self.dropout = dropout
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        pooled = ops.avgpool_spacetime(x)
        pooled = ops.dropout(pooled, self.dropout, self.rng, self.training)
        return matmul(pooled, self.weight) + self.bias


class Network(Module):
    """Parameters and forward pass for an :class:`ArchSpec`."""

    def __init__(self, spec: ArchSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        opts = dict(rng=rng, temporal_pad=spec.temporal_pad, bn_scale=spec.bn_scale)
        self.units: list[Module] = []
        self.names: list[str] = []
        c = spec.input[3]
        for layer in spec.layers:
            if layer.type == "conv":
                kt, k, _ = layer.kernel
                if layer.conv == "2d" and layer.kernel[0] == 1 and layer.kernel[1] == 1:
                    unit = ConvUnit(c, layer.out_channels, 1, layer.stride, **opts)
                else:
                    unit = SpatioTemporalConv(
                        layer.conv, c, layer.out_channels, k, kt, (layer.stride[0], layer.stride[1]), layer.gated, **opts
                    )
                c = layer.out_channels
            elif layer.type == "inception":
                unit = InceptionBlock(layer.inception_config(), c, **opts)
                c = layer.channels
            elif layer.type == "head":
                unit = Head(c, layer.out_channels, rng, spec.dropout)
            else:
                unit = None
            if unit is not None:
                self.units.append(unit)
                self.names.append(layer.name)
        self._layers = spec.layers

    def unit(self, name: str) -> Module:
        if name not in self.names:
            raise KeyError(f"no parametrized layer {name!r}; valid names: {self.names}")
        return self.units[self.names.index(name)]

    def run(self, x: Tensor, collect: bool = False, stop_at: str | None = None):
        """Forward pass; optionally returns every layer's output keyed by name."""
        if x.ndim != 5 or x.shape[-1] != self.spec.input[3]:
            raise ValueError(f"expected (N,T,H,W,{self.spec.input[3]}) input, got {x.shape}")
        acts = {}
        units = iter(self.units)
        for layer in self._layers:
            if layer.type == "maxpool":
                x = ops.maxpool3d(x, layer.kernel, layer.stride)
            else:
                x = next(units)(x)
            if collect:
                acts[layer.name] = x
            if stop_at == layer.name:
                return acts if collect else x
        return acts if collect else x

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)

    def layer_names(self) -> list[str]:
        return [l.name for l in self._layers]

    def conv_units(self) -> Iterator[tuple[str, ConvUnit]]:
        for name, module in self.modules():
            if isinstance(module, ConvUnit):
                yield name, module


def build_network(spec: ArchSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


# -- inflation ------------------------------------------------------------------------------
def inflate(source: Network, target: Network) -> Network:
    """Initialize ``target`` from a 2D network of the same backbone.

    Every 3D kernel gets the 2D kernel repeated over time and divided by
    ``kt``, so a temporally constant clip produces the 2D activations.
    Separable temporal convs start as the temporal average (identity channel
    mixing divided by ``kt``) with an identity batch norm.  Pointwise convs,
    batch-norm state and the head are copied.
    """
    if len(source.units) != len(target.units) or source.names != target.names:
        raise ValueError("inflation needs networks built on the same backbone")
    if source.units[-1].weight.shape != target.units[-1].weight.shape:
        raise ValueError(f"classifier shapes differ: {source.units[-1].weight.shape} vs {target.units[-1].weight.shape}")
    src = dict(source.conv_units())
    for name, unit in target.conv_units():
        key = name.replace(".spatial", ".conv")
        if name.endswith(".temporal") or name.endswith("_temporal"):
            _init_temporal_average(unit)
            continue
        if key not in src:
            raise KeyError(f"no 2D source for {name}")
        s = src[key]
        w2 = s.weight.data
        kt = unit.weight.shape[0]
        if w2.shape[0] != 1 or w2.shape[1:] != unit.weight.shape[1:]:
            raise ValueError(f"{name}: cannot inflate {w2.shape} into {unit.weight.shape}")
        unit.weight.data = np.repeat(w2, kt, axis=0) / unit.weight.dtype.type(kt)
        unit.beta.data = s.beta.data.copy()
        if unit.gamma is not None and s.gamma is not None:
            unit.gamma.data = s.gamma.data.copy()
        unit.bn.mean, unit.bn.var = s.bn.mean.copy(), s.bn.var.copy()
    head_s, head_t = source.units[-1], target.units[-1]
    head_t.weight.data = head_s.weight.data.copy()
    head_t.bias.data = head_s.bias.data.copy()
    return target


def _init_temporal_average(unit: ConvUnit) -> None:
    kt, _, _, cin, cout = unit.weight.shape
    w = np.zeros(unit.weight.shape, dtype=unit.weight.dtype)
    w[:, 0, 0] = np.eye(cin, cout, dtype=w.dtype) / kt
    unit.weight.data = w
    unit.beta.data = np.zeros_like(unit.beta.data)
    unit.bn.mean = np.zeros_like(unit.bn.mean)
    unit.bn.var = np.full_like(unit.bn.var, 1.0) - unit.bn.var.dtype.type(unit.bn.eps)
