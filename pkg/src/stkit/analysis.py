"""Analytic cost accounting and trained-network probes.

Costs are computed from an :class:`ArchSpec` alone, walking the same unit
structure that :class:`~stkit.netbuilder.Network` instantiates; the test
suite checks that the parameter walk agrees with a built network.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .blocks import ConvUnit, Module
from .netbuilder import K_TOTAL, ArchSpec, Network, build_variant, walk_geometry
from .tensor import Tensor, no_grad

CSV_VERSION = 1
COST_COLUMNS = ("name", "type", "params", "macs", "flops", "elementwise_flops", "out_t", "out_h", "out_w", "out_c", "activations")
OFFSET_COLUMNS = ("layer", "offset", "count", "mean", "std", "min", "q25", "median", "q75", "max")
CURVE_COLUMNS = ("family", "conv", "K", "n_3d", "flops", "gflops")
BN_MODES = ("none", "beta", "full")


@dataclass(frozen=True)
class Convention:
    """How costs are tallied.

    ``mac_factor`` FLOPs per multiply-accumulate (1 or 2).  ``bn`` counts no
    batch-norm parameters, only the trained ones (beta, plus gamma when
    enabled), or also the two running statistics.  ``head`` includes the
    classifier.  ``elementwise`` adds the elementwise column into ``flops``.
    """

    mac_factor: int = 1
    bn: str = "beta"
    head: bool = True
    elementwise: bool = False

    def __post_init__(self):
        if self.mac_factor not in (1, 2):
            raise ValueError(f"mac_factor must be 1 or 2, got {self.mac_factor}")
        if self.bn not in BN_MODES:
            raise ValueError(f"bn must be one of {BN_MODES}, got {self.bn!r}")

    @property
    def tag(self) -> str:
        return f"mac={self.mac_factor};bn={self.bn};head={int(self.head)};elementwise={int(self.elementwise)}"

    @classmethod
    def from_tag(cls, tag: str) -> "Convention":
        kv = dict(part.split("=", 1) for part in tag.split(";") if part)
        return cls(int(kv.get("mac", 1)), kv.get("bn", "beta"), kv.get("head", "1") == "1", kv.get("elementwise", "0") == "1")


DEFAULT_CONVENTION = Convention()


@dataclass
class LayerCost:
    name: str
    type: str
    params: int = 0
    macs: int = 0
    flops: int = 0
    elementwise_flops: int = 0
    output: tuple[int, int, int, int] = (0, 0, 0, 0)
    activations: int = 0


@dataclass
class CostReport:
    arch: str
    geometry: tuple[int, int, int, int]
    convention: Convention
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def elementwise_flops(self) -> int:
        return sum(r.elementwise_flops for r in self.rows)

    @property
    def activations(self) -> int:
        return sum(r.activations for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def mparams(self) -> float:
        return self.params / 1e6

    def row(self, name: str) -> LayerCost:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(f"no row {name!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# stkit-costreport v{CSV_VERSION} arch={self.arch} geometry={'x'.join(map(str, self.geometry))} convention={self.convention.tag}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COST_COLUMNS)
        for r in self.rows:
            w.writerow([r.name, r.type, r.params, r.macs, r.flops, r.elementwise_flops, *r.output, r.activations])
        w.writerow(["TOTAL", "", self.params, self.macs, self.flops, self.elementwise_flops, "", "", "", "", self.activations])
        return buf.getvalue()


# -- per-unit tallies ----------------------------------------------------------------
class _Tally:
    def __init__(self, conv: Convention, bn_scale: bool):
        self.conv = conv
        self.bn_scale = bn_scale
        self.params = 0
        self.macs = 0
        self.elem = 0

    def bn_params(self, channels: int) -> int:
        if self.conv.bn == "none":
            return 0
        n = channels * (2 if self.bn_scale else 1)
        return n + (2 * channels if self.conv.bn == "full" else 0)

    def unit(self, geom, c_out, kernel, stride):
        """Conv + BN + ReLU; returns the output geometry."""
        T, H, W, C = geom
        To, Ho, Wo = ops.output_extents((T, H, W), kernel, stride)
        taps = math.prod(kernel) * C * c_out
        self.params += taps + self.bn_params(c_out)
        self.macs += taps * To * Ho * Wo
        self.elem += 2 * To * Ho * Wo * c_out  # BN affine + ReLU
        return (To, Ho, Wo, c_out)

    def gate(self, geom):
        T, H, W, C = geom
        self.params += C * C + C
        self.macs += C * C
        self.elem += 2 * T * H * W * C + C  # pooling sum, product, sigmoid

    def maxpool(self, geom, window, stride):
        T, H, W, C = geom
        To, Ho, Wo = ops.output_extents((T, H, W), window, stride)
        self.elem += math.prod(window) * To * Ho * Wo * C
        return (To, Ho, Wo, C)

    def st_conv(self, geom, kind, c_out, k, kt, st, ss, gated):
        if kind == "3d":
            return self.unit(geom, c_out, (kt, k, k), (st, ss, ss))
        if kind == "2d":
            g = self.unit(geom, c_out, (1, k, k), (1, ss, ss))
            if st > 1:
                self.elem += math.prod(g)
                g = (-(-g[0] // st), *g[1:])
            return g
        g = self.unit(geom, c_out, (1, k, k), (1, ss, ss))
        g = self.unit(g, c_out, (kt, 1, 1), (st, 1, 1))
        if gated:
            self.gate(g)
        return g


def _layer_costs(spec: ArchSpec, geometry, convention: Convention) -> list[LayerCost]:
    rows = []
    geom = tuple(geometry)
    for layer, _ in walk_geometry(spec, geometry):
        t = _Tally(convention, spec.bn_scale)
        if layer.type == "conv":
            kt, k, _ = layer.kernel
            if layer.conv == "2d" and kt == 1 and k == 1:
                out = t.unit(geom, layer.out_channels, (1, 1, 1), layer.stride)
            else:
                out = t.st_conv(geom, layer.conv, layer.out_channels, k, kt, layer.stride[0], layer.stride[1], layer.gated)
        elif layer.type == "maxpool":
            out = t.maxpool(geom, layer.kernel, layer.stride)
        elif layer.type == "inception":
            cfg = layer.inception_config()
            sep = cfg.kind == "sep"
            g0 = t.unit(geom, cfg.b0, (1, 1, 1), (1, 1, 1))
            if sep and cfg.temporal_all_branches:
                g0 = t.unit(g0, cfg.b0, (cfg.kt, 1, 1), (1, 1, 1))
                if cfg.gated:
                    t.gate(g0)
            for red, width in ((cfg.b1_reduce, cfg.b1), (cfg.b2_reduce, cfg.b2)):
                g = t.unit(geom, red, (1, 1, 1), (1, 1, 1))
                t.st_conv(g, cfg.kind, width, cfg.k, cfg.kt, 1, 1, cfg.gated)
            g = t.maxpool(geom, (3, 3, 3) if cfg.kind == "3d" else (1, 3, 3), (1, 1, 1))
            g = t.unit(g, cfg.b3, (1, 1, 1), (1, 1, 1))
            if sep and cfg.temporal_all_branches:
                g = t.unit(g, cfg.b3, (cfg.kt, 1, 1), (1, 1, 1))
                if cfg.gated:
                    t.gate(g)
            out = (*g0[:3], cfg.out_channels)
        else:  # head
            T, H, W, C = geom
            t.elem += T * H * W * C
            if convention.head:
                t.params += C * layer.out_channels + layer.out_channels
                t.macs += C * layer.out_channels
            out = (1, 1, 1, layer.out_channels)
        flops = convention.mac_factor * t.macs + (t.elem if convention.elementwise else 0)
        rows.append(LayerCost(layer.name, layer.type, t.params, t.macs, flops, t.elem, tuple(out), math.prod(out)))
        geom = out
    return rows


def count_params(spec: ArchSpec, convention: Convention = DEFAULT_CONVENTION) -> CostReport:
    """Exact per-layer parameter counts (FLOP columns are filled for the spec's input geometry)."""
    return CostReport(spec.name, tuple(spec.input), convention, _layer_costs(spec, spec.input, convention))


def count_flops(spec: ArchSpec, geometry: Sequence[int] | None = None, convention: Convention = DEFAULT_CONVENTION) -> CostReport:
    """Per-layer FLOPs for one clip of ``geometry`` = (T, H, W[, C])."""
    geometry = tuple(geometry) if geometry is not None else tuple(spec.input)
    if len(geometry) == 3:
        geometry = (*geometry, spec.input[3])
    if len(geometry) != 4 or min(geometry) < 1:
        raise ValueError(f"geometry must be four positive extents (T,H,W,C), got {geometry}")
    return CostReport(spec.name, geometry, convention, _layer_costs(spec, geometry, convention))


def conv_params(kernel: Sequence[int], c_in: int, c_out: int, bias: bool = True) -> int:
    """Parameters of one plain convolution."""
    return math.prod(kernel) * c_in * c_out + (c_out if bias else 0)


def conv_flops(kernel, c_in, c_out, out_extent, mac_factor: int = 1, bias: bool = False) -> int:
    """FLOPs of one plain convolution: MACs x factor, plus one add per output when biased."""
    outs = math.prod(out_extent) * c_out
    return mac_factor * math.prod(kernel) * c_in * outs + (outs if bias else 0)


def network_param_count(net: Module, convention: Convention = DEFAULT_CONVENTION) -> int:
    """Count a built network's parameters under the same convention (cross-check)."""
    total = 0
    head = _head_prefix(net)
    for name, p in net.named_parameters():
        if name.startswith(head) and not convention.head:
            continue
        if name.endswith(("beta", "gamma")) and convention.bn == "none":
            continue
        total += p.size
    if convention.bn == "full":
        total += sum(b.mean.size + b.var.size for _, b in net.named_buffers())
    return total


def _head_prefix(net: Module) -> str:
    if isinstance(net, Network):
        return f"units.{len(net.units) - 1}."
    return "\0"


# -- tradeoff curve -----------------------------------------------------------------------
def tradeoff_curve(family: str, conv: str = "full", geometry: Sequence[int] = (64, 224, 224, 3), convention: Convention = DEFAULT_CONVENTION, **kw) -> list[dict]:
    """FLOPs for every transition index K of a surgery family."""
    if family not in ("TopHeavy", "BottomHeavy"):
        raise ValueError(f"tradeoff curves are defined for TopHeavy and BottomHeavy, got {family!r}")
    ks = range(1, K_TOTAL + 2) if family == "TopHeavy" else range(0, K_TOTAL + 1)
    rows = []
    for K in ks:
        spec = build_variant(family, conv, K, input_geometry=geometry, **kw)
        rep = count_flops(spec, geometry, convention)
        rows.append({"family": family, "conv": conv, "K": K, "n_3d": spec.n_3d(), "flops": rep.flops, "gflops": round(rep.gflops, 6)})
    return rows


def curve_csv(rows: Iterable[dict], convention: Convention = DEFAULT_CONVENTION) -> str:
    buf = io.StringIO()
    buf.write(f"# stkit-curve v{CSV_VERSION} convention={convention.tag}\n")
    w = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


PLOT_CURVE_SCRIPT = '''"""Render FLOPs against the number of 3D units from stkit curve CSVs."""
import csv, sys
import matplotlib.pyplot as plt

for path in sys.argv[1:] or ["curve.csv"]:
    with open(path) as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    label = f"{rows[0]['family']} ({rows[0]['conv']})"
    plt.plot([int(r["n_3d"]) for r in rows], [float(r["gflops"]) for r in rows], marker="o", label=label)
plt.xlabel("3D units")
plt.ylabel("GFLOPs")
plt.legend()
plt.savefig("curve.png", dpi=120)
'''

PLOT_OFFSETS_SCRIPT = '''"""Render per-offset weight distributions from an stkit offset-stats CSV as boxplots."""
import csv, sys
from collections import defaultdict
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "offsets.csv"
with open(path) as fh:
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
layers = defaultdict(list)
for r in rows:
    layers[r["layer"]].append(r)
fig, axes = plt.subplots(1, len(layers), figsize=(3 * len(layers), 3), squeeze=False)
for ax, (name, rs) in zip(axes[0], layers.items()):
    stats = [dict(label=r["offset"], whislo=float(r["min"]), q1=float(r["q25"]), med=float(r["median"]),
                  q3=float(r["q75"]), whishi=float(r["max"])) for r in rs]
    ax.bxp(stats, showfliers=False)
    ax.set_title(name, fontsize=7)
fig.tight_layout()
fig.savefig("offsets.png", dpi=120)
'''


# -- weight offset statistics ---------------------------------------------------------------
@dataclass
class OffsetStats:
    rows: list[dict] = field(default_factory=list)
    notice: str = ""

    def layers(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["layer"] not in seen:
                seen.append(r["layer"])
        return seen

    def for_layer(self, layer: str) -> list[dict]:
        return [r for r in self.rows if r["layer"] == layer]

    def off_center_ratio(self, layer: str) -> float:
        """Pooled stddev of off-center offsets divided by the center stddev."""
        rs = self.for_layer(layer)
        center = [r for r in rs if r["offset"] == 0][0]
        off = [r for r in rs if r["offset"] != 0]
        pooled = math.sqrt(sum(r["std"] ** 2 + r["mean"] ** 2 for r in off) / len(off) - (sum(r["mean"] for r in off) / len(off)) ** 2)
        return pooled / center["std"] if center["std"] > 0 else math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# stkit-offsets v{CSV_VERSION}{' notice=' + self.notice if self.notice else ''}\n")
        w = csv.DictWriter(buf, fieldnames=OFFSET_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def temporal_kernels(net: Module) -> list[tuple[str, ConvUnit]]:
    """Conv units with a temporal extent > 1, bottom to top."""
    return [(name, u) for name, u in net.modules() if isinstance(u, ConvUnit) and u.weight.shape[0] > 1]


def unit_offset_ratios(net: Network) -> list[tuple[str, float]]:
    """Off-center / center weight stddev per surgery unit, bottom to top.

    All temporal kernels inside a unit are pooled, one population per offset
    class (center vs off-center), matching the per-layer view of the trend.
    """
    out = []
    for layer, unit in _layer_units(net):
        if layer.surgery is None:
            continue
        centers, offs = [], []
        for _, conv in temporal_kernels(unit):
            w = conv.weight.data.astype(np.float64)
            c = (w.shape[0] - 1) // 2
            centers.append(w[c].reshape(-1))
            offs.append(np.delete(w, c, axis=0).reshape(-1))
        if centers:
            out.append((layer.name, float(np.concatenate(offs).std() / np.concatenate(centers).std())))
    return out


def _layer_units(net: Network):
    units = iter(net.units)
    for layer in net._layers:
        if layer.type != "maxpool":
            yield layer, next(units)


def weight_offset_stats(net: Module) -> OffsetStats:
    """Summary of ``W_l(t,:,:,:)`` per temporal kernel layer and offset ``t`` (0 = center)."""
    stats = OffsetStats()
    units = temporal_kernels(net)
    if not units:
        stats.notice = "network has no temporal kernels"
        return stats
    for name, unit in units:
        w = unit.weight.data.astype(np.float64)
        kt = w.shape[0]
        for i in range(kt):
            v = w[i].reshape(-1)
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
            stats.rows.append(
                {
                    "layer": name,
                    "offset": i - (kt - 1) // 2,
                    "count": v.size,
                    "mean": float(v.mean()),
                    "std": float(v.std()),
                    "min": float(q[0]),
                    "q25": float(q[1]),
                    "median": float(q[2]),
                    "q75": float(q[3]),
                    "max": float(q[4]),
                }
            )
    return stats


# -- reversal probe ------------------------------------------------------------------------------
@dataclass
class ReversalResult:
    acc_normal: float
    acc_reversed: float
    max_logit_delta: float
    n: int

    def grid(self) -> list[dict]:
        """2x2 accuracy grid: trained on normal order, tested on normal and reversed order."""
        return [{"train": "normal", "test": "normal", "top1": self.acc_normal}, {"train": "normal", "test": "reversed", "top1": self.acc_reversed}]


def predict_logits(net: Module, clips: np.ndarray, batch: int = 16) -> np.ndarray:
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(clips), batch):
            out.append(net(Tensor(clips[i : i + batch])).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def reversal_probe(net: Module, clips: np.ndarray, labels: np.ndarray, batch: int = 16) -> ReversalResult:
    """Accuracy on clips and on their temporal mirrors, against the original labels."""
    clips = np.asarray(clips)
    labels = np.asarray(labels)
    normal = predict_logits(net, clips, batch)
    reverse = predict_logits(net, ops.reverse_time(clips), batch)
    acc_n = float((normal.argmax(-1) == labels).mean()) if len(labels) else 0.0
    acc_r = float((reverse.argmax(-1) == labels).mean()) if len(labels) else 0.0
    delta = float(np.abs(normal.astype(np.float64) - reverse).max(initial=0.0))
    return ReversalResult(acc_n, acc_r, delta, len(labels))


# -- embeddings ---------------------------------------------------------------------------------------
def export_embeddings(net: Network, clips: np.ndarray, labels: np.ndarray, layer: str, batch: int = 16) -> np.ndarray:
    """Space-time mean of ``layer``'s activation per clip, with the label as last column."""
    aliases = _layer_aliases(net)
    if layer not in aliases:
        raise KeyError(f"unknown layer {layer!r}; valid names: {sorted(aliases)}")
    target = aliases[layer]
    net.eval()
    rows = []
    with no_grad():
        for i in range(0, len(clips), batch):
            act = net.run(Tensor(np.asarray(clips[i : i + batch])), stop_at=target)
            rows.append(act.data.astype(np.float64).mean(axis=(1, 2, 3)))
    emb = np.concatenate(rows, axis=0)
    return np.concatenate([emb, np.asarray(labels, dtype=np.float64)[:, None]], axis=1)


def _layer_aliases(net: Network) -> dict[str, str]:
    """Full layer names plus short forms such as ``Max5a`` and ``Mixed5c``."""
    out = {}
    for name in net.layer_names():
        out[name] = name
        out[name.replace("MaxPool_", "Max").replace("_", "")] = name
    return out


def embeddings_csv(emb: np.ndarray, layer: str) -> str:
    buf = io.StringIO()
    buf.write(f"# stkit-embeddings v{CSV_VERSION} layer={layer}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(emb.shape[1] - 1)] + ["label"])
    for row in emb:
        w.writerow([repr(float(v)) for v in row[:-1]] + [int(row[-1])])
    return buf.getvalue()


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# -- calibration -------------------------------------------------------------------------------------
REFERENCE_PARAMS = {"i3d": 12.06e6, "s3d": 8.77e6, "s3dg": 11.56e6}
REFERENCE_FLOPS = {"i3d": 107.89e9, "s3d": 66.38e9, "s3dg": 71.38e9, "fast-s3d": 43.47e9}
PARAM_TOL = 0.01
FLOP_TOL = 0.02
REFERENCE_GEOMETRY = (64, 224, 224, 3)


def reconcile(convention: Convention) -> dict[str, dict]:
    """Relative error of each published anchor under ``convention``."""
    from .netbuilder import preset

    out = {}
    for name in sorted(set(REFERENCE_PARAMS) | set(REFERENCE_FLOPS)):
        spec = preset(name)
        rep = count_flops(spec, REFERENCE_GEOMETRY, convention)
        if name in REFERENCE_PARAMS:
            out[f"{name}.params"] = {"value": rep.params, "reference": REFERENCE_PARAMS[name], "rel": rep.params / REFERENCE_PARAMS[name] - 1, "tol": PARAM_TOL}
        if name in REFERENCE_FLOPS:
            out[f"{name}.flops"] = {"value": rep.flops, "reference": REFERENCE_FLOPS[name], "rel": rep.flops / REFERENCE_FLOPS[name] - 1, "tol": FLOP_TOL}
    return out


def candidate_conventions() -> list[Convention]:
    return [Convention(m, bn, head, el) for m in (1, 2) for bn in BN_MODES for head in (True, False) for el in (False, True)]


def calibrate() -> tuple[Convention, dict[str, dict]]:
    """Pick the convention with the smallest worst-case relative error against the published counts."""
    best = None
    for conv in candidate_conventions():
        res = reconcile(conv)
        worst = max(abs(v["rel"]) / v["tol"] for v in res.values())
        if best is None or worst < best[0]:
            best = (worst, conv, res)
    return best[1], best[2]
