"""Command-line entry point: ``stkit <command> [flags]``.

Precedence for every setting: command-line flag, then config file key, then
environment (``STKIT_OUT`` for the output directory), then built-in default.

Exit codes: 0 success, 1 usage or input error, 2 reconciliation failure in
acceptance mode, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import analysis, selftest
from .data import DatasetSpec, SyntheticVideoDataset, generate_synthetic
from .netbuilder import K_TOTAL, ArchSpec, Network, as_2d, build_variant, describe, format_table, inflate, parse, preset, serialize, temporal_pools
from .tensor import save_checkpoint
from .train import NumericalError, TrainConfig, checkpoint_arrays, evaluate, load_weights, train

EXIT_OK, EXIT_USAGE, EXIT_RECONCILE, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "STKIT_OUT"
DEFAULT_OUT = "stkit-out"
HELP_WIDTH = 100
COMMANDS = ("build", "describe", "count", "curve", "train", "eval", "reverse-test", "weight-stats", "export-emb", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


class _FullHelp(argparse.Action):
    """``--help`` on the top level prints every subcommand with its flags."""

    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest=dest, default=default, nargs=0, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        print(full_help(parser), end="")
        parser.exit(EXIT_OK)


def _arch_flags(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--config", help="YAML file with architecture, dataset and training keys")
    g.add_argument("--arch", help="named variant: i3d, i2d, s3d, s3dg, fast-s3d")
    g.add_argument("--family", choices=("I3D", "I2D", "BottomHeavy", "TopHeavy"), help="surgery family")
    g.add_argument("--conv", choices=("full", "separable"), help="3D units as full or separable convs")
    g.add_argument("-K", type=int, help=f"transition index 0..{K_TOTAL + 1} for surgery families")
    g.add_argument("--gated", action="store_true", default=None, help="feature gate after every temporal conv")
    g.add_argument("--preset", choices=("full", "mini"), help="channel table and input size (default full)")
    g.add_argument("--classes", type=int, help="number of output classes")
    g.add_argument("--frames", type=int, help="input frames T")
    g.add_argument("--size", type=int, help="input height and width")


def _common_flags(p):
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--workers", type=int, help="data-parallel gradient shards (default 1)")


def _data_flags(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=("directional-motion", "static-texture", "speed-contrast"), help="synthetic generator")
    g.add_argument("--samples", type=int, help="number of clips")
    g.add_argument("--data-seed", type=int, help="dataset seed (default: --seed)")


def _ckpt_flag(p, required=False):
    p.add_argument("--checkpoint", required=required, help="weights saved by build or train")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stkit", description="Spatiotemporal CNN kit.", formatter_class=_formatter, add_help=False)
    parser.add_argument("-h", "--help", action=_FullHelp, help="show help for every command and exit")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    p = sub.add_parser("build", help="write the architecture YAML and initial weights", formatter_class=_formatter)
    _arch_flags(p)
    _common_flags(p)
    p.add_argument("--inflate", action="store_true", help="initialize from a fresh 2D network by inflation")
    p = sub.add_parser("describe", help="print the per-layer table", formatter_class=_formatter)
    _arch_flags(p)
    p = sub.add_parser("count", help="parameter and FLOP report as CSV", formatter_class=_formatter)
    _arch_flags(p)
    _common_flags(p)
    p.add_argument("--mac", type=int, choices=(1, 2), help="FLOPs per multiply-accumulate")
    p.add_argument("--bn", choices=analysis.BN_MODES, help="batch-norm parameter inclusion")
    p.add_argument("--no-head", action="store_true", help="exclude the classifier from totals")
    p.add_argument("--elementwise", action="store_true", help="add elementwise FLOPs into the total")
    p.add_argument("--acceptance", action="store_true", help="reconcile against the published table; exit 2 on mismatch")
    p = sub.add_parser("curve", help="FLOPs for every transition index K", formatter_class=_formatter)
    _arch_flags(p)
    _common_flags(p)
    p = sub.add_parser("train", help="train on a synthetic dataset", formatter_class=_formatter)
    _arch_flags(p)
    _common_flags(p)
    _data_flags(p)
    g = p.add_argument_group("optimization")
    g.add_argument("--steps", type=int, help="SGD steps (default 800)")
    g.add_argument("--batch-size", type=int, help="clips per step (default 8)")
    g.add_argument("--lr", type=float, help="initial learning rate (default 0.1)")
    g.add_argument("--momentum", type=float, help="momentum (default 0.9)")
    g.add_argument("--eval-every", type=int, help="steps between evaluations (default 100)")
    g.add_argument("--inflate", action="store_true", help="initialize 3D units by inflating a 2D network")
    for name, text in (("eval", "top-1/top-5 on a synthetic dataset"), ("reverse-test", "accuracy on normal and time-reversed clips")):
        p = sub.add_parser(name, help=text, formatter_class=_formatter)
        _arch_flags(p)
        _common_flags(p)
        _data_flags(p)
        _ckpt_flag(p)
    p = sub.add_parser("weight-stats", help="per-offset temporal weight statistics", formatter_class=_formatter)
    _arch_flags(p)
    _common_flags(p)
    _ckpt_flag(p)
    p.add_argument("--inflate", action="store_true", help="inflate a fresh 2D network when no checkpoint is given")
    p = sub.add_parser("export-emb", help="space-time pooled activations per clip", formatter_class=_formatter)
    _arch_flags(p)
    _common_flags(p)
    _data_flags(p)
    _ckpt_flag(p)
    p.add_argument("--layer", required=True, help="layer name, e.g. Max5a or MaxPool_5a")
    p = sub.add_parser("selftest", help="oracle and gradient checks", formatter_class=_formatter)
    _common_flags(p)
    return parser


def full_help(parser: argparse.ArgumentParser | None = None) -> str:
    parser = parser or build_parser()
    parts = [parser.format_help()]
    for action in parser._subparsers._group_actions:
        for name, sub in action.choices.items():
            parts.append(f"\n== stkit {name} ==\n" + sub.format_help())
    return "".join(parts)


# -- settings resolution ------------------------------------------------------------------
def _load_config(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    return doc


def _pick(args, cfg: dict, key: str, default=None, section: str | None = None):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    scope = cfg.get(section, {}) if section else cfg
    return scope.get(key.replace("-", "_"), default) if isinstance(scope, dict) else default


def resolve_spec(args, cfg: dict) -> ArchSpec:
    geometry = None
    frames, size = getattr(args, "frames", None), getattr(args, "size", None)
    arch = getattr(args, "arch", None) or (cfg.get("arch") if isinstance(cfg.get("arch"), str) else None)
    mode = getattr(args, "preset", None) or cfg.get("preset", "full")
    classes = getattr(args, "classes", None) or cfg.get("classes")
    structural = {k: getattr(args, k, None) for k in ("family", "conv", "K", "gated")}
    try:
        if "layers" in cfg or (not arch and any(k in cfg for k in ("family", "conv_mode"))):
            overrides = {"family": structural["family"], "conv_mode": structural["conv"], "K": structural["K"], "gated": structural["gated"], "classes": classes}
            if getattr(args, "preset", None):
                overrides["preset"] = args.preset
            spec = parse(yaml.safe_dump({k: v for k, v in cfg.items() if k not in ("train", "dataset", "out", "seed", "workers", "arch")}), overrides)
        elif arch and not structural["family"]:
            spec = preset(arch, preset=mode, classes=classes)
        else:
            spec = build_variant(
                structural["family"] or "I3D",
                structural["conv"] or "full",
                structural["K"],
                bool(structural["gated"]),
                preset=mode,
                classes=classes,
            )
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if frames or size:
        T, H, W, C = spec.input
        geometry = (frames or T, size or H, size or W, C)
        spec = replace(spec, input=geometry)
    return spec


def _out_dir(args, cfg) -> Path:
    value = getattr(args, "out", None) or cfg.get("out") or os.environ.get(OUT_ENV) or DEFAULT_OUT
    path = Path(value)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, cfg) -> int:
    return int(_pick(args, cfg, "seed", 0))


def _dataset_spec(args, cfg, spec: ArchSpec, default_samples: int = 500) -> DatasetSpec:
    section = cfg.get("dataset", {}) if isinstance(cfg.get("dataset"), dict) else {}
    kind = getattr(args, "dataset", None) or section.get("kind", "directional-motion")
    samples = getattr(args, "samples", None) or section.get("samples", default_samples)
    seed = getattr(args, "data_seed", None)
    if seed is None:
        seed = section.get("seed", _seed(args, cfg))
    extra = {k: section[k] for k in ("patch", "speed", "noise") if k in section}
    try:
        return DatasetSpec(kind, spec.input, int(samples), int(seed), **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _network(args, cfg, spec: ArchSpec, inflate_init: bool = False) -> Network:
    seed = _seed(args, cfg)
    net = Network(spec, seed=seed)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        try:
            load_weights(net, ckpt)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    elif inflate_init and spec.n_3d():
        net = inflate(Network(as_2d(spec), seed=seed), net)
    return net


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


# -- commands -----------------------------------------------------------------------------
def cmd_build(args, cfg):
    spec = resolve_spec(args, cfg)
    out = _out_dir(args, cfg)
    net = _network(args, cfg, spec, args.inflate)
    _write(out / "arch.yaml", serialize(spec))
    save_checkpoint(out / "init.stck", checkpoint_arrays(net))
    print(f"wrote {out / 'init.stck'}")
    return EXIT_OK


def cmd_describe(args, cfg):
    spec = resolve_spec(args, cfg)
    rows = describe(spec)
    print(f"# {spec.name}  input {'x'.join(map(str, spec.input))}  temporal pools: {', '.join(l.name for l in temporal_pools(spec))}")
    print(format_table(rows))
    return EXIT_OK


def _convention(args, cfg) -> analysis.Convention:
    section = cfg.get("count", {}) if isinstance(cfg.get("count"), dict) else {}
    base = analysis.Convention.from_tag(section["convention"]) if "convention" in section else analysis.DEFAULT_CONVENTION
    return analysis.Convention(
        args.mac or base.mac_factor,
        args.bn or base.bn,
        False if args.no_head else base.head,
        True if args.elementwise else base.elementwise,
    )


def cmd_count(args, cfg):
    if args.acceptance:
        conv, res = analysis.calibrate()
        print(f"calibrated convention: {conv.tag}")
        ok = True
        for key, v in res.items():
            good = abs(v["rel"]) <= v["tol"]
            ok &= good
            print(f"{'PASS' if good else 'FAIL'}  {key:<16} {v['value']:>16,d}  ref {v['reference']:>16,.0f}  rel {v['rel']:+.4f}  tol {v['tol']:.2f}")
        return EXIT_OK if ok else EXIT_RECONCILE
    spec = resolve_spec(args, cfg)
    rep = analysis.count_flops(spec, spec.input, _convention(args, cfg))
    out = _out_dir(args, cfg)
    _write(out / f"cost_{spec.name.lower().replace('(', '_').replace(')', '').replace('=', '')}.csv", rep.to_csv())
    print(f"{spec.name}: params {rep.params:,d} ({rep.mparams:.2f}M)  FLOPs {rep.flops:,d} ({rep.gflops:.2f} GFLOPS)  elementwise {rep.elementwise_flops:,d}  [{rep.convention.tag}]")
    return EXIT_OK


def cmd_curve(args, cfg):
    if args.K is None:
        # the sweep covers every K; any valid index resolves the rest of the spec
        args.K = 1
    spec = resolve_spec(args, cfg)
    family = spec.family if spec.family in ("TopHeavy", "BottomHeavy") else "TopHeavy"
    out = _out_dir(args, cfg)
    rows = analysis.tradeoff_curve(family, spec.conv_mode, spec.input, preset="mini" if spec.channel_divisor > 1 else "full", classes=spec.classes)
    _write(out / f"curve_{family}_{spec.conv_mode}.csv", analysis.curve_csv(rows))
    _write(out / "plot_curve.py", analysis.PLOT_CURVE_SCRIPT)
    for r in rows:
        print(f"K={r['K']:>2}  3D units={r['n_3d']:>2}  {r['gflops']:.3f} GFLOPS")
    return EXIT_OK


def _train_config(args, cfg, spec) -> TrainConfig:
    section = cfg.get("train", {}) if isinstance(cfg.get("train"), dict) else {}
    kw = {}
    for key, attr in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr"), ("momentum", "momentum"), ("eval_every", "eval_every")):
        value = getattr(args, attr, None)
        kw[key] = value if value is not None else section.get(key)
    kw = {k: v for k, v in kw.items() if v is not None}
    if "decay_steps" in section:
        kw["decay_steps"] = tuple(section["decay_steps"])
    kw["workers"] = int(_pick(args, cfg, "workers", 1))
    kw["seed"] = _seed(args, cfg)
    try:
        return TrainConfig(dataset=_dataset_spec(args, cfg, spec), **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, cfg):
    spec = resolve_spec(args, cfg)
    config = _train_config(args, cfg, spec)
    inflate_init = args.inflate or bool((cfg.get("train") or {}).get("inflate", False))
    net = _network(args, cfg, spec, inflate_init)
    out = _out_dir(args, cfg)
    (out / "arch.yaml").write_text(serialize(spec))
    try:
        result = train(net, config, out_dir=out, log_stream=sys.stdout)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"final top1 {result.final['top1']:.4f} top5 {result.final['top5']:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _data(args, cfg, spec) -> SyntheticVideoDataset:
    return generate_synthetic(_dataset_spec(args, cfg, spec, default_samples=200))


def cmd_eval(args, cfg):
    spec = resolve_spec(args, cfg)
    net = _network(args, cfg, spec)
    data = _data(args, cfg, spec)
    metrics = evaluate(net, data.clips, data.labels)
    out = _out_dir(args, cfg)
    _write(out / "eval.json", json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(f"top1 {metrics['top1']:.4f}  top5 {metrics['top5']:.4f}  per-class {metrics['per_class']}")
    return EXIT_OK


def cmd_reverse_test(args, cfg):
    spec = resolve_spec(args, cfg)
    net = _network(args, cfg, spec)
    data = _data(args, cfg, spec)
    res = analysis.reversal_probe(net, data.clips, data.labels)
    out = _out_dir(args, cfg)
    lines = [f"# stkit-reversal v{analysis.CSV_VERSION} arch={spec.name} max_logit_delta={res.max_logit_delta:.6e}", "train,test,top1"]
    lines += [f"{r['train']},{r['test']},{r['top1']:.6f}" for r in res.grid()]
    _write(out / "reversal.csv", "\n".join(lines) + "\n")
    print(f"normal {res.acc_normal:.4f}  reversed {res.acc_reversed:.4f}  max |logit delta| {res.max_logit_delta:.3e}")
    return EXIT_OK


def cmd_weight_stats(args, cfg):
    spec = resolve_spec(args, cfg)
    net = _network(args, cfg, spec, args.inflate)
    stats = analysis.weight_offset_stats(net)
    out = _out_dir(args, cfg)
    _write(out / "offsets.csv", stats.to_csv())
    _write(out / "plot_offsets.py", analysis.PLOT_OFFSETS_SCRIPT)
    if stats.notice:
        print(f"notice: {stats.notice}")
    for name, ratio in analysis.unit_offset_ratios(net):
        print(f"{name:<10} off-center/center stddev {ratio:.4f}")
    return EXIT_OK


def cmd_export_emb(args, cfg):
    spec = resolve_spec(args, cfg)
    net = _network(args, cfg, spec)
    data = _data(args, cfg, spec)
    try:
        emb = analysis.export_embeddings(net, data.clips, data.labels, args.layer)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    out = _out_dir(args, cfg)
    _write(out / f"embeddings_{args.layer}.csv", analysis.embeddings_csv(emb, args.layer))
    return EXIT_OK


def cmd_selftest(args, cfg):
    checks = selftest.run(_seed(args, cfg))
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.ok for c in checks) else EXIT_NUMERIC


HANDLERS = {
    "build": cmd_build,
    "describe": cmd_describe,
    "count": cmd_count,
    "curve": cmd_curve,
    "train": cmd_train,
    "eval": cmd_eval,
    "reverse-test": cmd_reverse_test,
    "weight-stats": cmd_weight_stats,
    "export-emb": cmd_export_emb,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("stkit: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load_config(args)
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"stkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"stkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
