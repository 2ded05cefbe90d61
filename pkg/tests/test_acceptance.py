"""Acceptance criteria 1-10, one printed PASS/FAIL line each.

Run directly (``python tests/test_acceptance.py``) or under pytest; the lines
are repeated in pytest's terminal summary.  Tolerances are the published
ones; nothing here is loosened to make a line pass.
"""

from __future__ import annotations

import sys
import time

import numpy as np
import pytest

from stkit import analysis as an
from stkit import netbuilder as nb
from stkit import oracles, ops
from stkit.blocks import ConvUnit, FeatureGate, InceptionBlock, InceptionConfig, SpatioTemporalConv, feature_gate, set_center_delta
from stkit.data import DatasetSpec, generate_synthetic
from stkit.ops import FilterBank
from stkit.selftest import grad_check
from stkit.tensor import Tensor, concat, exp, log, matmul, matmul_vec, no_grad, precision, reduce_mean, reduce_sum
from stkit.train import TrainConfig, train

LINES: list[str] = []

PARAM_TOL = 0.01
FLOP_TOL = 0.02
ORACLE_RTOL = 1e-12  # "exact in 64-bit": summation order differs from the loop oracle
GRAD_TOL = 1e-4
REVERSAL_TOL = 1e-5
INFLATION_TOL = 1e-5
TRAIN_MIN_ACC = 0.95
CHANCE, CHANCE_TOL = 0.5, 0.1
FLIP_TOL = 0.1
TRAIN_BUDGET_S = 20 * 60
INSTANCES = 100


def report(n: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} | {detail}"
    LINES.append(line)
    print(line)
    return ok


# -- shared training runs (criteria 6, 7, 8, 10) -------------------------------------
TRAIN_CONFIG = TrainConfig(steps=800, batch_size=8, seed=0, eval_every=0, dataset=DatasetSpec(samples=500, seed=0))


@pytest.fixture(scope="module")
def trained():
    data = generate_synthetic(TRAIN_CONFIG.dataset)
    runs = {}
    start = time.perf_counter()
    for name in ("i3d", "s3d", "i2d"):
        spec = nb.preset(name, preset="mini")
        net = nb.Network(spec, seed=0)
        if name != "i2d":
            # inflated start: every temporal offset begins with the same weights
            net = nb.inflate(nb.Network(nb.as_2d(spec), seed=0), net)
        t0 = time.perf_counter()
        result = train(net, TRAIN_CONFIG, dataset=data)
        runs[name] = {"net": net, "result": result, "seconds": time.perf_counter() - t0}
    runs["total_seconds"] = time.perf_counter() - start
    runs["heldout"] = generate_synthetic(DatasetSpec(samples=200, seed=99))
    return runs


# -- criterion 1 --------------------------------------------------------------------------
def test_criterion_01_parameter_reconciliation():
    t0 = time.perf_counter()
    conv, res = an.calibrate()
    elapsed = time.perf_counter() - t0
    keys = ("i3d.params", "s3d.params", "s3dg.params")
    errs = {k: res[k]["rel"] for k in keys}
    ok = all(abs(e) <= PARAM_TOL for e in errs.values()) and elapsed < 1.0
    detail = ", ".join(f"{k.split('.')[0]} {res[k]['value'] / 1e6:.2f}M ({e:+.1%})" for k, e in errs.items())
    report(1, "params vs 12.06/8.77/11.56 M within 1%", ok, f"{detail}; convention {conv.tag}; {elapsed:.2f}s")
    assert ok


# -- criterion 2 --------------------------------------------------------------------------
def test_criterion_02_flop_reconciliation():
    t0 = time.perf_counter()
    conv, res = an.calibrate()
    elapsed = time.perf_counter() - t0
    keys = ("i3d.flops", "s3d.flops", "s3dg.flops", "fast-s3d.flops")
    errs = {k: res[k]["rel"] for k in keys}
    ok = all(abs(e) <= FLOP_TOL for e in errs.values()) and elapsed < 1.0
    detail = ", ".join(f"{k.split('.')[0]} {res[k]['value'] / 1e9:.2f}G ({e:+.1%})" for k, e in errs.items())
    report(2, "GFLOPs vs 107.89/66.38/71.38/43.47 within 2%", ok, f"{detail}; convention {conv.tag}")
    assert ok


# -- criterion 3 --------------------------------------------------------------------------
def test_criterion_03_tradeoff_separation():
    bad = []
    for conv in ("full", "separable"):
        th = {r["n_3d"]: r["flops"] for r in an.tradeoff_curve("TopHeavy", conv)}
        bh = {r["n_3d"]: r["flops"] for r in an.tradeoff_curve("BottomHeavy", conv)}
        bad += [(conv, n) for n in range(1, nb.K_TOTAL) if not th[n] < bh[n]]
    ok = not bad
    report(3, "TopHeavy < BottomHeavy FLOPs for 0<n<K_total", ok, f"{2 * (nb.K_TOTAL - 1)} comparisons, violations {bad}")
    assert ok


# -- criterion 4 --------------------------------------------------------------------------
def _random_case(rng):
    T, H, W = (int(v) for v in rng.integers(1, 6, size=3))
    C = int(rng.integers(1, 4))
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    s = tuple(int(v) for v in rng.integers(1, 3, size=3))
    padding = "SAME" if rng.random() < 0.5 or any(kk > n for kk, n in zip(k, (T, H, W))) else "VALID"
    return (int(rng.integers(1, 3)), T, H, W, C), k, s, padding


def test_criterion_04_oracle_equivalence():
    rng = np.random.default_rng(20240404)
    worst = {"conv3d": 0.0, "sepconv3d": 0.0, "maxpool3d": 0.0, "avgpool": 0.0, "gating": 0.0}
    with precision(np.float64):
        for _ in range(INSTANCES):
            shape, k, s, padding = _random_case(rng)
            x = rng.normal(size=shape)
            cout = int(rng.integers(1, 4))
            w, b = rng.normal(size=(*k, shape[-1], cout)), rng.normal(size=cout)
            y = ops.conv3d(Tensor(x), FilterBank(Tensor(w), Tensor(b), s, padding)).data
            worst["conv3d"] = max(worst["conv3d"], oracles.relative_error(y, oracles.naive_conv3d(x, w, b, s, padding)))

            ws, wt = rng.normal(size=(1, k[1], k[2], shape[-1], cout)), rng.normal(size=(k[0], 1, 1, cout, cout))
            y = ops.sepconv3d(Tensor(x), FilterBank(Tensor(ws), stride=(1, s[1], s[2])), FilterBank(Tensor(wt), stride=(s[0], 1, 1))).data
            ref = oracles.naive_conv3d(oracles.naive_conv3d(x, ws, None, (1, s[1], s[2]), "SAME"), wt, None, (s[0], 1, 1), "SAME")
            worst["sepconv3d"] = max(worst["sepconv3d"], oracles.relative_error(y, ref))

            y = ops.maxpool3d(Tensor(x), k, s, padding).data
            worst["maxpool3d"] = max(worst["maxpool3d"], oracles.relative_error(y, oracles.naive_maxpool3d(x, k, s, padding)))

            y = ops.avgpool_spacetime(Tensor(x)).data
            worst["avgpool"] = max(worst["avgpool"], oracles.relative_error(y, oracles.naive_spacetime_mean(x)))

            n = shape[-1]
            Wg, bg = rng.normal(size=(n, n)), rng.normal(size=n)
            y = feature_gate(Tensor(x), Tensor(Wg), Tensor(bg)).data
            ref = x * oracles.naive_gate(x, Wg, bg)[:, None, None, None, :]
            worst["gating"] = max(worst["gating"], oracles.relative_error(y, ref))
    ok = all(v <= ORACLE_RTOL for v in worst.values())
    report(4, f"ops match loop oracles on {INSTANCES} random instances each", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol {ORACLE_RTOL:.0e})")
    assert ok


# -- criterion 5 --------------------------------------------------------------------------
def _gradient_cases(rng):
    def leaf(*shape, positive=False):
        data = rng.uniform(0.5, 1.5, size=shape) if positive else rng.normal(size=shape)
        return Tensor(data, requires_grad=True)

    x = leaf(2, 4, 5, 5, 3)
    pos = leaf(2, 3, positive=True)
    w, b = leaf(3, 3, 3, 3, 2), leaf(2)
    ws, wt = leaf(1, 3, 3, 3, 2), leaf(3, 1, 1, 2, 2)
    beta, gamma = leaf(3), leaf(3, positive=True)
    W, gb, v = leaf(3, 3), leaf(3), leaf(4, 3)
    M = leaf(3, 4)
    logits = leaf(5, 4)
    labels = rng.integers(0, 4, size=5)
    running = ops.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    return {
        "conv3d SAME zeros": (lambda: ops.conv3d(x, FilterBank(w, b, (1, 2, 2))), [x, w, b]),
        "conv3d SAME edge": (lambda: ops.conv3d(x, FilterBank(w, b, (2, 1, 1), temporal_pad="edge")), [x, w, b]),
        "conv3d VALID": (lambda: ops.conv3d(x, FilterBank(w, b, (1, 1, 2), "VALID")), [x, w, b]),
        "sepconv3d": (lambda: ops.sepconv3d(x, FilterBank(ws), FilterBank(wt, stride=(2, 1, 1))), [x, ws, wt]),
        "maxpool3d": (lambda: ops.maxpool3d(x, (3, 3, 3), (2, 2, 2)), [x]),
        "avgpool": (lambda: ops.avgpool_spacetime(x), [x]),
        "temporal avgpool": (lambda: ops.temporal_avgpool(x, 2), [x]),
        # a fresh state per call: training mode updates running statistics
        "batchnorm train": (lambda: ops.batchnorm(x, beta, ops.BatchNormState.create(3, np.float64), True, gamma), [x, beta, gamma]),
        "batchnorm eval": (lambda: ops.batchnorm(x, beta, running, False, gamma), [x, beta, gamma]),
        "relu": (lambda: ops.relu(x), [x]),
        "sigmoid": (lambda: ops.sigmoid(x), [x]),
        "softmax": (lambda: ops.softmax(logits), [logits]),
        "cross entropy": (lambda: ops.cross_entropy(logits, labels), [logits]),
        # the same mask on every call
        "dropout": (lambda: ops.dropout(x, 0.3, np.random.default_rng(0), True), [x]),
        "reverse time": (lambda: ops.reverse_time(x), [x]),
        "gating": (lambda: feature_gate(x, W, gb), [x, W, gb]),
        "matmul": (lambda: matmul(pos, M), [pos, M]),
        "matmul_vec": (lambda: matmul_vec(W, v, gb), [W, v, gb]),
        "exp/log/mean/sum": (lambda: reduce_sum(exp(pos), axis=0) + reduce_mean(log(pos), axis=0), [pos]),
        "concat": (lambda: concat([x, x * 2.0], axis=-1), [x]),
    }


def _block_cases(rng):
    def randomize(m):
        for _, p in m.named_parameters():
            if p.ndim <= 2:
                p.data = rng.normal(scale=0.5, size=p.shape)
        return m

    xb = Tensor(rng.normal(size=(2, 4, 5, 5, 3)), requires_grad=True)
    blocks = {
        "ConvUnit": ConvUnit(3, 4, (3, 3, 3), (1, 2, 2), rng=rng, bn_scale=True),
        "FeatureGate": FeatureGate(3),
        "2D conv + temporal stride": SpatioTemporalConv("2d", 3, 4, 3, 3, stride=(2, 1), rng=rng),
        "3D conv": SpatioTemporalConv("3d", 3, 4, 3, 3, stride=(2, 2), rng=rng),
        "sep conv gated": SpatioTemporalConv("sep", 3, 4, 3, 3, stride=(2, 1), gated=True, rng=rng),
    }
    for kind, gated in (("2d", False), ("3d", False), ("sep", False), ("sep", True)):
        blocks[f"Inception {kind}{' gated' if gated else ''}"] = InceptionBlock(InceptionConfig(2, 2, 3, 1, 2, 2, kind=kind, gated=gated), 3, rng=rng)
    cases = {name: (lambda m=randomize(m): m(xb), [xb] + [p for _, p in m.named_parameters()]) for name, m in blocks.items()}
    spec = nb.preset("s3dg", preset="mini")
    net = randomize(nb.Network(spec, seed=3))
    clip = Tensor(rng.normal(size=(2, *spec.input)))
    labels = np.array([0, 1])
    net.units[-1].dropout = 0.0
    named = list(net.named_parameters())
    params = [p for _, p in named[:3] + named[len(named) // 2 : len(named) // 2 + 3] + named[-2:]]
    cases["mini S3D-G network loss"] = (lambda: ops.cross_entropy(net(clip), labels), params)
    return cases


def test_criterion_05_gradient_suite():
    rng = np.random.default_rng(5)
    errors = {}
    with precision(np.float64):
        for name, (f, leaves) in {**_gradient_cases(rng), **_block_cases(rng)}.items():
            out = f()
            probe = Tensor(rng.normal(size=out.shape))
            loss = (lambda f=f, probe=probe: (f() * probe).sum()) if out.size > 1 else f
            errors[name] = grad_check(loss, leaves, rng, samples=4)
    worst = max(errors, key=errors.get)
    ok = all(e < GRAD_TOL for e in errors.values())
    report(5, "central-difference gradient checks, 64-bit", ok, f"{len(errors)} ops/blocks, worst {worst} {errors[worst]:.1e} (tol {GRAD_TOL:.0e})")
    assert ok, {k: v for k, v in errors.items() if v >= GRAD_TOL}


# -- criterion 6 --------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_06_reversal_invariance(trained):
    held = trained["heldout"]
    fresh = an.reversal_probe(nb.Network(nb.preset("i2d", preset="mini"), seed=11), held.clips, held.labels)
    i2d = an.reversal_probe(trained["i2d"]["net"], held.clips, held.labels)
    i3d = an.reversal_probe(trained["i3d"]["net"], held.clips, held.labels)
    flip = abs(i3d.acc_reversed - (1 - i3d.acc_normal))
    ok = fresh.max_logit_delta < REVERSAL_TOL and i2d.max_logit_delta < REVERSAL_TOL and flip <= FLIP_TOL
    report(
        6,
        "I2D reversal-invariant; I3D acc_reversed = 1 - acc_normal",
        ok,
        f"I2D delta random {fresh.max_logit_delta:.1e} trained {i2d.max_logit_delta:.1e}; I3D normal {i3d.acc_normal:.3f} reversed {i3d.acc_reversed:.3f}",
    )
    assert ok


# -- criterion 7 --------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_07_arrow_of_time_learning(trained):
    acc = {k: trained[k]["result"].final["top1"] for k in ("i3d", "s3d", "i2d")}
    secs = trained["total_seconds"]
    ok = acc["i3d"] >= TRAIN_MIN_ACC and acc["s3d"] >= TRAIN_MIN_ACC and abs(acc["i2d"] - CHANCE) <= CHANCE_TOL and secs < TRAIN_BUDGET_S
    times = ", ".join(f"{k} {trained[k]['seconds']:.0f}s" for k in ("i3d", "s3d", "i2d"))
    report(7, "mini I3D/S3D >= 0.95 train top-1, I2D 0.5+-0.1, 800 steps", ok, f"I3D {acc['i3d']:.3f} S3D {acc['s3d']:.3f} I2D {acc['i2d']:.3f}; {times}, total {secs / 60:.1f} min")
    assert ok


# -- criterion 8 --------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_08_inflation_oracle(trained):
    source = trained["i2d"]["net"].eval()
    frames = np.random.default_rng(8).normal(size=(4, 1, 32, 32, 3)).astype(np.float32)
    clip = Tensor(np.repeat(frames, 16, axis=1))
    worst = {}
    with no_grad():
        ref = source.run(clip, collect=True)
        for name in ("i3d", "s3d"):
            spec = nb.preset(name, preset="mini")
            target = nb.inflate(source, nb.Network(spec, seed=1)).eval()
            out = target.run(clip, collect=True)
            errs = [oracles.relative_error(out[k].data, ref[k].data) for k in ref]
            worst[name] = max(errs)
    ok = all(v <= INFLATION_TOL for v in worst.values())
    report(8, "inflated nets reproduce trained 2D net on replicated frames", ok, ", ".join(f"{k} worst layer rel err {v:.1e}" for k, v in worst.items()) + f" (tol {INFLATION_TOL:.0e})")
    assert ok


# -- criterion 9 --------------------------------------------------------------------------
def _sep_from_2d(b2: InceptionBlock, rng) -> InceptionBlock:
    bs = InceptionBlock(replace_kind(b2.cfg, "sep"), b2.c_in, rng=rng).eval()
    for name in ("b0", "b1_reduce", "b2_reduce", "b3"):
        _copy_unit(getattr(b2, name), getattr(bs, name))
    for name in ("b1", "b2"):
        _copy_unit(getattr(b2, name).conv, getattr(bs, name).spatial)
    for unit in bs.temporal_units():
        set_center_delta(unit)
    return bs


def replace_kind(cfg: InceptionConfig, kind: str) -> InceptionConfig:
    from dataclasses import replace

    return replace(cfg, kind=kind)


def _copy_unit(src: ConvUnit, dst: ConvUnit):
    dst.weight.data = src.weight.data.copy()
    dst.beta.data = src.beta.data.copy()
    dst.bn.mean, dst.bn.var = src.bn.mean.copy(), src.bn.var.copy()


def test_criterion_09_separable_delta_equivalence():
    rng = np.random.default_rng(9)
    mismatches, checked = [], 0
    spec = nb.preset("s3d", preset="mini")
    c_stem, c_in = spec.layer("Conv_2b").out_channels, spec.layer("Conv_2c").out_channels
    stem2 = SpatioTemporalConv("2d", c_stem, c_in, 3, 3, rng=rng).eval()
    stems = SpatioTemporalConv("sep", c_stem, c_in, 3, 3, rng=rng).eval()
    _copy_unit(stem2.conv, stems.spatial)
    set_center_delta(stems.temporal)
    pairs = [("Conv_2c", stem2, stems, c_stem)]
    for layer in spec.layers:
        if layer.type == "inception":
            b2 = InceptionBlock(replace_kind(layer.inception_config(), "2d"), c_in, rng=rng).eval()
            for _, unit in b2.modules():
                if isinstance(unit, ConvUnit):
                    unit.beta.data = rng.normal(scale=0.2, size=unit.beta.shape).astype(np.float32)
                    unit.bn.mean = rng.normal(scale=0.2, size=unit.bn.mean.shape).astype(np.float32)
                    unit.bn.var = rng.uniform(0.5, 2.0, size=unit.bn.var.shape).astype(np.float32)
            pairs.append((layer.name, b2, _sep_from_2d(b2, rng), c_in))
            c_in = layer.channels
    with no_grad():
        for name, flat, sep, cin in pairs:
            for T in (1, 4, 7):
                x = Tensor(rng.normal(size=(2, T, 6, 6, cin)).astype(np.float32))
                checked += 1
                if not np.array_equal(flat(x).data, sep(x).data):
                    mismatches.append((name, T))
    ok = not mismatches
    report(9, "center-delta separable blocks equal 2D blocks exactly", ok, f"{checked} block/input pairs bitwise equal, mismatches {mismatches}")
    assert ok


# -- criterion 10 ---------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_10_weight_offset_trend(trained):
    ratios = dict(an.unit_offset_ratios(trained["i3d"]["net"]))
    names = list(ratios)
    bottom, top = names[0], names[-1]
    s3d = dict(an.unit_offset_ratios(trained["s3d"]["net"]))
    sb, st = list(s3d)[0], list(s3d)[-1]
    ok = ratios[top] > ratios[bottom]
    report(
        10,
        "off-center/center weight stddev: top 3D unit > bottom 3D unit (mini-I3D)",
        ok,
        f"I3D {bottom} {ratios[bottom]:.3f} vs {top} {ratios[top]:.3f}; S3D (info) {sb} {s3d[sb]:.3f} vs {st} {s3d[st]:.3f}",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
