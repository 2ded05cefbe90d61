import csv
import io

import numpy as np
import pytest

from stkit import analysis as an
from stkit import netbuilder as nb
from stkit.blocks import set_center_delta
from stkit.data import DatasetSpec, generate_synthetic

# Frozen from the analytic counter (default convention: MAC=1, BN beta only, head included).
FROZEN = {
    "fast-s3d": (7589632, 41286426624, 592415488),
    "i2d": (6002624, 40665047040, 590960384),
    "i3d": (12689984, 111150686208, 859401984),
    "s3d": (9695024, 75914289152, 699591424),
    "s3dg": (10924192, 75915512576, 846060912),
}


@pytest.mark.parametrize("name", sorted(FROZEN))
def test_frozen_totals(name):
    rep = an.count_flops(nb.preset(name), (64, 224, 224, 3))
    assert (rep.params, rep.macs, rep.elementwise_flops) == FROZEN[name]


def test_stem_row_by_hand():
    row = an.count_flops(nb.preset("i3d")).row("Conv_1a")
    taps = 7 * 7 * 7 * 3 * 64
    assert row.params == taps + 64
    assert row.macs == taps * 32 * 112 * 112
    assert row.output == (32, 112, 112, 64)
    assert row.elementwise_flops == 2 * 32 * 112 * 112 * 64


def test_trivial_arithmetic():
    assert an.conv_params((3, 3, 3), 4, 8, bias=True) == 872
    assert an.conv_flops((1, 1, 1), 1, 1, (1, 1, 1), mac_factor=2) == 2
    assert an.conv_flops((1, 1, 1), 1, 1, (1, 1, 1), mac_factor=2, bias=True) == 3


def test_totals_are_row_sums_and_convention_scales():
    spec = nb.preset("s3dg")
    one = an.count_flops(spec, convention=an.Convention(1))
    two = an.count_flops(spec, convention=an.Convention(2))
    assert one.flops == sum(r.flops for r in one.rows)
    assert two.flops == 2 * one.flops
    withel = an.count_flops(spec, convention=an.Convention(1, elementwise=True))
    assert withel.flops == one.flops + one.elementwise_flops
    mini = nb.preset("s3dg", preset="mini")
    stats = sum(b.mean.size + b.var.size for _, b in nb.Network(mini).named_buffers())
    assert an.count_params(mini, an.Convention(bn="full")).params - an.count_params(mini).params == stats
    assert an.count_params(spec, an.Convention(head=False)).params == one.params - (1024 * 400 + 400)
    with pytest.raises(ValueError):
        an.Convention(3)


@pytest.mark.parametrize("name", ["i3d", "s3dg", "fast-s3d", "i2d"])
@pytest.mark.parametrize("conv", [an.Convention(), an.Convention(bn="none", head=False), an.Convention(bn="full")])
def test_analytic_params_match_built_network(name, conv):
    spec = nb.preset(name, preset="mini")
    assert an.count_params(spec, conv).params == an.network_param_count(nb.Network(spec), conv)


def test_gate_increment_is_sum_of_n_squared_plus_n():
    s3d, s3dg = an.count_params(nb.preset("s3d")), an.count_params(nb.preset("s3dg"))
    spec = nb.preset("s3dg")
    expected = 0
    for layer in spec.surgery_layers():
        if layer.type == "conv":
            widths = [layer.out_channels]
        else:
            b0, _, b1, _, b2, b3 = layer.widths
            widths = [b0, b1, b2, b3]
        expected += sum(n * n + n for n in widths)
    assert s3dg.params - s3d.params == expected


def test_flops_scale_with_geometry():
    spec = nb.preset("i3d", preset="mini")
    base = an.count_flops(spec, (16, 32, 32, 3))
    wide = an.count_flops(spec, (16, 64, 64, 3))
    long = an.count_flops(spec, (32, 32, 32, 3))
    for b, w, t in zip(base.rows, wide.rows, long.rows):
        if b.type in ("conv", "inception"):
            assert w.macs == 4 * b.macs, b.name
            assert t.macs == 2 * b.macs, b.name
    with pytest.raises(ValueError):
        an.count_flops(spec, (0, 32, 32, 3))


def test_separable_replacement_reduces_cost_for_backbone_widths():
    full, sep = an.count_flops(nb.preset("i3d")), an.count_flops(nb.preset("s3d"))
    assert sep.params < full.params and sep.flops < full.flops
    for a, b in zip(full.rows, sep.rows):
        if a.name.startswith("Mixed") or a.name in ("Conv_1a", "Conv_2c"):
            assert b.macs < a.macs, a.name


@pytest.mark.parametrize("conv", ["full", "separable"])
def test_top_heavy_cheaper_than_bottom_heavy(conv):
    th = {r["n_3d"]: r["flops"] for r in an.tradeoff_curve("TopHeavy", conv)}
    bh = {r["n_3d"]: r["flops"] for r in an.tradeoff_curve("BottomHeavy", conv)}
    for n in range(1, nb.K_TOTAL):
        assert th[n] < bh[n], n
    assert th[0] == bh[0] == an.count_flops(nb.preset("i2d")).flops
    top = an.count_flops(nb.preset("i3d" if conv == "full" else "s3d")).flops
    assert th[nb.K_TOTAL] == bh[nb.K_TOTAL] == top


def test_curve_monotone_and_contains_fast_s3d():
    rows = an.tradeoff_curve("TopHeavy", "separable")
    flops = [r["flops"] for r in sorted(rows, key=lambda r: r["n_3d"])]
    assert flops == sorted(flops)
    point = [r for r in rows if r["K"] == nb.K_TOTAL - 1][0]
    assert point["flops"] == an.count_flops(nb.preset("fast-s3d")).flops


def _read_csv(text):
    lines = text.splitlines()
    assert lines[0].startswith("# stkit-") and " v1" in lines[0]
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def test_csv_schemas_are_versioned():
    rep = an.count_flops(nb.preset("i3d", preset="mini"))
    rows = _read_csv(rep.to_csv())
    assert tuple(rows[0]) == an.COST_COLUMNS
    assert rows[-1]["name"] == "TOTAL" and int(rows[-1]["flops"]) == rep.flops
    assert "convention=mac=1" in rep.to_csv().splitlines()[0]
    curve = _read_csv(an.curve_csv(an.tradeoff_curve("TopHeavy", "full", (16, 32, 32, 3), preset="mini")))
    assert tuple(curve[0]) == an.CURVE_COLUMNS


def test_offset_stats_for_inflated_network_are_identical_per_offset():
    spec = nb.preset("i3d", preset="mini")
    net = nb.inflate(nb.Network(nb.as_2d(spec), seed=1), nb.Network(spec))
    stats = an.weight_offset_stats(net)
    for layer in stats.layers():
        rows = stats.for_layer(layer)
        offsets = [r["offset"] for r in rows]
        kt = len(rows)
        assert offsets == list(range(-(kt - 1) // 2, (kt - 1) // 2 + 1))
        assert np.std([r["std"] - rows[0]["std"] for r in rows]) == 0.0
    assert all(abs(r - 1.0) < 1e-6 for _, r in an.unit_offset_ratios(net))
    assert tuple(_read_csv(stats.to_csv())[0]) == an.OFFSET_COLUMNS


def test_offset_stats_for_center_only_kernel_and_2d_network():
    spec = nb.preset("s3d", preset="mini")
    net = nb.Network(spec)
    for _, unit in an.temporal_kernels(net):
        set_center_delta(unit)
    stats = an.weight_offset_stats(net)
    off = [r for r in stats.rows if r["offset"] != 0]
    assert off and all(r[q] == 0.0 for r in off for q in ("min", "q25", "median", "q75", "max"))
    empty = an.weight_offset_stats(nb.Network(nb.preset("i2d", preset="mini")))
    assert empty.rows == [] and "no temporal" in empty.notice


def test_reversal_probe_on_random_i2d_and_palindromes():
    data = generate_synthetic(DatasetSpec(samples=16, seed=2))
    res = an.reversal_probe(nb.Network(nb.preset("i2d", preset="mini"), seed=7), data.clips, data.labels)
    assert res.max_logit_delta < 1e-5
    assert res.acc_normal == res.acc_reversed
    pal = np.concatenate([data.clips[:, :8], data.clips[:, :8][:, ::-1]], axis=1)
    res = an.reversal_probe(nb.Network(nb.preset("s3dg", preset="mini"), seed=7), pal, data.labels)
    assert res.max_logit_delta == 0.0


def test_export_embeddings():
    spec = nb.preset("i3d", preset="mini")
    net = nb.Network(spec, seed=1)
    data = generate_synthetic(DatasetSpec(samples=4, seed=3))
    clips = np.concatenate([data.clips, data.clips[:1]])
    labels = np.concatenate([data.labels, data.labels[:1]])
    emb = an.export_embeddings(net, clips, labels, "Max5a")
    assert emb.shape == (5, spec.layer("Mixed_4f").channels + 1)
    np.testing.assert_array_equal(emb[0], emb[4])
    const = np.full((2, *spec.input), 0.3, dtype=np.float32)
    e = an.export_embeddings(net, const, np.zeros(2), "Mixed_5c")
    np.testing.assert_array_equal(e[0], e[1])
    with pytest.raises(KeyError, match="valid names"):
        an.export_embeddings(net, clips, labels, "Max9z")
    rows = _read_csv(an.embeddings_csv(emb, "Max5a"))
    assert len(rows) == 5 and "label" in rows[0]


def test_calibration_picks_a_candidate_and_reports_every_anchor():
    conv, res = an.calibrate()
    assert conv in an.candidate_conventions()
    assert set(res) == {"i3d.params", "s3d.params", "s3dg.params", "i3d.flops", "s3d.flops", "s3dg.flops", "fast-s3d.flops"}
    assert an.Convention.from_tag(conv.tag) == conv
