import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_images
from oracles import ols_slope, sorted_quantile
from resus.diagnostics import (DiagnosticError, emit_report, fit_loglog_slope, heatmap_stats, load_report,
                               lw_overshoot, pruning_severity, strip_timestamp)
from resus.pruning import apply_mask_permanent, global_l1_mask
from resus.repair import LayerPlan, RepairPlan
from resus.stats import ChannelStats, PairedStats, collect_paired, collect_stats


def _paired(v_dense, v_pruned, layer=3):
    vd = np.asarray(v_dense, dtype=np.float64)
    vp = np.asarray(v_pruned, dtype=np.float64)
    z = np.zeros_like(vd)
    return PairedStats({layer: ChannelStats(layer, z, vd, 10)}, {layer: ChannelStats(layer, z, vp, 10)})


# ------------------------------------------------------------ slope


def test_slope_identity_and_square():
    v = np.random.default_rng(0).uniform(0.01, 10, 30)
    assert fit_loglog_slope(v, v).alpha == 1.0
    assert fit_loglog_slope(v, v ** 2).alpha == pytest.approx(2.0, abs=1e-9)


def test_slope_matches_ols_oracle():
    rng = np.random.default_rng(1)
    vd = rng.uniform(0.01, 10, 40)
    vr = vd ** 1.3 * np.exp(rng.normal(0, 0.3, 40))
    fit = fit_loglog_slope(vd, vr)
    a, b = ols_slope(np.log10(vd), np.log10(vr))
    assert fit.alpha == pytest.approx(a, abs=1e-9)
    assert fit.intercept == pytest.approx(b, abs=1e-9)
    assert fit.n_points == 40 and fit.n_excluded == 0


def test_slope_floor_and_errors():
    vd = np.array([1.0, 2.0, 4.0, 1e-20])
    fit = fit_loglog_slope(vd, np.array([1.0, 2.0, 4.0, 5.0]))
    assert fit.n_excluded == 1 and fit.alpha == 1.0
    with pytest.raises(DiagnosticError):
        fit_loglog_slope([1.0, 1e-20], [1.0, 1.0])
    with pytest.raises(DiagnosticError):
        fit_loglog_slope([2.0, 2.0], [1.0, 3.0])
    with pytest.raises(DiagnosticError):
        fit_loglog_slope([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=3, max_size=30, unique=True), st.floats(-3, 3),
       st.floats(-2, 2))
def test_exact_power_law_is_recovered(v, a, b):
    vd = np.array(v)
    if np.ptp(np.log10(vd)) < 1e-3:
        return
    vr = 10 ** b * vd ** a
    if vr.min() <= 1e-12 or not np.isfinite(vr).all():
        return
    assert fit_loglog_slope(vd, vr).alpha == pytest.approx(a, abs=1e-9)


# ------------------------------------------------------------ severity and overshoot


def test_severity_examples():
    v = np.array([0.5, 1.0, 2.0])
    assert pruning_severity(_paired(v, v)) == 0.0
    assert pruning_severity(_paired([3.0], [0.0])) == 1.0
    assert pruning_severity(_paired(v, 4 * v)) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-3, 1e3), st.floats(0, 1e3)), min_size=1, max_size=20),
       st.randoms(use_true_random=False))
def test_severity_permutation_invariance_and_zero_iff_equal(pairs, rnd):
    vd = np.array([a for a, _ in pairs])
    vp = np.array([b for _, b in pairs])
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    assert pruning_severity(_paired(vd[perm], vp[perm])) == pytest.approx(
        pruning_severity(_paired(vd, vp)), rel=1e-12, abs=1e-15)
    sev = pruning_severity(_paired(vd, vp))
    assert (sev == 0) == bool(np.all(np.sqrt(vp / vd) == 1.0))


def _plan(gammas):
    layers = [LayerPlan(i, np.ones(1), np.zeros(1), 1.0, np.ones(1), g, np.zeros(1))
              for i, g in enumerate(gammas)]
    return RepairPlan("bn_only", "median", True, 1e-8, layers)


def test_overshoot_examples():
    assert lw_overshoot(_plan([1.0, 1.0])) == 0.0
    assert lw_overshoot(_plan([0.5, 3.0])) == 1.0
    assert lw_overshoot([0.5, 3.0]) == 1.0
    assert lw_overshoot([]) == 0.0


# ------------------------------------------------------------ heatmap


def test_heatmap_dense_vs_dense():
    v = np.random.default_rng(2).uniform(0.1, 5, 20)
    (h,) = heatmap_stats(_paired(v, v), {"asr": {3: v}})
    assert h.frac_below_p5 <= 0.05
    assert h.ratio_quartiles["asr"] == (1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=64, unique=True))
def test_heatmap_dense_vs_dense_bound(v):
    # a linear-interpolated p5 lies between order statistics, so the fraction of
    # values strictly below it is ceil(0.05 (C - 1)) / C, which exceeds 0.05 for
    # most C; see the decisions ledger
    v = np.array(v)
    (h,) = heatmap_stats(_paired(v, v), {"m": {3: v}})
    c = len(v)
    assert h.frac_below_p5 <= math.ceil(0.05 * (c - 1)) / c
    assert h.ratio_quartiles["m"] == (1.0, 1.0)


def test_heatmap_collapsed_layer():
    v = np.linspace(1, 2, 8)
    (h,) = heatmap_stats(_paired(v, np.zeros(8)), {})
    assert h.frac_below_p5 == 1.0


def test_heatmap_matches_sort_oracle(toy):
    net, p = toy
    x = toy_images(32)
    q = apply_mask_permanent(p, global_l1_mask(net, p, 0.7))
    paired = collect_paired((net, p), (net, q), x)
    rep = {i: s.var for i, s in collect_stats(net, q, x, net.repairable_layer_ids).items()}
    for h in heatmap_stats(paired, {"none": rep}):
        vd, vp = paired.dense[h.layer].var, paired.pruned[h.layer].var
        p5 = sorted_quantile(vd, 0.05)
        assert h.frac_below_p5 == sum(float(a) < p5 for a in vp) / len(vp)
        ratio = rep[h.layer] / vd
        q25, q75 = h.ratio_quartiles["none"]
        assert q25 == pytest.approx(sorted_quantile(ratio, 0.25), rel=1e-12)
        assert q75 == pytest.approx(sorted_quantile(ratio, 0.75), rel=1e-12)
        assert set(h.to_dict()) == {"layer", "frac_below_p5", "var_ratio_q25_none", "var_ratio_q75_none"}


def test_heatmap_missing_method_layer():
    v = np.ones(3) + np.arange(3)
    with pytest.raises(DiagnosticError):
        heatmap_stats(_paired(v, v), {"asr": {}})


# ------------------------------------------------------------ reports


ROWS = [
    {"run_id": "a", "seed": 0, "arch": "tiny-res", "sparsity": {"mode": "global_l1", "rate": 0.9},
     "method": "asr", "accuracy_top1": 0.5, "slopes": [{"layer": 3, "alpha": 1.1}], "status": "ok"},
    {"run_id": "b", "seed": 0, "arch": "tiny-res", "sparsity": {"mode": "nm", "n": 2, "m": 4},
     "method": "layerwise", "accuracy_top1": 0.25, "severity": None, "status": "error"},
]


def test_empty_report_is_valid(tmp_path):
    emit_report([], tmp_path / "r.json")
    doc = load_report(tmp_path / "r.json")
    assert doc["results"] == [] and doc["schema_version"] == 1
    emit_report([], tmp_path / "r.csv", "csv")
    assert (tmp_path / "r.csv").exists()


def test_json_round_trip(tmp_path):
    emit_report(ROWS, tmp_path / "r.json", created="2020-01-01T00:00:00+00:00")
    doc = load_report(tmp_path / "r.json")
    assert doc["results"] == ROWS
    assert doc["created"] == "2020-01-01T00:00:00+00:00"
    emit_report(ROWS, tmp_path / "s.json")
    assert strip_timestamp(load_report(tmp_path / "s.json")) == strip_timestamp(doc)


def test_csv_flattens_rows(tmp_path):
    emit_report(ROWS, tmp_path / "r.csv", "csv")
    with open(tmp_path / "r.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["sparsity.rate"] == "0.9"
    assert json.loads(rows[0]["slopes"]) == ROWS[0]["slopes"]
    assert rows[1]["sparsity.n"] == "2"
    assert list(rows[0])[:2] == ["run_id", "seed"]


def test_unknown_format_and_unwritable_path(tmp_path):
    with pytest.raises(ValueError):
        emit_report(ROWS, tmp_path / "r.xml", "xml")
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError):
        emit_report(ROWS, tmp_path / "file" / "r.json")


@pytest.mark.slow
def test_overshoot_grows_with_sparsity(fixture_run):
    from resus import pipeline
    from resus.pruning import SparsityConfig
    cfg, net, dense, train, test = fixture_run
    calib = pipeline.calibration_images(train, cfg.calib.n_images, cfg.seed)
    hi = pipeline.prepare_sparsity(net, dense, SparsityConfig(rate=0.9), calib, test).overshoot
    lo = pipeline.prepare_sparsity(net, dense, SparsityConfig(rate=0.5), calib, test).overshoot
    assert hi > 0 and hi > lo
