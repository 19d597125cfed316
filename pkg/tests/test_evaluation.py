import numpy as np
import pytest

from codac.evaluation import (
    METRICS,
    TABLE_HEADERS,
    VARIANTS,
    MetricsReport,
    StageCache,
    aggregate,
    build_data,
    evaluate_checkpoint,
    format_row,
    render_table,
    results_csv,
    roc_points,
    run_ablation,
    run_seed,
    summary_csv,
    variant_config,
)
from codac.metrics import auprc, auroc, confusion_metrics, rep_sep_score
from codac.pipeline import TrainConfig, stage1, stage2, stage3

from tiny import TINY


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, "seeds": [0, 1], **kw})


def row(v):
    return {k: (v * 100 if k == "rep_sep" else v) for k in METRICS}


# -- metric examples ------------------------------------------------------------
def test_confusion_examples():
    assert confusion_metrics([1, 1, 0, 0], [0.9, 0.8, 0.3, 0.2]) == (1.0, 1.0, 1.0, 1.0)
    assert confusion_metrics([1, 0, 1, 0], [0.9, 0.6, 0.4, 0.1]) == (0.5, 0.5, 0.5, 0.5)
    assert confusion_metrics([1, 1, 0], [0.1, 0.2, 0.3])[1:] == (0.0, 0.0, 0.0)


def test_ranking_examples():
    assert abs(auroc([1, 0, 0, 0], [0.6, 0.4, 0.6, 0.2]) - 2.5 / 3) < 1e-12
    assert auprc([0, 1], [0.9, 0.1]) == 0.5


def test_rep_sep_examples():
    rng = np.random.default_rng(0)
    X = np.concatenate([np.tile([1.0, 0.0], (5, 1)), np.tile([-1.0, 0.0], (5, 1))]) + rng.normal(0, 1e-9, (10, 2))
    assert abs(rep_sep_score(X, [0] * 5 + [1] * 5) - 100.0) < 1e-6
    assert rep_sep_score(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 100.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        X = r.normal(size=(60, 4)) + 5.0
        y = r.permutation([0] * 30 + [1] * 30)
        assert abs(rep_sep_score(X, y) - 50.0) < 5.0


# -- aggregation and formatting ---------------------------------------------------
def test_aggregate_duplicates_and_sample_std():
    mean, std, single = aggregate([row(0.5), row(0.5)])
    assert all(v == 0.0 for v in std.values()) and not single
    mean, std, _ = aggregate([row(0.90), row(0.94)])
    assert format_row(mean, std)[0] == "92.00 ± 2.83"
    assert format_row(mean, std)[-1] == "92.00 ± 2.83"  # rep_sep is already on a 0-100 scale


def test_aggregate_single_seed_and_empty():
    mean, std, single = aggregate([row(0.7)])
    assert single and std["auroc"] == 0.0 and mean["auroc"] == 0.7
    with pytest.raises(ValueError):
        aggregate([])


def test_table_column_order():
    assert TABLE_HEADERS[:6] == ("Acc", "Prec", "Rec", "F1", "AUROC", "AUPRC")
    rep = MetricsReport("full", [0], [row(0.8)])
    text = render_table([rep])
    head = text.splitlines()[0].split()
    assert head == ["Variant", *TABLE_HEADERS]
    assert "single seed" in text


def test_metrics_report_range_check():
    bad = row(0.5)
    bad["auroc"] = 1.5
    with pytest.raises(ValueError):
        MetricsReport("full", [0], [bad])


def test_summary_csv_layout():
    reps = [MetricsReport(v, [0, 1], [row(0.6), row(0.8)]) for v in ("full", "dmcf_static")]
    lines = summary_csv(reps).splitlines()
    assert lines[0] == "variant,seed," + ",".join(METRICS)
    assert len(lines) == 1 + 4 + 4
    assert [ln.split(",")[1] for ln in lines[5:]] == ["mean", "std", "mean", "std"]
    assert len(results_csv(reps).splitlines()) == 5


def test_roc_points():
    pts = roc_points([0, 1, 1, 0], [0.1, 0.9, 0.5, 0.5])
    assert pts == [(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]
    # trapezoid area under the points equals the AUROC
    f, t = np.array(pts).T
    area = float(((f[1:] - f[:-1]) * (t[1:] + t[:-1]) / 2).sum())
    assert abs(area - auroc([0, 1, 1, 0], [0.1, 0.9, 0.5, 0.5])) < 1e-12


# -- variants -----------------------------------------------------------------------
def test_variant_ids_and_deltas():
    assert set(VARIANTS) == {"full", "cde_vanilla_ae", "cde_none", "dmcf_static", "dmcf_fixed_views"}
    cfg = TrainConfig()
    assert variant_config("full", cfg) == cfg
    assert variant_config("cde_vanilla_ae", cfg).cde_arch == "mlp"
    assert variant_config("cde_none", cfg).use_cde is False
    assert variant_config("dmcf_static", cfg).weighting == "static"
    fv = variant_config("dmcf_fixed_views", cfg)
    assert fv.fixed_views and fv.weighting == "none" and fv.lam == 0.0
    with pytest.raises(ValueError):
        variant_config("nope", cfg)


def test_full_variant_equals_plain_pipeline():
    cfg = tiny_cfg()
    data = build_data(cfg)
    ck3 = stage3(cfg, stage2(cfg, stage1(cfg, data.healthy), data.healthy, data.split.train), data.split.labeled_train, data.split.val)
    plain = evaluate_checkpoint(ck3, data.split.test)
    rep = run_ablation("full", cfg, [0])
    assert rep.per_seed[0] == plain


def test_static_and_no_cde_share_stage2_traces():
    base = tiny_cfg()
    data = build_data(base)
    traces = []
    for v in ("dmcf_static", "cde_none"):
        cfg = variant_config(v, base)
        ck2 = stage2(cfg, stage1(cfg, data.healthy), data.healthy, data.split.train)
        traces.append((ck2.history["pretrain_loss"], ck2.encoder.checksum()))
    assert traces[0] == traces[1]


def test_cache_matches_uncached_for_shared_stage2():
    base = tiny_cfg()
    cache = StageCache()
    got = [run_seed(variant_config(v, base), cache)[0] for v in ("full", "dmcf_static", "cde_none")]
    fresh = [run_seed(variant_config(v, base))[0] for v in ("dmcf_static", "cde_none")]
    assert got[1:] == fresh
    assert len(cache.s2) == 2


def test_all_variants_run_on_tiny_config():
    cfg = tiny_cfg()
    cache = StageCache()
    for v in VARIANTS:
        rep = run_ablation(v, cfg, [0, 1], cache=cache)
        assert rep.seeds == [0, 1] and len(rep.per_seed) == 2 and not rep.single_seed


def test_parallel_seeds_match_serial():
    cfg = tiny_cfg()
    serial = run_ablation("full", cfg, [0, 1], workers=1)
    parallel = run_ablation("full", cfg, [0, 1], workers=2)
    assert serial.per_seed == parallel.per_seed
