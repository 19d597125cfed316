"""Per-seed experiment runs, ablation variants and report aggregation."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from collections.abc import Sequence

import numpy as np

from .metrics import auprc, auroc, confusion_metrics, rep_sep_score
from .pipeline import Checkpoint, TrainConfig, embed, predict_proba, stage1, stage2, stage3
from .signals import DatasetSplit, TimeSeriesSegment, make_dataset, make_healthy_pool, split_by_patient

log = logging.getLogger(__name__)

METRICS = ("acc", "prec", "rec", "f1", "auroc", "auprc", "rep_sep")
TABLE_HEADERS = ("Acc", "Prec", "Rec", "F1", "AUROC", "AUPRC", "RepSep")


@dataclass(frozen=True)
class AblationVariant:
    id: str
    description: str
    delta: dict = field(default_factory=dict)


VARIANTS = {
    v.id: v
    for v in (
        AblationVariant("full", "complete method", {}),
        AblationVariant(
            "cde_vanilla_ae",
            "CDE replaced by a per-timestep perceptron autoencoder; attention indicator is 0",
            {"cde_arch": "mlp"},
        ),
        AblationVariant("cde_none", "no discrepancy estimator; constant weights 0.5", {"use_cde": False, "weighting": "static"}),
        AblationVariant("dmcf_static", "CDE trained but weighting is static and uniform (0.5)", {"weighting": "static"}),
        AblationVariant(
            "dmcf_fixed_views",
            "one fixed augmentation per view, no weighting, inter-view loss only",
            {"fixed_views": True, "weighting": "none", "lam": 0.0},
        ),
    )
}


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {sorted(VARIANTS)}")
    return dataclasses.replace(cfg, **VARIANTS[variant].delta)


@dataclass
class ExperimentData:
    split: DatasetSplit
    healthy: list[TimeSeriesSegment]


def build_data(cfg: TrainConfig) -> ExperimentData:
    segs = make_dataset(cfg.n_patients, cfg.segs_per_patient, cfg.disease_rate, cfg.T, cfg.D, cfg.seed)
    split = split_by_patient(segs, (0.6, 0.2, 0.2), cfg.label_fraction, cfg.seed)
    healthy = make_healthy_pool(cfg.n_healthy, cfg.T, cfg.D, cfg.seed)
    return ExperimentData(split, healthy)


def evaluate_checkpoint(ckpt: Checkpoint, segs: Sequence[TimeSeriesSegment]) -> dict[str, float]:
    X = np.stack([s.x for s in segs])
    y = np.array([s.label for s in segs])
    p = predict_proba(ckpt, X)
    acc, prec, rec, f1 = confusion_metrics(y, p)
    return {
        "acc": acc,
        "prec": prec,
        "rec": rec,
        "f1": f1,
        "auroc": auroc(y, p),
        "auprc": auprc(y, p),
        "rep_sep": rep_sep_score(embed(ckpt, X), y),
    }


_STAGE1_KEYS = (
    "seed T D n_patients segs_per_patient disease_rate n_healthy epochs_cde lr_cde batch_size_cde cde_arch "
    "cde_d_model cde_blocks cde_heads cde_d_ff cde_d_latent cde_mask_chunk cde_mask_passes cde_embed_kernel use_cde"
).split()
_STAGE3_ONLY = "mode epochs_finetune lr_fft lr_pft batch_size_ft seeds".split()
# settings that only reach stage 2 through the anomaly scores
_SCORE_ONLY = [k for k in _STAGE1_KEYS if k.startswith(("cde_", "epochs_cde", "lr_cde", "batch_size_cde"))] + ["use_cde", "beta"]


def _key(cfg: TrainConfig, keys: Sequence[str] | None = None, exclude: Sequence[str] = ()) -> str:
    d = dataclasses.asdict(cfg)
    names = keys if keys is not None else [k for k in d if k not in exclude]
    return repr([(k, d[k]) for k in names])


class StageCache:
    """In-memory reuse of stage-1/2 checkpoints across variants sharing a prefix config."""

    def __init__(self):
        self.data: dict[str, ExperimentData] = {}
        self.s1: dict[str, Checkpoint] = {}
        self.s2: dict[str, Checkpoint] = {}
        self.seconds: dict[str, float] = {}  # wall time of each stage actually run, keyed like s1/s2

    def get_data(self, cfg: TrainConfig) -> ExperimentData:
        k = _key(cfg, ["seed", "T", "D", "n_patients", "segs_per_patient", "disease_rate", "n_healthy", "label_fraction"])
        if k not in self.data:
            self.data[k] = build_data(cfg)
        return self.data[k]

    def get_stage1(self, cfg: TrainConfig, data: ExperimentData) -> Checkpoint:
        k = _key(cfg, _STAGE1_KEYS)
        if k not in self.s1:
            t0 = time.perf_counter()
            self.s1[k] = stage1(cfg, data.healthy)
            self.seconds["s1:" + k] = time.perf_counter() - t0
        return self.s1[k]

    @staticmethod
    def _s2_key(cfg: TrainConfig) -> str:
        shared = cfg.weighting != "dynamic"
        return _key(cfg, exclude=_STAGE3_ONLY + (_SCORE_ONLY if shared else []))

    def stage_seconds(self, cfg: TrainConfig, stages: Sequence[str] = ("s1", "s2")) -> float:
        """Wall time spent on the given stages for ``cfg`` (0 for parts never run here)."""
        keys = {"s1": _key(cfg, _STAGE1_KEYS), "s2": self._s2_key(cfg)}
        return sum(self.seconds.get(f"{st}:{keys[st]}", 0.0) for st in stages)

    def get_stage2(self, cfg: TrainConfig, data: ExperimentData) -> Checkpoint:
        """Without dynamic weighting the scores are unused, so stage 2 is shared
        by every CDE setting and only the attached CDE differs."""
        ck1 = self.get_stage1(cfg, data)
        shared = cfg.weighting != "dynamic"
        k = self._s2_key(cfg)
        if k not in self.s2:
            t0 = time.perf_counter()
            self.s2[k] = stage2(cfg, ck1, data.healthy, data.split.train)
            self.seconds["s2:" + k] = time.perf_counter() - t0
        ck2 = self.s2[k]
        if not shared:
            return ck2
        hist = dict(ck1.history)
        hist["pretrain_loss"] = ck2.history["pretrain_loss"]
        return dataclasses.replace(ck2, config=cfg, cde=ck1.cde, history=hist)


def run_seed(cfg: TrainConfig, cache: StageCache | None = None) -> tuple[dict[str, float], Checkpoint]:
    """All three stages for ``cfg.seed``; returns test metrics and the final checkpoint."""
    cache = cache or StageCache()
    data = cache.get_data(cfg)
    ck2 = cache.get_stage2(cfg, data)
    ck3 = stage3(cfg, ck2, data.split.labeled_train, data.split.val)
    return evaluate_checkpoint(ck3, data.split.test), ck3


@dataclass
class MetricsReport:
    variant: str
    seeds: list[int]
    per_seed: list[dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    single_seed: bool = False

    def __post_init__(self):
        if self.per_seed and not self.mean:
            self.mean, self.std, self.single_seed = aggregate(self.per_seed)
        for row in self.per_seed:
            for k in METRICS:
                lim = 100.0 if k == "rep_sep" else 1.0
                if not 0.0 <= row[k] <= lim + 1e-12:
                    raise ValueError(f"metric {k}={row[k]} outside [0, {lim}]")


def aggregate(rows: Sequence[dict[str, float]]) -> tuple[dict[str, float], dict[str, float], bool]:
    """Per-metric sample mean and n-1 standard deviation; one row gives std 0 and a flag."""
    if not rows:
        raise ValueError("nothing to aggregate")
    keys = list(rows[0])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    if len(rows) == 1:
        return mean, {k: 0.0 for k in keys}, True
    std = {k: float(np.std([r[k] for r in rows], ddof=1)) for k in keys}
    return mean, std, False


def _one(args):
    variant, cfg, seed = args
    vcfg = dataclasses.replace(variant_config(variant, cfg), seed=seed)
    metrics, _ = run_seed(vcfg)
    return metrics


def run_ablation(
    variant: str,
    cfg: TrainConfig,
    seeds: Sequence[int] | None = None,
    cache: StageCache | None = None,
    workers: int | None = None,
) -> MetricsReport:
    seeds = list(seeds if seeds is not None else cfg.seeds)
    vcfg = variant_config(variant, cfg)
    workers = workers if workers is not None else int(os.environ.get("CODAC_THREADS", "1"))
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_one, [(variant, cfg, s) for s in seeds]))
    else:
        cache = cache or StageCache()
        rows = [run_seed(dataclasses.replace(vcfg, seed=s), cache)[0] for s in seeds]
    return MetricsReport(variant, seeds, rows)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------
def _fmt(v: float) -> str:
    return repr(float(v))


def results_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "seed") + METRICS)
    for r in reports:
        for seed, row in zip(r.seeds, r.per_seed):
            w.writerow([r.variant, seed] + [_fmt(row[k]) for k in METRICS])
    return buf.getvalue()


def summary_csv(reports: Sequence[MetricsReport]) -> str:
    """Per-seed rows followed by ``mean`` and ``std`` rows for each variant."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "seed") + METRICS)
    for r in reports:
        for seed, row in zip(r.seeds, r.per_seed):
            w.writerow([r.variant, seed] + [_fmt(row[k]) for k in METRICS])
    for r in reports:
        w.writerow([r.variant, "mean"] + [_fmt(r.mean[k]) for k in METRICS])
        w.writerow([r.variant, "std"] + [_fmt(r.std[k]) for k in METRICS])
    return buf.getvalue()


def format_row(mean: dict[str, float], std: dict[str, float], percent: bool = True) -> list[str]:
    """``"92.00 ± 2.83"`` cells in Acc, Prec, Rec, F1, AUROC, AUPRC, RepSep order."""
    cells = []
    for k in METRICS:
        scale = 100.0 if percent and k != "rep_sep" else 1.0
        cells.append(f"{mean[k] * scale:.2f} ± {std[k] * scale:.2f}")
    return cells


def render_table(reports: Sequence[MetricsReport]) -> str:
    rows = [[r.variant] + format_row(r.mean, r.std) for r in reports]
    head = ["Variant", *TABLE_HEADERS]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    out = [line(head), line(["-" * w for w in widths])] + [line(r) for r in rows]
    flag = any(r.single_seed for r in reports)
    if flag:
        out.append("(single seed: std reported as 0)")
    return "\n".join(out) + "\n"


def write_reports(reports: Sequence[MetricsReport], out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (out / f"{r.variant}.csv").write_text(results_csv([r]), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(reports), encoding="utf-8")
    (out / "table.txt").write_text(render_table(reports), encoding="utf-8")


def roc_points(y, scores) -> list[tuple[float, float]]:
    """(fpr, tpr) at each distinct descending threshold, starting at (0, 0)."""
    y = np.asarray(y).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = ends + 1 - tp
    P, N = max(int(y.sum()), 1), max(int((1 - y).sum()), 1)
    return [(0.0, 0.0)] + [(float(f / N), float(t / P)) for f, t in zip(fp, tp)]
