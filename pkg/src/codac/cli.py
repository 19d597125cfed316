"""Command-line entry point.

Every subcommand works inside one run directory (``--out``): ``gen-data``
writes the CSV splits there, each training stage reads the previous stage's
checkpoint from it and writes its own, and the reporting commands emit CSV
plot data next to them.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .cde import StageIsolationError, attention_indicator, reconstruct, recon_error, anomaly_score
from .evaluation import (
    METRICS,
    VARIANTS,
    MetricsReport,
    build_data,
    evaluate_checkpoint,
    render_table,
    roc_points,
    run_ablation,
    StageCache,
    write_reports,
)
from .optim import DivergenceError
from .pipeline import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    load_checkpoint,
    load_config,
    predict_proba,
    save_checkpoint,
    stage1,
    stage2,
    stage3,
)
from .signals import DataFormatError, read_csv, write_csv

log = logging.getLogger("codac")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file (defaults otherwise)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", default="run", help="run directory (default: run)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codac", description="Contrastive time-series diagnosis on synthetic signals.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset as CSV splits")
    _common(p)
    p.add_argument("--labels-frac", type=float, help="fraction of train segments that keep labels")

    p = sub.add_parser("train-cde", help="stage 1: fit the discrepancy estimator on healthy data")
    _common(p)

    p = sub.add_parser("pretrain", help="stage 2: contrastive pre-training")
    _common(p)

    p = sub.add_parser("finetune", help="stage 3: supervised fine-tuning")
    _common(p)
    p.add_argument("--mode", choices=("pft", "fft"), help="partial (frozen encoder) or full fine-tuning")

    p = sub.add_parser("evaluate", help="test-set metrics and ROC points for a fine-tuned checkpoint")
    _common(p)
    p.add_argument("--mode", choices=("pft", "fft"), help="which fine-tuned checkpoint to evaluate")

    p = sub.add_parser("score", help="per-timestep anomaly scores for the test segments")
    _common(p)

    p = sub.add_parser("ablate", help="run ablation variants over several seeds")
    _common(p)
    p.add_argument("--variants", default="all", help=f"comma list of {','.join(VARIANTS)} or 'all'")
    p.add_argument("--seeds", type=int, help="number of seeds, taken as 0..N-1 (default: config seeds)")
    p.add_argument("--labels-frac", type=float, help="fraction of train segments that keep labels")
    p.add_argument("--mode", choices=("pft", "fft"), help="fine-tuning mode for every variant")

    p = sub.add_parser("report", help="print the aggregated table from an ablation summary.csv")
    _common(p)
    return parser


def _config(args) -> TrainConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "labels_frac", None) is not None:
        over["label_fraction"] = args.labels_frac
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    cfg = dataclasses.replace(cfg, **over)
    cfg.validate()
    return cfg


def _write_rows(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _curve(path: Path, values) -> None:
    _write_rows(path, ("epoch", "loss"), [(i, repr(float(v))) for i, v in enumerate(values)])


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run the earlier stage first")
    return path


def cmd_gen_data(cfg: TrainConfig, out: Path) -> None:
    data = build_data(cfg)
    write_csv(data.healthy, out / "healthy.csv")
    write_csv(data.split.train, out / "train.csv")
    write_csv(data.split.val, out / "val.csv")
    write_csv(data.split.test, out / "test.csv")
    n_lab = sum(s.label >= 0 for s in data.split.train)
    print(f"wrote {len(data.healthy)} healthy, {len(data.split.train)} train ({n_lab} labeled), "
          f"{len(data.split.val)} val, {len(data.split.test)} test segments to {out}")


def cmd_train_cde(cfg: TrainConfig, out: Path) -> None:
    healthy = read_csv(_need(out / "healthy.csv"))
    ck = stage1(cfg, healthy)
    save_checkpoint(ck, out / "cde.ckpt")
    _curve(out / "cde_loss.csv", ck.history.get("cde_loss", []))
    print(f"stage 1 done: {out / 'cde.ckpt'}")


def cmd_pretrain(cfg: TrainConfig, out: Path) -> None:
    ck1 = load_checkpoint(_need(out / "cde.ckpt"))
    ck2 = stage2(cfg, ck1, read_csv(_need(out / "healthy.csv")), read_csv(_need(out / "train.csv")))
    save_checkpoint(ck2, out / "pretrain.ckpt")
    _curve(out / "pretrain_loss.csv", ck2.history["pretrain_loss"])
    print(f"stage 2 done: {out / 'pretrain.ckpt'}")


def cmd_finetune(cfg: TrainConfig, out: Path) -> None:
    ck2 = load_checkpoint(_need(out / "pretrain.ckpt"))
    train = read_csv(_need(out / "train.csv"))
    val = read_csv(_need(out / "val.csv"))
    before = ck2.encoder.checksum()
    ck3 = stage3(cfg, ck2, train, val)
    save_checkpoint(ck3, out / f"finetune_{cfg.mode}.ckpt")
    _curve(out / f"finetune_{cfg.mode}_loss.csv", ck3.history["finetune_loss"])
    va = ck3.history.get("val_auroc", [])
    lines = [
        f"mode = {cfg.mode}",
        f"epochs = {len(ck3.history['finetune_loss'])}",
        f"best_val_auroc = {max(va) if va else float('nan')!r}",
        f"encoder_checksum_before = {before}",
        f"encoder_checksum_after = {ck3.encoder.checksum()}",
    ]
    (out / f"finetune_{cfg.mode}_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def cmd_evaluate(cfg: TrainConfig, out: Path) -> None:
    ck3 = load_checkpoint(_need(out / f"finetune_{cfg.mode}.ckpt"))
    test = read_csv(_need(out / "test.csv"))
    m = evaluate_checkpoint(ck3, test)
    _write_rows(out / f"metrics_{cfg.mode}.csv", METRICS, [[repr(float(m[k])) for k in METRICS]])
    y = np.array([s.label for s in test])
    p = predict_proba(ck3, np.stack([s.x for s in test]))
    _write_rows(out / f"roc_{cfg.mode}.csv", ("fpr", "tpr"), [(repr(f), repr(t)) for f, t in roc_points(y, p)])
    for k in METRICS:
        print(f"{k} = {m[k]:.4f}")


def cmd_score(cfg: TrainConfig, out: Path) -> None:
    ck1 = load_checkpoint(_need(out / "cde.ckpt"))
    if ck1.cde is None:
        raise CheckpointError("checkpoint holds no CDE (use_cde = false)")
    test = read_csv(_need(out / "test.csv"))
    sdir = out / "scores"
    sdir.mkdir(exist_ok=True)
    for i, seg in enumerate(test):
        x_hat, summary = reconstruct(ck1.cde, seg.x)
        e = recon_error(seg.x, x_hat)
        a = attention_indicator(summary) if summary is not None else np.zeros_like(e)
        s = anomaly_score(e, a, cfg.beta)
        rows = [(t, repr(e[t]), repr(a[t]), repr(s[t]), int(seg.anomaly_mask[t])) for t in range(len(e))]
        _write_rows(sdir / f"{i:04d}_{seg.patient_id}.csv", ("t", "e", "a", "s", "mask"), rows)
    print(f"wrote {len(test)} score files to {sdir}")


def cmd_ablate(cfg: TrainConfig, out: Path, variants: str, n_seeds: int | None) -> None:
    names = list(VARIANTS) if variants == "all" else [v.strip() for v in variants.split(",") if v.strip()]
    for v in names:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)} or all")
    seeds = list(range(n_seeds)) if n_seeds is not None else list(cfg.seeds)
    if not seeds:
        raise UsageError("--seeds must be at least 1")
    cache = StageCache()
    reports = []
    for v in names:
        log.info("ablation variant %s over seeds %s", v, seeds)
        reports.append(run_ablation(v, cfg, seeds, cache=cache))
    write_reports(reports, out)
    sys.stdout.write(render_table(reports))


def read_summary(path: Path) -> list[MetricsReport]:
    """Rebuild reports from a summary.csv written by ``ablate``."""
    rows = list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))
    if not rows or set(("variant", "seed", *METRICS)) - set(rows[0]):
        raise DataFormatError(f"{path}: not an ablation summary")
    by: dict[str, dict] = {}
    try:
        for r in rows:
            d = by.setdefault(r["variant"], {"seeds": [], "per_seed": [], "mean": {}, "std": {}})
            vals = {k: float(r[k]) for k in METRICS}
            if r["seed"] in ("mean", "std"):
                d[r["seed"]] = vals
            else:
                d["seeds"].append(int(r["seed"]))
                d["per_seed"].append(vals)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    return [MetricsReport(v, d["seeds"], d["per_seed"], d["mean"], d["std"], len(d["seeds"]) == 1) for v, d in by.items()]


def cmd_report(out: Path) -> None:
    sys.stdout.write(render_table(read_summary(_need(out / "summary.csv"))))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train-cde":
            cmd_train_cde(cfg, out)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.command == "finetune":
            cmd_finetune(cfg, out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out)
        elif args.command == "score":
            cmd_score(cfg, out)
        elif args.command == "ablate":
            cmd_ablate(cfg, out, args.variants, args.seeds)
        elif args.command == "report":
            cmd_report(out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, ConfigError, StageIsolationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
