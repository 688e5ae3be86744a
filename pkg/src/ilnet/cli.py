"""Command line front door: ``run``, ``sweep`` and ``analyze``.

    ilnet run --config configs/desk.cfg --seed 0 --out runs/desk-0
    ilnet sweep --spec configs/sweeps/beta.cfg --out sweeps/beta
    ilnet analyze --log-dir runs/desk-0 --out runs/desk-0/analysis

When ``--out`` is omitted, outputs go under ``$ILNET_SCRATCH``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig, load_config
from .eval_analysis import (
    SHARE_KEYS,
    APReport,
    QualityHistogram,
    format_report_table,
    loss_share_series,
    write_report_jsonl,
)

log = logging.getLogger("ilnet")

SCRATCH_ENV = "ILNET_SCRATCH"
SWEEP_PARAMETERS = ("beta", "mu", "theta", "gamma_iou", "branch_mask", "filter_enabled")
SUMMARY_COLUMNS = ["parameter", "value", "n_seeds"] + [
    f"{m}_{s}" for m in ("AP", "AP50", "AP75") for s in ("mean", "min", "max")
]


class CliError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, extra: dict):
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(out).as_posix()] = _sha256(p)
    (out / "manifest.json").write_text(json.dumps({**extra, "outputs": outputs}, indent=2) + "\n",
                                       encoding="utf-8")


def _resolve_out(out: Optional[str], default_name: str) -> Path:
    if out:
        return Path(out)
    scratch = os.environ.get(SCRATCH_ENV)
    if not scratch:
        raise CliError(f"no --out given and ${SCRATCH_ENV} is not set")
    return Path(scratch) / default_name


# ---------------------------------------------------------------------------
# run


def execute_run(cfg: RunConfig, out: Path) -> APReport:
    import torch

    from .model import save_checkpoint
    from .synthdata import make_eval_set, make_splits
    from .trainer import JsonlSink, evaluate_model, run_training

    torch.set_num_threads(1)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    data = make_splits(cfg.data)
    eval_scenes = make_eval_set(cfg.data)
    sink = JsonlSink(out)
    try:
        art = run_training(cfg.train, data, sink, eval_scenes, cfg.model_config())
    finally:
        sink.close()
    report = art.final_report or evaluate_model(art.teacher, eval_scenes, cfg.train)
    save_checkpoint(art.teacher, out / "checkpoints" / "teacher", cfg.train.total_iters)
    save_checkpoint(art.student, out / "checkpoints" / "student", cfg.train.total_iters)
    write_report_jsonl([("teacher", report)], out / "report.jsonl")
    (out / "report.txt").write_text(format_report_table([("teacher", report)]), encoding="utf-8")
    config_values = {k: config_mod.format_value(v) for k, v in cfg.to_flat().items()}
    write_manifest(out, {"seed": cfg.train.seed, "config": config_values})
    return report


def cmd_run(config: str, seed: Optional[int], out: Optional[str]) -> int:
    cfg = load_config(config)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out_dir = _resolve_out(out, f"run-seed{cfg.train.seed}")
    report = execute_run(cfg, out_dir)
    log.info("teacher mAP %.4f  AP50 %.4f  AP75 %.4f", report.mAP, report.AP50, report.AP75)
    return 0


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepSpec:
    parameter: str
    values: list[str]
    seeds: list[int]
    base_config: Path
    overrides: dict[str, str]

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMETERS)}")
        if not self.values:
            raise ConfigError("sweep value list is empty")
        if not self.seeds:
            raise ConfigError("sweep seed list is empty")


def load_sweep_spec(path: str | Path) -> SweepSpec:
    """Sweep spec file: ``parameter``, ``values``, ``seeds``, ``base_config``
    plus optional ``set.<key> = value`` overrides applied to every run."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"sweep spec not found: {path}")
    fields: dict[str, str] = {}
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("set."):
            overrides[key[4:]] = value
        elif key in ("parameter", "values", "seeds", "base_config"):
            fields[key] = value
        else:
            raise ConfigError(f"{path}:{lineno}: unknown sweep key {key!r}")
    for key in ("parameter", "values", "seeds", "base_config"):
        if key not in fields:
            raise ConfigError(f"{path}: missing {key}")
    try:
        seeds = [int(s) for s in fields["seeds"].split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"{path}: bad seeds: {exc}") from exc
    return SweepSpec(
        fields["parameter"],
        [v.strip() for v in fields["values"].split(",") if v.strip()],
        seeds,
        (path.parent / fields["base_config"]).resolve(),
        overrides,
    )


def _sweep_config(base: RunConfig, spec: SweepSpec, value: str, seed: int) -> RunConfig:
    values = dict(spec.overrides)
    if spec.parameter == "branch_mask" and value.lower() == "none":
        values["branch_enabled"] = "false"
    else:
        values[spec.parameter] = value
        if spec.parameter == "branch_mask":
            values["branch_enabled"] = "true"
    return base.with_overrides(values).with_seed(seed)


def _read_report(run_dir: Path) -> dict:
    with open(run_dir / "report.jsonl", encoding="utf-8") as fh:
        return json.loads(fh.readline())


def aggregate_sweep(out: Path, spec: SweepSpec) -> list[dict]:
    rows = []
    for value in spec.values:
        reports = [_read_report(out / "runs" / f"{spec.parameter}={value}" / f"seed{seed}")
                   for seed in spec.seeds]
        row = {"parameter": spec.parameter, "value": value, "n_seeds": len(reports)}
        for metric, key in (("AP", "mAP"), ("AP50", "AP50"), ("AP75", "AP75")):
            vals = np.array([100.0 * r[key] for r in reports])
            row[f"{metric}_mean"] = f"{vals.mean():.3f}"
            row[f"{metric}_min"] = f"{vals.min():.3f}"
            row[f"{metric}_max"] = f"{vals.max():.3f}"
        rows.append(row)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_sweep(spec_path: str, out: Optional[str]) -> int:
    spec = load_sweep_spec(spec_path)
    base = load_config(spec.base_config)
    out_dir = _resolve_out(out, f"sweep-{spec.parameter}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for value in spec.values:
        for seed in spec.seeds:
            cfg = _sweep_config(base, spec, value, seed)
            run_dir = out_dir / "runs" / f"{spec.parameter}={value}" / f"seed{seed}"
            log.info("sweep run %s=%s seed=%d", spec.parameter, value, seed)
            execute_run(cfg, run_dir)
    aggregate_sweep(out_dir, spec)
    write_manifest(out_dir, {"spec": str(Path(spec_path)), "parameter": spec.parameter,
                             "values": spec.values, "seeds": spec.seeds})
    return 0


# ---------------------------------------------------------------------------
# analyze


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def analyze_run(log_dir: Path, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = _read_jsonl(log_dir / "metrics.jsonl")
    quality = _read_jsonl(log_dir / "quality.jsonl")
    written: list[Path] = []
    hists = [QualityHistogram.from_dict(q["histogram"]) for q in quality]

    # per-snapshot histogram CSVs plus a long-format backing table
    rows = []
    for h in hists:
        h.write_csv(out / f"histogram_{h.iteration:07d}.csv")
        written.append(out / f"histogram_{h.iteration:07d}.csv")
        for lo, hi, c, e in zip(h.edges[:-1], h.edges[1:], h.counts, h.wrong_class):
            rows.append([h.iteration, f"{lo:.2f}", f"{hi:.2f}", c, e])
    _write_csv(out / "pseudo_quality.csv", ["iteration", "bin_low", "bin_high", "count", "wrong_class_count"], rows)
    written.append(out / "pseudo_quality.csv")

    labels = [f"{lo:.1f}-{hi:.1f}" for lo, hi in zip(hists[0].edges[:-1], hists[0].edges[1:])] if hists else []
    its = [h.iteration for h in hists]
    for name, attr, title in (("fig1a_pseudo_counts", "counts", "pseudo-boxes per IoU bin"),
                              ("fig1b_class_errors", "wrong_class", "wrong-class pseudo-boxes per IoU bin")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for b, lab in enumerate(labels):
            ax.plot(its, [getattr(h, attr)[b] for h in hists], marker="o", label=lab)
        ax.set_xlabel("iteration")
        ax.set_ylabel("count")
        ax.set_title(title)
        if labels:
            ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=100)
        plt.close(fig)
        written.append(out / f"{name}.png")

    fig, ax = plt.subplots(figsize=(6, 4))
    for h in hists:
        centers = [(lo + hi) / 2 for lo, hi in zip(h.edges[:-1], h.edges[1:])]
        ax.plot(centers, h.wrong_class, marker="o", label=f"it {h.iteration}")
    ax.set_xlabel("IoU with ground truth")
    ax.set_ylabel("wrong-class pseudo-boxes")
    if hists:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "fig1c_class_errors_per_iou.png", dpi=100)
    plt.close(fig)
    written.append(out / "fig1c_class_errors_per_iou.png")

    series = loss_share_series(metrics)
    _write_csv(out / "loss_shares.csv", ["iteration", *SHARE_KEYS],
               [[it, *(_fmt(s[k]) for k in SHARE_KEYS)] for it, s in zip(series.iterations, series.shares)])
    written.append(out / "loss_shares.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in SHARE_KEYS:
        ax.plot(series.iterations, [s[k] for s in series.shares], label=k)
    ax.set_xlabel("iteration")
    ax.set_ylabel("share of total loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "fig1d_loss_shares.png", dpi=100)
    plt.close(fig)
    written.append(out / "fig1d_loss_shares.png")

    counts = [[m["iteration"], _fmt(m.get("pseudo_raw", 0.0)), _fmt(m.get("pseudo_after_iou_filter", 0.0)),
               _fmt(m.get("pseudo_labels", 0.0))] for m in metrics]
    _write_csv(out / "filtered_counts.csv", ["iteration", "raw", "after_iou_filter", "kept"], counts)
    written.append(out / "filtered_counts.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, lab in enumerate(("raw", "after IoU filter", "kept")):
        ax.plot([c[0] for c in counts], [float(c[j + 1]) for c in counts], label=lab)
    ax.set_xlabel("iteration")
    ax.set_ylabel("pseudo-boxes per iteration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "fig3d_filtered_counts.png", dpi=100)
    plt.close(fig)
    written.append(out / "fig3d_filtered_counts.png")

    ap_rows = [[m["iteration"], _fmt(m["ap"]["mAP"]), _fmt(m["ap"]["AP50"]), _fmt(m["ap"]["AP75"])]
               for m in metrics if m.get("ap")]
    _write_csv(out / "ap_curve.csv", ["iteration", "mAP", "AP50", "AP75"], ap_rows)
    written.append(out / "ap_curve.csv")
    return written


def analyze_sweep(log_dir: Path, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(log_dir / "summary.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, metric in zip(axes, ("AP", "AP50", "AP75")):
        xs = range(len(rows))
        mean = [float(r[f"{metric}_mean"]) for r in rows]
        lo = [m - float(r[f"{metric}_min"]) for m, r in zip(mean, rows)]
        hi = [float(r[f"{metric}_max"]) - m for m, r in zip(mean, rows)]
        ax.errorbar(list(xs), mean, yerr=[lo, hi], marker="o", capsize=3)
        ax.set_xticks(list(xs), [r["value"] for r in rows])
        ax.set_xlabel(rows[0]["parameter"] if rows else "")
        ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(out / "sweep_comparison.png", dpi=100)
    plt.close(fig)
    written = [out / "sweep_comparison.png"]

    # mAP over training for every run, one curve per (value, seed)
    curves = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for run_dir in sorted((log_dir / "runs").glob("*/seed*")):
        metrics = _read_jsonl(run_dir / "metrics.jsonl")
        pts = [(m["iteration"], m["ap"]["mAP"]) for m in metrics if m.get("ap")]
        label = f"{run_dir.parent.name} {run_dir.name}"
        curves.extend([label, it, _fmt(v)] for it, v in pts)
        if pts:
            ax.plot(*zip(*pts), label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("teacher mAP")
    if curves:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "sweep_ap_curves.png", dpi=100)
    plt.close(fig)
    _write_csv(out / "sweep_ap_curves.csv", ["run", "iteration", "mAP"], curves)
    written += [out / "sweep_ap_curves.png", out / "sweep_ap_curves.csv"]
    return written


def cmd_analyze(log_dir: str, out: Optional[str]) -> int:
    src = Path(log_dir)
    if not src.is_dir():
        raise CliError(f"log directory not found: {src}")
    out_dir = _resolve_out(out, f"analysis-{src.name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    if (src / "metrics.jsonl").exists():
        analyze_run(src, out_dir)
    elif (src / "summary.csv").exists():
        analyze_sweep(src, out_dir)
    else:
        raise CliError(f"{src} holds neither metrics.jsonl nor summary.csv")
    write_manifest(out_dir, {"log_dir": str(src)})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p = sub.add_parser("analyze", help="plot diagnostics from a run or sweep directory")
    p.add_argument("--log-dir", required=True)
    p.add_argument("--out")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.seed, args.out)
        if args.command == "sweep":
            return cmd_sweep(args.spec, args.out)
        return cmd_analyze(args.log_dir, args.out)
    except (CliError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as a one-line reason
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
