"""COCO-style AP and the pseudo-label diagnostics: IoU-quality histograms,
class-error concentration and loss shares."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import BBox, ScoredBox, pairwise_iou_np

log = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class APReport:
    mAP: float
    AP50: float
    AP75: float
    per_class: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "AP50": self.AP50, "AP75": self.AP75,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def _class_ap(
    dets: list[tuple[int, float, np.ndarray]],
    gts: dict[int, np.ndarray],
    n_gt: int,
    threshold: float,
) -> float:
    """101-point interpolated AP for one class at one IoU threshold.

    ``dets`` are ``(image_index, score, box)`` already in ranking order.
    """
    if n_gt == 0:
        return float("nan")
    if not dets:
        return 0.0
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    tp = np.zeros(len(dets))
    for k, (img, _, box) in enumerate(dets):
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou_np(box[None], g)[0]
        ious[matched[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= threshold:
            matched[img][j] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(dets) + 1)
    # precision envelope, then sample at the recall points
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_ap(
    dets_per_image: Sequence[Sequence[ScoredBox]],
    gts_per_image: Sequence[Sequence[tuple[BBox, int]]],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    num_classes: Optional[int] = None,
) -> APReport:
    """Mean AP over classes that have ground truth, averaged over thresholds.

    Detections are ranked by score (descending, ties in input order) and
    greedily matched to the unmatched ground truth of highest IoU.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different image counts")
    classes = set()
    for g in gts_per_image:
        classes.update(c for _, c in g)
    if num_classes is not None:
        classes = {c for c in classes if c < num_classes}
    per_class: dict[int, float] = {}
    per_class_thr: dict[int, list[float]] = {}
    for c in sorted(classes):
        gts = {i: np.array([b.as_tuple() for b, gc in g if gc == c], dtype=np.float64).reshape(-1, 4)
               for i, g in enumerate(gts_per_image)}
        n_gt = sum(len(v) for v in gts.values())
        dets = [(i, d.score, np.array(d.box.as_tuple(), dtype=np.float64))
                for i, ds in enumerate(dets_per_image) for d in ds if d.class_id == c]
        order = sorted(range(len(dets)), key=lambda k: -dets[k][1])
        dets = [dets[k] for k in order]
        per_class_thr[c] = [_class_ap(dets, gts, n_gt, t) for t in iou_thresholds]
        per_class[c] = float(np.mean(per_class_thr[c]))
    if not per_class:
        return APReport(0.0, 0.0, 0.0, {})

    def at(thr: float) -> float:
        if thr not in iou_thresholds:
            return float("nan")
        j = list(iou_thresholds).index(thr)
        return float(np.mean([v[j] for v in per_class_thr.values()]))

    return APReport(float(np.mean(list(per_class.values()))), at(0.5), at(0.75), per_class)


# ---------------------------------------------------------------------------
# pseudo-label quality


@dataclass
class QualityHistogram:
    edges: list[float]
    counts: list[int]
    wrong_class: list[int]
    iteration: int = 0

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QualityHistogram":
        return cls(list(d["edges"]), list(d["counts"]), list(d["wrong_class"]), int(d["iteration"]))

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count", "wrong_class_count"])
            for lo, hi, c, e in zip(self.edges[:-1], self.edges[1:], self.counts, self.wrong_class):
                w.writerow([f"{lo:.2f}", f"{hi:.2f}", c, e])


def pseudo_label_quality(pseudo, gts: Sequence[tuple[BBox, int]]) -> list[tuple[float, bool]]:
    """``(max IoU, class is wrong)`` per pseudo-label against one image's gts."""
    out = []
    for p in pseudo:
        if not gts:
            out.append((0.0, True))
            continue
        ious = pairwise_iou_np(np.array([p.box.as_tuple()]),
                               np.array([b.as_tuple() for b, _ in gts]))[0]
        j = int(np.argmax(ious))
        out.append((float(ious[j]), gts[j][1] != p.class_id))
    return out


def pseudo_quality_histogram(
    pseudo_per_image: Sequence[Sequence],
    hidden_gts_per_image: Sequence[Sequence[tuple[BBox, int]]],
    bins: int = 10,
    iteration: int = 0,
) -> QualityHistogram:
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins, dtype=int)
    wrong = np.zeros(bins, dtype=int)
    for pseudo, gts in zip(pseudo_per_image, hidden_gts_per_image):
        for q, is_wrong in pseudo_label_quality(pseudo, gts):
            b = min(int(q * bins), bins - 1)
            counts[b] += 1
            wrong[b] += int(is_wrong)
    return QualityHistogram([round(float(e), 10) for e in edges], counts.tolist(), wrong.tolist(), iteration)


def error_concentration(hist: QualityHistogram, split_iou: float = 0.6) -> tuple[float, float]:
    """(share of pseudo-labels below ``split_iou``, share of class errors below it).

    The second value is NaN when the histogram holds no class errors.
    """
    if hist.total == 0:
        raise ValueError("empty histogram")
    edges = np.asarray(hist.edges)
    hits = np.nonzero(np.isclose(edges, split_iou))[0]
    if len(hits) == 0:
        raise ValueError(f"split {split_iou} is not a bin edge")
    cut = int(hits[0])
    counts, wrong = np.asarray(hist.counts), np.asarray(hist.wrong_class)
    below = counts[:cut].sum() / counts.sum()
    errors = wrong.sum()
    err_below = wrong[:cut].sum() / errors if errors > 0 else float("nan")
    return float(below), float(err_below)


# ---------------------------------------------------------------------------
# loss shares

SHARE_KEYS = ("sup_cls", "sup_reg", "sup_iou", "unsup_cls", "unsup_reg", "unsup_iou")


@dataclass
class ShareSeries:
    iterations: list[int]
    shares: list[dict[str, float]]
    skipped: list[int]


def weighted_terms(record: dict) -> dict[str, float]:
    """Weighted contributions of one metrics record, keyed as in SHARE_KEYS."""
    w = record["weights"]
    sup, unsup = record["sup"], record.get("unsup") or {}
    def g(d, k):
        return float(d.get(k, 0.0))
    return {
        "sup_cls": g(sup, "rpn_cls") + g(sup, "roi_cls"),
        "sup_reg": g(sup, "rpn_reg") + g(sup, "roi_reg"),
        "sup_iou": g(sup, "iou_branch"),
        "unsup_cls": w["alpha"] * (g(unsup, "rpn_cls") + g(unsup, "roi_cls")),
        "unsup_reg": w["beta"] * (g(unsup, "rpn_reg") + g(unsup, "roi_reg")),
        "unsup_iou": w["gamma_iou"] * g(unsup, "iou_branch"),
    }


def loss_share_series(records: Iterable[dict]) -> ShareSeries:
    its, shares, skipped = [], [], []
    for rec in records:
        terms = weighted_terms(rec)
        total = sum(terms.values())
        if not (total > 0 and math.isfinite(total)):
            log.warning("record at iteration %s has zero total loss; skipped", rec.get("iteration"))
            skipped.append(rec.get("iteration"))
            continue
        its.append(rec["iteration"])
        shares.append({k: v / total for k, v in terms.items()})
    return ShareSeries(its, shares, skipped)


# ---------------------------------------------------------------------------
# report serialization


def write_report_jsonl(reports: Sequence[tuple[str, APReport]], path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for name, rep in reports:
            fh.write(json.dumps({"name": name, **rep.to_dict()}) + "\n")


def format_report_table(reports: Sequence[tuple[str, APReport]]) -> str:
    width = max([len("run")] + [len(n) for n, _ in reports])
    lines = [f"{'run':<{width}}  {'AP':>7}  {'AP50':>7}  {'AP75':>7}"]
    for name, r in reports:
        lines.append(f"{name:<{width}}  {100 * r.mAP:7.3f}  {100 * r.AP50:7.3f}  {100 * r.AP75:7.3f}")
    return "\n".join(lines) + "\n"
