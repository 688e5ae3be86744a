"""Axis-aligned box algebra: IoU, the two-stage delta codec, greedy NMS and
ground-truth matching.

Boxes use the corner convention ``(x1, y1, x2, y2)`` with continuous areas
(width is ``x2 - x1``, no "+1" pixel convention).

Scalar functions operate on the dataclasses below. The ``*_tensor`` / array
helpers are the batched equivalents used inside the detector; they follow the
same conventions and are tested against the scalar versions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

# exp() argument cap used by the batched decoder to keep training finite;
# log(1000 / 16) as in the usual two-stage implementations.
DELTA_CLAMP = math.log(1000.0 / 16)


class InvalidBoxError(ValueError):
    pass


class DeltaOverflowError(OverflowError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def flip_horizontal(self, image_width: float) -> "BBox":
        return BBox(image_width - self.x2, self.y1, image_width - self.x1, self.y2)


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    score: float
    class_id: int
    # IoU-branch score at this box's class channel, when the model has a branch.
    q_iou: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class DeltaVec:
    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


@dataclass(frozen=True)
class MatchResult:
    proposal_index: int
    max_iou: float
    gt_index: Optional[int]
    is_foreground: bool


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def encode_deltas(proposal: BBox, target: BBox) -> DeltaVec:
    px, py = proposal.center
    tx, ty = target.center
    return DeltaVec(
        (tx - px) / proposal.width,
        (ty - py) / proposal.height,
        math.log(target.width / proposal.width),
        math.log(target.height / proposal.height),
    )


def decode_deltas(
    proposal: BBox,
    deltas: DeltaVec,
    bounds: Optional[tuple[float, float]] = None,
) -> BBox:
    """Inverse of :func:`encode_deltas`.

    ``bounds`` is ``(width, height)`` of the image; when given, the decoded box
    is clipped to ``[0, width] x [0, height]``.
    """
    if not all(math.isfinite(v) for v in deltas.as_tuple()):
        raise DeltaOverflowError(f"non-finite deltas {deltas}")
    try:
        w = proposal.width * math.exp(deltas.tw)
        h = proposal.height * math.exp(deltas.th)
    except OverflowError as exc:
        raise DeltaOverflowError(f"exp overflow decoding {deltas}") from exc
    if not (math.isfinite(w) and math.isfinite(h)):
        raise DeltaOverflowError(f"exp overflow decoding {deltas}")
    px, py = proposal.center
    cx = px + deltas.tx * proposal.width
    cy = py + deltas.ty * proposal.height
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    if bounds is not None:
        bw, bh = bounds
        x1, x2 = min(max(x1, 0.0), bw), min(max(x2, 0.0), bw)
        y1, y2 = min(max(y1, 0.0), bh), min(max(y2, 0.0), bh)
    return BBox(x1, y1, x2, y2)


def nms(dets: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Class-wise greedy NMS.

    Output is sorted by score descending; equal scores keep input order.
    A box is suppressed when its IoU with a kept box of the same class is
    strictly greater than ``iou_threshold``.
    """
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    keep = nms_indices(boxes, scores, iou_threshold, classes)
    return [dets[i] for i in keep]


def pairwise_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``(N, 4)`` and ``(M, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    classes: Optional[np.ndarray] = None,
) -> list[int]:
    """Greedy NMS over arrays; returns kept indices in score-descending order."""
    n = len(scores)
    if n == 0:
        return []
    boxes = np.asarray(boxes, dtype=np.float64)
    if classes is None:
        classes = np.zeros(n, dtype=np.int64)
    # stable sort on -score: ties resolved by lower original index
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ious = pairwise_iou_np(boxes, boxes)
    same_class = classes[:, None] == classes[None, :]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= same_class[i] & (ious[i] > iou_threshold)
    return keep


def match_to_gt(
    proposals: Sequence[BBox],
    gts: Sequence[tuple[BBox, int]],
    u: float,
) -> list[MatchResult]:
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    results = []
    for i, p in enumerate(proposals):
        if not gts:
            results.append(MatchResult(i, 0.0, None, False))
            continue
        overlaps = [iou(p, g) for g, _ in gts]
        # first maximum wins on ties
        j = max(range(len(overlaps)), key=lambda k: (overlaps[k], -k))
        results.append(MatchResult(i, overlaps[j], j, overlaps[j] >= u))
    return results


# ---------------------------------------------------------------------------
# batched torch equivalents used by the detector


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(inter > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_tensor(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack(
        [(tx - px) / pw, (ty - py) / ph, torch.log(tw / pw), torch.log(th / ph)], dim=1
    )


def decode_tensor(
    proposals: torch.Tensor,
    deltas: torch.Tensor,
    bounds: Optional[tuple[float, float]] = None,
) -> torch.Tensor:
    """Decode ``(..., 4)`` deltas against ``(N, 4)`` proposals.

    ``deltas`` may carry an extra class axis: shape ``(N, 4)`` or ``(N, C, 4)``.
    Log-size deltas are clamped at :data:`DELTA_CLAMP`.
    """
    squeeze = deltas.dim() == 2
    if squeeze:
        deltas = deltas[:, None, :]
    pw = (proposals[:, 2] - proposals[:, 0])[:, None]
    ph = (proposals[:, 3] - proposals[:, 1])[:, None]
    px = proposals[:, 0][:, None] + 0.5 * pw
    py = proposals[:, 1][:, None] + 0.5 * ph
    dw = deltas[..., 2].clamp(max=DELTA_CLAMP)
    dh = deltas[..., 3].clamp(max=DELTA_CLAMP)
    cx = px + deltas[..., 0] * pw
    cy = py + deltas[..., 1] * ph
    w = pw * torch.exp(dw)
    h = ph * torch.exp(dh)
    out = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)
    if bounds is not None:
        bw, bh = bounds
        out = torch.stack(
            [
                out[..., 0].clamp(0, bw),
                out[..., 1].clamp(0, bh),
                out[..., 2].clamp(0, bw),
                out[..., 3].clamp(0, bh),
            ],
            dim=-1,
        )
    return out[:, 0] if squeeze else out
