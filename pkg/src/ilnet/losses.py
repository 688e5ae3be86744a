"""Focal loss, IoU-branch target assignment and the supervised / unsupervised
loss assembly.

    L        = L_sup + L_unsup
    L_sup    = (rpn_cls + roi_cls) + (rpn_reg + roi_reg) + iou_branch
    L_unsup  = alpha * (rpn_cls + roi_cls) + beta * (rpn_reg + roi_reg)
               + gamma_iou * iou_branch
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .geometry import MatchResult, decode_tensor, encode_tensor, pairwise_iou

Q_CLAMP = 1e-7
SMOOTH_L1_BETA = 1.0
RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3

TERMS = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "iou_branch")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, iteration: Optional[int] = None):
        self.term, self.value, self.iteration = term, value, iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite loss term {term}={value}{where}")


@dataclass
class LossWeights:
    alpha: float = 4.0
    beta: float = 1.0
    gamma_iou: float = 1.0
    gamma_focal: float = 1.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossBreakdown:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor
    iou_branch: torch.Tensor
    stream: str = "supervised"

    @classmethod
    def zeros(cls, stream: str, like: Optional[torch.Tensor] = None) -> "LossBreakdown":
        z = torch.zeros((), dtype=torch.float32 if like is None else like.dtype)
        return cls(z, z, z, z, z, stream)

    def terms(self) -> dict[str, torch.Tensor]:
        return {t: getattr(self, t) for t in TERMS}

    def as_floats(self) -> dict[str, float]:
        return {t: float(v.detach()) for t, v in self.terms().items()}

    @property
    def cls(self) -> torch.Tensor:
        return self.rpn_cls + self.roi_cls

    @property
    def reg(self) -> torch.Tensor:
        return self.rpn_reg + self.roi_reg

    def weighted(self, weights: LossWeights) -> dict[str, torch.Tensor]:
        """Per-group contributions ``cls``, ``reg``, ``iou`` to the total."""
        if self.stream == "supervised":
            return {"cls": self.cls, "reg": self.reg, "iou": self.iou_branch}
        return {
            "cls": weights.alpha * self.cls,
            "reg": weights.beta * self.reg,
            "iou": weights.gamma_iou * self.iou_branch,
        }

    def total(self, weights: LossWeights) -> torch.Tensor:
        w = self.weighted(weights)
        return w["cls"] + w["reg"] + w["iou"]

    def check_finite(self, iteration: Optional[int] = None):
        for name, v in self.as_floats().items():
            if not math.isfinite(v):
                raise NonFiniteLossError(f"{self.stream}.{name}", v, iteration)


@dataclass(frozen=True)
class BranchTarget:
    proposal_index: int
    t: int
    class_id: Optional[int]
    included: bool


def focal_loss(q: float, t: int, gamma_focal: float) -> float:
    """Binary focal loss ``-(1 - p_t)^gamma * log(p_t)``, no alpha prefactor."""
    q = min(max(q, Q_CLAMP), 1.0 - Q_CLAMP)
    p_t = q if t == 1 else 1.0 - q
    return -((1.0 - p_t) ** gamma_focal) * math.log(p_t)


def focal_loss_tensor(q: torch.Tensor, t: torch.Tensor, gamma_focal: float) -> torch.Tensor:
    """Elementwise tensor form of :func:`focal_loss`."""
    q = q.clamp(Q_CLAMP, 1.0 - Q_CLAMP)
    p_t = torch.where(t > 0.5, q, 1.0 - q)
    return -((1.0 - p_t) ** gamma_focal) * torch.log(p_t)


def assign_branch_targets(
    matches: Sequence[MatchResult],
    u: float = 0.5,
    mu: float = 0.75,
    gt_classes: Optional[Sequence[int]] = None,
) -> list[BranchTarget]:
    """Targets for the IoU branch: foreground only, ``t = 1`` iff IoU > mu."""
    if not 0.0 < u <= mu < 1.0:
        raise ValueError(f"need 0 < u <= mu < 1, got u={u}, mu={mu}")
    out = []
    for m in matches:
        included = m.gt_index is not None and m.max_iou >= u
        cls = None
        if included and gt_classes is not None:
            cls = int(gt_classes[m.gt_index])
        out.append(BranchTarget(m.proposal_index, int(included and m.max_iou > mu), cls, included))
    return out


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def _match(boxes: torch.Tensor, gt_boxes: torch.Tensor):
    if len(gt_boxes) == 0:
        return boxes.new_zeros(len(boxes)), torch.zeros(len(boxes), dtype=torch.long), None
    ious = pairwise_iou(boxes.detach(), gt_boxes)
    max_iou, gt_idx = ious.max(dim=1)
    return max_iou, gt_idx, ious


def _image_terms(out, gt_boxes: torch.Tensor, gt_classes: torch.Tensor, u: float, mu: float,
                 gamma_focal: float):
    """Unnormalized sums and counts for one image."""
    dtype = out.obj_logits.dtype
    gt_boxes = gt_boxes.to(dtype)
    k = out.cls_logits.shape[1] - 1

    # proposal stage: IoU >= 0.7 (or best anchor per gt) positive, < 0.3 negative
    a_iou, a_gt, ious = _match(out.anchors, gt_boxes)
    labels = torch.full_like(a_iou, -1.0)
    labels[a_iou < RPN_NEG_IOU] = 0.0
    if ious is not None:
        best = ious.max(dim=0).values
        is_best = ((ious == best[None, :]) & (best[None, :] > 0)).any(dim=1)
        labels[is_best] = 1.0
    labels[a_iou >= RPN_POS_IOU] = 1.0
    valid = labels >= 0
    rpn_cls_sum = F.binary_cross_entropy_with_logits(
        out.obj_logits[valid], labels[valid], reduction="sum")
    pos = labels == 1
    if pos.any():
        w = out.anchor_deltas.new_tensor(out.rpn_reg_weights)
        tgt = encode_tensor(out.anchors[pos], gt_boxes[a_gt[pos]]) * w
        rpn_reg_sum = smooth_l1(out.anchor_deltas[pos] - tgt).sum()
    else:
        rpn_reg_sum = out.anchor_deltas.sum() * 0.0

    # RoI stage
    r_iou, r_gt, _ = _match(out.rois, gt_boxes)
    fg = r_iou >= u
    cls_target = torch.full((len(out.rois),), k, dtype=torch.long)
    cls_target[fg] = gt_classes[r_gt[fg]].long()
    roi_cls_sum = F.cross_entropy(out.cls_logits, cls_target, reduction="sum")
    zero = out.cls_logits.sum() * 0.0
    roi_reg_sum, iou_sum = zero, zero
    if fg.any():
        fg_idx = torch.nonzero(fg).flatten()
        fg_cls = cls_target[fg_idx]
        w = out.roi_deltas.new_tensor(out.roi_reg_weights)
        tgt = encode_tensor(out.rois[fg_idx], gt_boxes[r_gt[fg_idx]]) * w
        roi_reg_sum = smooth_l1(out.roi_deltas[fg_idx, fg_cls] - tgt).sum()
        if out.q is not None:
            # quality target: IoU of the regressed box (not the proposal) with its gt
            with torch.no_grad():
                pred = decode_tensor(out.rois[fg_idx], out.roi_deltas[fg_idx, fg_cls] / w)
                pred_iou = pairwise_iou(pred, gt_boxes)[torch.arange(len(fg_idx)), r_gt[fg_idx]]
            t = (pred_iou > mu).to(dtype)
            iou_sum = focal_loss_tensor(out.q[fg_idx, fg_cls], t, gamma_focal).sum()
    counts = {
        "anchors": int(valid.sum()), "rpn_pos": int(pos.sum()),
        "rois": len(out.rois), "fg": int(fg.sum()),
    }
    return (rpn_cls_sum, rpn_reg_sum, roi_cls_sum, roi_reg_sum, iou_sum), counts


def detection_losses(
    outputs: Sequence,
    targets: Sequence[tuple[torch.Tensor, torch.Tensor]],
    gamma_focal: float = 1.5,
    u: float = 0.5,
    mu: float = 0.75,
    stream: str = "supervised",
) -> LossBreakdown:
    """The five unit-weighted terms over a batch.

    Normalization: ``rpn_cls`` by labeled anchors, ``rpn_reg`` by positive
    anchors, ``roi_cls`` by RoIs, ``roi_reg`` and ``iou_branch`` by foreground
    RoIs, each pooled over the batch.
    """
    if not outputs:
        return LossBreakdown.zeros(stream)
    sums = [0.0] * 5
    counts = {"anchors": 0, "rpn_pos": 0, "rois": 0, "fg": 0}
    for out, (boxes, classes) in zip(outputs, targets):
        parts, c = _image_terms(out, torch.as_tensor(boxes).reshape(-1, 4),
                                torch.as_tensor(classes).reshape(-1), u, mu, gamma_focal)
        sums = [s + p for s, p in zip(sums, parts)]
        for key in counts:
            counts[key] += c[key]
    rpn_cls, rpn_reg, roi_cls, roi_reg, iou_b = sums
    return LossBreakdown(
        rpn_cls / max(counts["anchors"], 1),
        rpn_reg / max(counts["rpn_pos"], 1),
        roi_cls / max(counts["rois"], 1),
        roi_reg / max(counts["fg"], 1),
        iou_b / max(counts["fg"], 1),
        stream,
    )


def supervised_loss(outputs, ground_truth, weights: LossWeights, u: float = 0.5,
                    mu: float = 0.75) -> LossBreakdown:
    return detection_losses(outputs, ground_truth, weights.gamma_focal, u, mu, "supervised")


def unsupervised_loss(outputs, pseudo_labels, weights: LossWeights, u: float = 0.5,
                      mu: float = 0.75) -> LossBreakdown:
    """Same five terms against pseudo boxes; images without any are skipped.

    ``LossBreakdown.total(weights)`` applies alpha / beta / gamma_iou.
    """
    kept = [(o, p) for o, p in zip(outputs, pseudo_labels) if len(p[0]) > 0]
    if not kept:
        like = outputs[0].cls_logits if outputs else None
        return LossBreakdown.zeros("unsupervised", like)
    outs, pls = zip(*kept)
    return detection_losses(outs, pls, weights.gamma_focal, u, mu, "unsupervised")


def total_loss(
    sup: LossBreakdown,
    unsup: Optional[LossBreakdown],
    weights: LossWeights,
    iteration: Optional[int] = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Scalar training loss plus each weighted term's share of it.

    Share keys are ``sup_cls``, ``sup_reg``, ``sup_iou``, ``unsup_cls``,
    ``unsup_reg``, ``unsup_iou``; all zero when the total is zero.
    """
    sup.check_finite(iteration)
    parts = {f"sup_{k}": v for k, v in sup.weighted(weights).items()}
    total = sup.total(weights)
    if unsup is not None:
        unsup.check_finite(iteration)
        parts.update({f"unsup_{k}": v for k, v in unsup.weighted(weights).items()})
        total = total + unsup.total(weights)
    else:
        parts.update({f"unsup_{k}": torch.zeros(()) for k in ("cls", "reg", "iou")})
    t = float(total.detach())
    if not math.isfinite(t):
        raise NonFiniteLossError("total", t, iteration)
    shares = {k: (float(v.detach()) / t if t > 0 else 0.0) for k, v in parts.items()}
    return total, shares
