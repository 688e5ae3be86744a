"""Burn-up and Teacher-Student mutual learning.

The Teacher is a copy of the post-burn-up Student and is only ever moved by
:func:`ema_update`. Pseudo-labels come from the Teacher on weakly augmented
unlabeled images; the Student consumes them on strong views of the same images.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .eval_analysis import APReport, evaluate_ap, pseudo_quality_histogram
from .geometry import BBox
from .losses import (
    TERMS,
    LossBreakdown,
    LossWeights,
    NonFiniteLossError,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from .model import BranchInputMask, Detector, ModelConfig
from .synthdata import DatasetSplit, Scene, StrongAugConfig, strong_augment, weak_augment

log = logging.getLogger(__name__)


@dataclass
class HyperConfig:
    u: float = 0.5
    mu: float = 0.75
    theta: float = 0.4
    delta: float = 0.7
    weights: LossWeights = field(default_factory=LossWeights)
    ema_momentum: float = 0.9996
    total_iters: int = 6000
    # None: one sixth of total_iters
    burn_up_iters: Optional[int] = None
    lr: float = 0.0075
    weight_decay: float = 0.0001
    momentum: float = 0.9
    # None: the two final-iteration decays scaled from 180k iterations
    lr_steps: Optional[tuple[int, ...]] = None
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    branch_enabled: bool = True
    branch_mask: BranchInputMask = field(default_factory=BranchInputMask)
    filter_enabled: bool = True
    # apply the IoU filter when benchmarking the final model
    eval_iou_filter: bool = False
    eval_score_threshold: float = 0.05
    nms_threshold: float = 0.5
    log_interval: int = 100
    eval_interval: int = 1000
    quality_interval: int = 1000
    quality_scenes: int = 100
    seed: int = 0
    strong_aug: StrongAugConfig = field(default_factory=StrongAugConfig)

    def __post_init__(self):
        if self.burn_up_iters is None:
            self.burn_up_iters = self.total_iters // 6
        if self.lr_steps is None:
            self.lr_steps = tuple(int(self.total_iters * f) for f in (179990 / 180000, 179995 / 180000))
        self.lr_steps = tuple(self.lr_steps)
        self.validate()

    def validate(self):
        for name in ("u", "mu", "theta", "delta", "ema_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.u <= self.mu < 1.0:
            raise ValueError("need 0 < u <= mu < 1")
        if not 0 <= self.burn_up_iters <= self.total_iters:
            raise ValueError("need 0 <= burn_up_iters <= total_iters")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ValueError("invalid batch sizes")


@dataclass(frozen=True)
class PseudoLabel:
    box: BBox
    class_id: int
    confidence: float
    q_iou: Optional[float]
    source_iteration: int


@dataclass
class PseudoLabelStats:
    raw: int = 0
    after_iou_filter: int = 0
    kept: int = 0


@dataclass
class TrainingArtifacts:
    student: Detector
    teacher: Detector
    records: list[dict]
    quality: list[dict]
    final_report: Optional[APReport]


class JsonlSink:
    """Writes ``metrics.jsonl`` and ``quality.jsonl`` under a directory."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._files = {kind: open(self.directory / f"{kind}.jsonl", "w", encoding="utf-8")
                       for kind in ("metrics", "quality")}

    def __call__(self, kind: str, record: dict):
        fh = self._files[kind]
        fh.write(json.dumps(record, sort_keys=False) + "\n")
        fh.flush()

    def close(self):
        for fh in self._files.values():
            fh.close()


# ---------------------------------------------------------------------------
# building blocks


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, m: float) -> torch.nn.Module:
    """``theta_T <- m * theta_T + (1 - m) * theta_S`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student have different parameter names")
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pt.shape)} vs {tuple(ps.shape)}")
        pt.mul_(m).add_(ps.detach().to(pt.dtype), alpha=1.0 - m)
    return teacher


def make_teacher(student: Detector) -> Detector:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def generate_pseudo_labels(
    teacher: Detector,
    images,
    cfg: HyperConfig,
    iteration: int = 0,
) -> tuple[list[list[PseudoLabel]], PseudoLabelStats]:
    """Teacher predictions -> per-class NMS -> IoU-score filter -> confidence filter."""
    preds = teacher.predict_batch(images, score_threshold=0.0, nms_threshold=cfg.nms_threshold)
    stats = PseudoLabelStats()
    use_iou = cfg.filter_enabled and teacher.iou_branch is not None
    out = []
    for dets in preds:
        stats.raw += len(dets)
        if use_iou:
            dets = [d for d in dets if d.q_iou >= cfg.theta]
        stats.after_iou_filter += len(dets)
        dets = [d for d in dets if d.score >= cfg.delta]
        stats.kept += len(dets)
        out.append([PseudoLabel(d.box, d.class_id, d.score, d.q_iou, iteration) for d in dets])
    return out, stats


def _targets(objects: Sequence[tuple[BBox, int]]) -> tuple[torch.Tensor, torch.Tensor]:
    boxes = torch.tensor([b.as_tuple() for b, _ in objects], dtype=torch.float32).reshape(-1, 4)
    classes = torch.tensor([c for _, c in objects], dtype=torch.long)
    return boxes, classes


def labeled_batch(scenes: Sequence[Scene], rng: np.random.Generator):
    """Weakly augmented images ``(B, H, W, 3)`` and per-image targets."""
    views = [weak_augment(s, rng) for s in scenes]
    images = np.stack([v.image for v in views])
    return images, [_targets(v.objects) for v in views]


def _sgd_step(optimizer, total: torch.Tensor):
    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    optimizer.step()


def make_optimizer(student: Detector, cfg: HyperConfig) -> torch.optim.SGD:
    return torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def train_step_burn_up(
    student: Detector,
    optimizer: torch.optim.Optimizer,
    batch,
    cfg: HyperConfig,
    iteration: int = 0,
) -> LossBreakdown:
    images, targets = batch
    outs = student.forward_train(images, [t[0] for t in targets])
    sup = supervised_loss(outs, targets, cfg.weights, cfg.u, cfg.mu)
    total, _ = total_loss(sup, None, cfg.weights, iteration)
    _sgd_step(optimizer, total)
    return sup


def train_step_mutual(
    student: Detector,
    teacher: Detector,
    optimizer: torch.optim.Optimizer,
    batch,
    unlabeled: Sequence[Scene],
    cfg: HyperConfig,
    rng: np.random.Generator,
    iteration: int = 0,
) -> tuple[LossBreakdown, LossBreakdown, PseudoLabelStats]:
    images, targets = batch
    weak = [weak_augment(s, rng) for s in unlabeled]
    pseudo, stats = generate_pseudo_labels(teacher, np.stack([w.image for w in weak]), cfg, iteration)
    strong = [(w.scene_id, strong_augment(w.image, rng, cfg.strong_aug)) for w in weak]
    if [sid for sid, _ in strong] != [w.scene_id for w in weak]:
        raise AssertionError("weak/strong views are not paired")
    pl_targets = [_targets([(p.box, p.class_id) for p in pls]) for pls in pseudo]

    nl = len(images)
    all_images = np.concatenate([images, np.stack([img for _, img in strong])])
    outs = student.forward_train(all_images, [t[0] for t in targets] + [t[0] for t in pl_targets])
    sup = supervised_loss(outs[:nl], targets, cfg.weights, cfg.u, cfg.mu)
    unsup = unsupervised_loss(outs[nl:], pl_targets, cfg.weights, cfg.u, cfg.mu)
    total, _ = total_loss(sup, unsup, cfg.weights, iteration)
    _sgd_step(optimizer, total)
    ema_update(teacher, student, cfg.ema_momentum)
    if any(p.grad is not None for p in teacher.parameters()):
        raise AssertionError("teacher received gradients")
    return sup, unsup, stats


# ---------------------------------------------------------------------------
# evaluation hooks


def evaluate_model(model: Detector, scenes: Sequence[Scene], cfg: HyperConfig,
                   batch_size: int = 50) -> APReport:
    dets = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        preds = model.predict_batch(np.stack([s.image for s in chunk]),
                                    cfg.eval_score_threshold, cfg.nms_threshold)
        if cfg.eval_iou_filter and model.iou_branch is not None:
            preds = [[d for d in p if d.q_iou >= cfg.theta] for p in preds]
        dets.extend(preds)
    return evaluate_ap(dets, [s.objects for s in scenes], num_classes=model.config.num_classes)


def quality_snapshot(teacher: Detector, scenes: Sequence[Scene], cfg: HyperConfig,
                     iteration: int, batch_size: int = 50) -> dict:
    """IoU histogram of the Teacher's filtered pseudo-labels.

    Reads hidden ground truth through ``Scene.reveal``; analysis only.
    """
    pseudo, stats = [], PseudoLabelStats()
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        p, s = generate_pseudo_labels(teacher, np.stack([sc.image for sc in chunk]), cfg, iteration)
        pseudo.extend(p)
        stats.raw += s.raw
        stats.after_iou_filter += s.after_iou_filter
        stats.kept += s.kept
    hist = pseudo_quality_histogram(pseudo, [sc.reveal() for sc in scenes], iteration=iteration)
    return {"iteration": iteration, "pseudo_raw": stats.raw,
            "pseudo_after_iou_filter": stats.after_iou_filter, "pseudo_labels": stats.kept,
            "histogram": hist.to_dict()}


# ---------------------------------------------------------------------------
# the loop


def build_student(model_config: ModelConfig, cfg: HyperConfig) -> Detector:
    from dataclasses import replace
    mc = replace(model_config, branch_enabled=cfg.branch_enabled, branch_mask=cfg.branch_mask,
                 init_seed=cfg.seed)
    return Detector(mc)


def _lr_at(cfg: HyperConfig, it: int) -> float:
    return cfg.lr * (0.1 ** sum(it >= s for s in cfg.lr_steps))


def _mean_terms(acc: list[LossBreakdown]) -> dict[str, float]:
    if not acc:
        return {t: 0.0 for t in TERMS}
    return {t: float(np.mean([float(getattr(b, t).detach()) for b in acc])) for t in TERMS}


def run_training(
    cfg: HyperConfig,
    data: DatasetSplit,
    sink: Optional[Callable[[str, dict], None]] = None,
    eval_scenes: Optional[Sequence[Scene]] = None,
    model_config: Optional[ModelConfig] = None,
    on_checkpoint: Optional[Callable[[int, Detector, Optional[Detector]], None]] = None,
) -> TrainingArtifacts:
    torch.manual_seed(cfg.seed)
    model_config = model_config or ModelConfig()
    student = build_student(model_config, cfg)
    teacher: Optional[Detector] = None
    optimizer = make_optimizer(student, cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    sink = sink or (lambda kind, rec: None)
    records: list[dict] = []
    quality: list[dict] = []
    last_ap: Optional[dict] = None
    final_report: Optional[APReport] = None
    quality_set = list(data.unlabeled[: cfg.quality_scenes])

    sup_acc: list[LossBreakdown] = []
    unsup_acc: list[LossBreakdown] = []
    pl_acc = PseudoLabelStats()

    for it in range(cfg.total_iters):
        lr = _lr_at(cfg, it)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if it == cfg.burn_up_iters:
            teacher = make_teacher(student)
        lab_idx = rng.integers(len(data.labeled), size=cfg.batch_labeled)
        batch = labeled_batch([data.labeled[i] for i in lab_idx], rng)
        try:
            if teacher is None or not data.unlabeled or cfg.batch_unlabeled == 0:
                sup = train_step_burn_up(student, optimizer, batch, cfg, it)
                sup_acc.append(sup)
                if teacher is not None:
                    ema_update(teacher, student, cfg.ema_momentum)
            else:
                un_idx = rng.integers(len(data.unlabeled), size=cfg.batch_unlabeled)
                sup, unsup, stats = train_step_mutual(
                    student, teacher, optimizer, batch, [data.unlabeled[i] for i in un_idx],
                    cfg, rng, it)
                sup_acc.append(sup)
                unsup_acc.append(unsup)
                pl_acc.raw += stats.raw
                pl_acc.after_iou_filter += stats.after_iou_filter
                pl_acc.kept += stats.kept
        except NonFiniteLossError as exc:
            exc.iteration = it
            raise NonFiniteLossError(exc.term, exc.value, it) from exc

        done = it + 1
        evaluator = teacher if teacher is not None else student
        if eval_scenes and (done % cfg.eval_interval == 0 or done == cfg.total_iters):
            rep = evaluate_model(evaluator, eval_scenes, cfg)
            last_ap = rep.to_dict()
            if done == cfg.total_iters:
                final_report = rep
        if teacher is not None and quality_set and done % cfg.quality_interval == 0:
            q = quality_snapshot(teacher, quality_set, cfg, done)
            quality.append(q)
            sink("quality", q)
        if on_checkpoint is not None and done % cfg.eval_interval == 0:
            on_checkpoint(done, student, teacher)
        if done % cfg.log_interval == 0 or done == cfg.total_iters:
            sup_m, unsup_m = _mean_terms(sup_acc), _mean_terms(unsup_acc)
            w = cfg.weights
            sup_total = sum(sup_m.values())
            unsup_total = (w.alpha * (unsup_m["rpn_cls"] + unsup_m["roi_cls"])
                           + w.beta * (unsup_m["rpn_reg"] + unsup_m["roi_reg"])
                           + w.gamma_iou * unsup_m["iou_branch"])
            n_mut = max(len(unsup_acc), 1)
            rec = {
                "iteration": done,
                "stage": "burn_up" if teacher is None else "mutual",
                "lr": lr,
                "weights": {"alpha": w.alpha, "beta": w.beta, "gamma_iou": w.gamma_iou},
                "sup": sup_m,
                "unsup": unsup_m,
                "sup_total": sup_total,
                "unsup_total": unsup_total,
                "total": sup_total + unsup_total,
                "pseudo_labels": pl_acc.kept / n_mut,
                "pseudo_raw": pl_acc.raw / n_mut,
                "pseudo_after_iou_filter": pl_acc.after_iou_filter / n_mut,
                "ap": last_ap,
            }
            if not math.isfinite(rec["total"]):
                raise NonFiniteLossError("total", rec["total"], done)
            records.append(rec)
            sink("metrics", rec)
            sup_acc, unsup_acc, pl_acc = [], [], PseudoLabelStats()

    if teacher is None:
        teacher = make_teacher(student)
    return TrainingArtifacts(student, teacher, records, quality, final_report)
