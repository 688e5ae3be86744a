"""Toy two-stage detector with an IoU-classification branch.

Topology: a three-block conv trunk, an anchor-based proposal stage on the
stride-8 map, crop-and-resize pooling (7x7) of the stride-4 map, two shared
fully-connected layers producing ``x_sh``, a softmax class head, a
class-specific regression head and the IoU branch
``q = sigmoid(fc2(elu(fc1(concat(x_sh, s, d)))))``.

The class axis of ``s`` and ``q`` has ``K + 1`` entries with background last.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .geometry import BBox, DeltaVec, ScoredBox, decode_tensor, nms_indices

CHECKPOINT_FORMAT = "ilnet-checkpoint-1"


@dataclass(frozen=True)
class BranchInputMask:
    use_shared: bool = True
    use_scores: bool = True
    use_deltas: bool = False

    def __post_init__(self):
        if not (self.use_shared or self.use_scores or self.use_deltas):
            raise ValueError("branch input mask selects nothing")

    @classmethod
    def parse(cls, text: str) -> "BranchInputMask":
        """Parse ``"shared+scores"`` style strings."""
        parts = {p.strip() for p in text.replace(",", "+").split("+") if p.strip()}
        unknown = parts - {"shared", "scores", "deltas"}
        if unknown:
            raise ValueError(f"unknown branch inputs {sorted(unknown)}")
        return cls("shared" in parts, "scores" in parts, "deltas" in parts)

    def __str__(self) -> str:
        names = [n for n, on in (("shared", self.use_shared), ("scores", self.use_scores),
                                 ("deltas", self.use_deltas)) if on]
        return "+".join(names)

    def input_dim(self, feature_dim: int, num_classes: int) -> int:
        return (feature_dim * self.use_shared + (num_classes + 1) * self.use_scores
                + 4 * self.use_deltas)


@dataclass
class ModelConfig:
    image_size: int = 64
    num_classes: int = 3
    feature_dim: int = 128
    trunk_channels: tuple[int, int, int] = (16, 32, 32)
    anchor_stride: int = 8
    anchor_sizes: tuple[float, float, float] = (12.0, 20.0, 30.0)
    num_proposals: int = 64
    rpn_nms_threshold: float = 0.7
    pool_size: int = 7
    branch_enabled: bool = True
    branch_mask: BranchInputMask = field(default_factory=BranchInputMask)
    # 0 means "same as the branch input width"
    branch_hidden: int = 0
    # regression outputs live in delta space scaled by these weights
    rpn_reg_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    roi_reg_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)
    init_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_mask"] = str(self.branch_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["branch_mask"] = BranchInputMask.parse(d["branch_mask"])
        for key in ("trunk_channels", "anchor_sizes", "rpn_reg_weights", "roi_reg_weights"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Detection:
    box: BBox
    scores: np.ndarray
    deltas: np.ndarray  # (K, 4), one DeltaVec per class, unscaled
    shared_feature: np.ndarray
    iou_scores: Optional[np.ndarray]

    def delta_for(self, class_id: int) -> DeltaVec:
        return DeltaVec(*map(float, self.deltas[class_id]))


@dataclass
class ImageOutputs:
    """Raw training-mode outputs for one image, consumed by the losses."""

    anchors: torch.Tensor          # (A, 4)
    obj_logits: torch.Tensor       # (A,)
    anchor_deltas: torch.Tensor    # (A, 4) scaled by rpn_reg_weights
    rois: torch.Tensor             # (R, 4) detached proposals + target boxes
    cls_logits: torch.Tensor       # (R, K + 1)
    roi_deltas: torch.Tensor       # (R, K, 4) scaled by roi_reg_weights
    x_sh: torch.Tensor             # (R, F)
    q: Optional[torch.Tensor]      # (R, K + 1) or None without a branch
    rpn_reg_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    roi_reg_weights: tuple = (1.0, 1.0, 1.0, 1.0)


class IoUBranch(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, mask: BranchInputMask):
        super().__init__()
        self.mask = mask
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x_sh, s, d):
        return iou_branch_forward(x_sh, s, d, self.mask, self.fc1, self.fc2)


def iou_branch_forward(x_sh, s, d, mask: BranchInputMask, fc1: nn.Linear, fc2: nn.Linear):
    """Two FC layers with ELU between and a sigmoid at the end.

    Inputs switched off in ``mask`` are left out of the concatenation.
    """
    parts = []
    if mask.use_shared:
        parts.append(x_sh)
    if mask.use_scores:
        parts.append(s)
    if mask.use_deltas:
        parts.append(d)
    x = torch.cat(parts, dim=-1)
    if x.shape[-1] != fc1.in_features:
        raise ValueError(f"branch input has width {x.shape[-1]}, expected {fc1.in_features}")
    return torch.sigmoid(fc2(F.elu(fc1(x))))


def make_anchors(image_size: int, stride: int, sizes: Sequence[float]) -> torch.Tensor:
    """Square anchors centred on each stride cell; ordering (y, x, size)."""
    n = image_size // stride
    centers = (torch.arange(n, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(centers, centers, indexing="ij")
    half = torch.tensor(sizes, dtype=torch.float64) / 2
    cx = cx[..., None].expand(n, n, len(sizes))
    cy = cy[..., None].expand(n, n, len(sizes))
    boxes = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1)
    return boxes.reshape(-1, 4)


class Detector(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        c1, c2, c3 = cfg.trunk_channels
        self.conv1 = nn.Conv2d(3, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)
        a = len(cfg.anchor_sizes)
        self.rpn_conv = nn.Conv2d(c3, c3, 3, padding=1)
        self.rpn_obj = nn.Conv2d(c3, a, 1)
        self.rpn_reg = nn.Conv2d(c3, 4 * a, 1)
        k, fdim = cfg.num_classes, cfg.feature_dim
        self.fc6 = nn.Linear(c2 * cfg.pool_size ** 2, fdim)
        self.fc7 = nn.Linear(fdim, fdim)
        self.cls_head = nn.Linear(fdim, k + 1)
        self.reg_head = nn.Linear(fdim, 4 * k)
        if cfg.branch_enabled:
            in_dim = cfg.branch_mask.input_dim(fdim, k)
            hidden = cfg.branch_hidden or in_dim
            self.iou_branch = IoUBranch(in_dim, hidden, k + 1, cfg.branch_mask)
        else:
            self.iou_branch = None
        self.register_buffer(
            "anchors", make_anchors(cfg.image_size, cfg.anchor_stride, cfg.anchor_sizes).float(),
            persistent=False,
        )
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.config.init_seed)
        heads = {self.rpn_obj, self.rpn_reg, self.cls_head, self.reg_head}
        if self.iou_branch is not None:
            heads.add(self.iou_branch.fc2)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    scale = 1.0 if m in heads else 6.0
                    bound = math.sqrt(scale / fan_in)
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()

    # -- shared pieces ------------------------------------------------------

    def _trunk(self, images: torch.Tensor):
        x = images - 0.5
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        feat4 = F.max_pool2d(F.relu(self.conv2(x)), 2)
        feat8 = F.max_pool2d(F.relu(self.conv3(feat4)), 2)
        return feat4, feat8

    def _rpn(self, feat8: torch.Tensor):
        h = F.relu(self.rpn_conv(feat8))
        b = h.shape[0]
        a = len(self.config.anchor_sizes)
        # (B, A, H, W) -> (B, H, W, A) to match anchor ordering
        logits = self.rpn_obj(h).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.rpn_reg(h).reshape(b, a, 4, *h.shape[2:]).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return logits, deltas

    def _select_proposals(self, logits: torch.Tensor, deltas: torch.Tensor):
        """Decode, clip and class-agnostic NMS for one image (no grad)."""
        cfg = self.config
        w = deltas.new_tensor(cfg.rpn_reg_weights)
        anchors = self.anchors.to(deltas.dtype)
        boxes = decode_tensor(anchors, deltas / w, bounds=(cfg.image_size, cfg.image_size))
        scores = torch.sigmoid(logits)
        valid = ((boxes[:, 2] - boxes[:, 0]) > 1.0) & ((boxes[:, 3] - boxes[:, 1]) > 1.0)
        idx = torch.nonzero(valid).flatten()
        keep = nms_indices(boxes[idx].numpy(), scores[idx].numpy(), cfg.rpn_nms_threshold)
        keep = idx[torch.as_tensor(keep[: cfg.num_proposals], dtype=torch.long)]
        return boxes[keep], scores[keep], deltas[keep] / w

    def _roi_head(self, feat4: torch.Tensor, rois: list[torch.Tensor]):
        cfg = self.config
        batch_idx = torch.cat([torch.full((len(r), 1), i, dtype=feat4.dtype) for i, r in enumerate(rois)])
        boxes = torch.cat([r.to(feat4.dtype) for r in rois])
        pooled = roi_align(feat4, torch.cat([batch_idx, boxes], dim=1), cfg.pool_size,
                           spatial_scale=0.25, sampling_ratio=1, aligned=True)
        x = F.relu(self.fc6(pooled.flatten(1)))
        x_sh = F.relu(self.fc7(x))
        cls_logits = self.cls_head(x_sh)
        roi_deltas = self.reg_head(x_sh).reshape(-1, cfg.num_classes, 4)
        q = None
        if self.iou_branch is not None:
            s = torch.softmax(cls_logits, dim=-1)
            # deltas at the predicted foreground class
            pred = s[:, :-1].argmax(dim=1)
            d = roi_deltas[torch.arange(len(pred)), pred]
            q = self.iou_branch(x_sh, s, d)
        return cls_logits, roi_deltas, x_sh, q

    @staticmethod
    def _as_batch(images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            return images if images.dim() == 4 else images[None]
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()

    def _check_size(self, images: torch.Tensor):
        s = self.config.image_size
        if images.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} images, got {tuple(images.shape[-2:])}")

    # -- training path ------------------------------------------------------

    def forward_train(
        self,
        images,
        target_boxes: Sequence[torch.Tensor],
        proposals: Optional[Sequence[torch.Tensor]] = None,
    ) -> list[ImageOutputs]:
        """Forward pass for loss computation.

        RoIs are the detached proposals plus ``target_boxes`` (ground truth or
        pseudo boxes). Passing ``proposals`` freezes the RoI set, which makes
        the loss a smooth function of the parameters (used by gradient checks).
        """
        cfg = self.config
        x = self._as_batch(images).to(self.fc6.weight.dtype)
        self._check_size(x)
        feat4, feat8 = self._trunk(x)
        logits, deltas = self._rpn(feat8)
        if proposals is None:
            with torch.no_grad():
                proposals = [self._select_proposals(logits[i].detach(), deltas[i].detach())[0]
                             for i in range(len(x))]
        rois = []
        for p, t in zip(proposals, target_boxes):
            t = torch.as_tensor(t, dtype=x.dtype).reshape(-1, 4)
            rois.append(torch.cat([p.to(x.dtype).detach(), t]))
        cls_logits, roi_deltas, x_sh, q = self._roi_head(feat4, rois)
        out, start = [], 0
        anchors = self.anchors.to(x.dtype)
        for i, r in enumerate(rois):
            sl = slice(start, start + len(r))
            start += len(r)
            out.append(ImageOutputs(
                anchors=anchors, obj_logits=logits[i], anchor_deltas=deltas[i], rois=r,
                cls_logits=cls_logits[sl], roi_deltas=roi_deltas[sl], x_sh=x_sh[sl],
                q=None if q is None else q[sl],
                rpn_reg_weights=cfg.rpn_reg_weights, roi_reg_weights=cfg.roi_reg_weights,
            ))
        return out

    def proposals_for(self, images) -> list[torch.Tensor]:
        x = self._as_batch(images).to(self.fc6.weight.dtype)
        self._check_size(x)
        with torch.no_grad():
            _, feat8 = self._trunk(x)
            logits, deltas = self._rpn(feat8)
            return [self._select_proposals(logits[i], deltas[i])[0] for i in range(len(x))]

    # -- inference path -----------------------------------------------------

    @torch.no_grad()
    def forward_proposals(self, image) -> list[tuple[BBox, float, DeltaVec]]:
        x = self._as_batch(image).to(self.fc6.weight.dtype)
        self._check_size(x)
        _, feat8 = self._trunk(x)
        logits, deltas = self._rpn(feat8)
        boxes, scores, ds = self._select_proposals(logits[0], deltas[0])
        return [(BBox(*map(float, b)), float(s), DeltaVec(*map(float, d)))
                for b, s, d in zip(boxes, scores, ds)]

    @torch.no_grad()
    def forward_roi(self, image, proposals: Sequence[BBox]) -> list[Detection]:
        x = self._as_batch(image).to(self.fc6.weight.dtype)
        self._check_size(x)
        if not proposals:
            return []
        feat4, _ = self._trunk(x)
        rois = torch.tensor([p.as_tuple() for p in proposals], dtype=x.dtype)
        cls_logits, roi_deltas, x_sh, q = self._roi_head(feat4, [rois])
        s = torch.softmax(cls_logits, dim=-1)
        d = roi_deltas / roi_deltas.new_tensor(self.config.roi_reg_weights)
        return [
            Detection(p, s[i].numpy().astype(np.float64), d[i].numpy().astype(np.float64),
                      x_sh[i].numpy().astype(np.float64),
                      None if q is None else q[i].numpy().astype(np.float64))
            for i, p in enumerate(proposals)
        ]

    @torch.no_grad()
    def predict_batch(
        self,
        images,
        score_threshold: float = 0.05,
        nms_threshold: float = 0.5,
        max_detections: int = 100,
    ) -> list[list[ScoredBox]]:
        """Proposals -> RoI head -> per-class decode -> threshold -> per-class NMS.

        Candidates with score strictly above ``score_threshold`` survive.
        """
        if not 0.0 <= score_threshold <= 1.0 or not 0.0 <= nms_threshold <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        cfg = self.config
        x = self._as_batch(images).to(self.fc6.weight.dtype)
        self._check_size(x)
        feat4, feat8 = self._trunk(x)
        logits, deltas = self._rpn(feat8)
        props = [self._select_proposals(logits[i], deltas[i])[0] for i in range(len(x))]
        results: list[list[ScoredBox]] = [[] for _ in range(len(x))]
        if sum(len(p) for p in props) == 0:
            return results
        cls_logits, roi_deltas, _, q = self._roi_head(feat4, props)
        probs = torch.softmax(cls_logits, dim=-1)
        w = roi_deltas.new_tensor(cfg.roi_reg_weights)
        start = 0
        size = float(cfg.image_size)
        for i, p in enumerate(props):
            sl = slice(start, start + len(p))
            start += len(p)
            if len(p) == 0:
                continue
            boxes = decode_tensor(p, roi_deltas[sl] / w, bounds=(size, size))  # (R, K, 4)
            sc = probs[sl, :-1]
            r_idx, c_idx = torch.nonzero(sc > score_threshold, as_tuple=True)
            cand = boxes[r_idx, c_idx].double().numpy()
            cand_scores = sc[r_idx, c_idx].double().numpy()
            ok = ((cand[:, 2] - cand[:, 0]) > 1e-3) & ((cand[:, 3] - cand[:, 1]) > 1e-3)
            r_idx, c_idx = r_idx.numpy()[ok], c_idx.numpy()[ok]
            cand, cand_scores = cand[ok], cand_scores[ok]
            keep = nms_indices(cand, cand_scores, nms_threshold, c_idx)[:max_detections]
            qs = None if q is None else q[sl].double().numpy()
            results[i] = [
                ScoredBox(BBox(*map(float, cand[j])), min(float(cand_scores[j]), 1.0), int(c_idx[j]),
                          None if qs is None else float(qs[r_idx[j], c_idx[j]]))
                for j in keep
            ]
        return results

    def predict(self, image, score_threshold: float = 0.05, nms_threshold: float = 0.5,
                max_detections: int = 100) -> list[ScoredBox]:
        return self.predict_batch(image, score_threshold, nms_threshold, max_detections)[0]


# ---------------------------------------------------------------------------
# verification


def gradient_check(
    model: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    epsilon: float = 1e-6,
    fraction: float = 0.01,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central finite differences.

    Checks a random ``fraction`` of all parameter entries. The relative error
    of one entry is ``|a - n| / max(|a|, |n|, floor)``. Run it on a float64
    copy of the model; float32 round-off swamps the differences.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn(model).backward()
    analytic = [p.grad.detach().clone().flatten() for p in params]
    model.zero_grad()

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    n_check = max(1, int(round(total * fraction)))
    picks = np.sort(rng.choice(total, size=n_check, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            view = params[k].data.view(-1)
            orig = view[j].item()
            view[j] = orig + epsilon
            up = loss_fn(model).item()
            view[j] = orig - epsilon
            down = loss_fn(model).item()
            view[j] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic[k][j].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.bin (little-endian float32, manifest order)


def save_checkpoint(model: Detector, directory: str | Path, iteration: int = 0):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as fh:
        for name, p in model.state_dict().items():
            arr = p.detach().cpu().numpy().astype("<f4")
            fh.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.config.to_dict(),
        "iteration": iteration,
        "dtype": "<f4",
        "params": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[Detector, int]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format {manifest.get('format')!r}")
    model = Detector(ModelConfig.from_dict(manifest["architecture"]))
    flat = np.fromfile(directory / "params.bin", dtype="<f4")
    state = model.state_dict()
    if [e["name"] for e in manifest["params"]] != list(state):
        raise ValueError("checkpoint parameter names do not match the architecture")
    new_state = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = flat[e["offset"]: e["offset"] + n].reshape(e["shape"])
        new_state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(new_state)
    return model, int(manifest["iteration"])
