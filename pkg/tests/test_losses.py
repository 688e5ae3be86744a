import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ilnet.geometry import BBox, MatchResult, match_to_gt
from ilnet.losses import (
    LossBreakdown,
    LossWeights,
    NonFiniteLossError,
    assign_branch_targets,
    detection_losses,
    focal_loss,
    focal_loss_tensor,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from ilnet.model import ImageOutputs
from oracles import decimal_focal


def test_focal_closed_form():
    assert decimal_focal(0.5, 1, 1.5) == pytest.approx(0.245065, abs=1e-6)
    for q, t in ((0.5, 1), (0.9, 0), (0.3, 1), (0.01, 0)):
        assert focal_loss(q, t, 1.5) == pytest.approx(decimal_focal(q, t, 1.5), abs=1e-9)


def test_focal_gamma_zero_is_bce():
    rng = np.random.default_rng(0)
    for q, t in zip(rng.uniform(0.001, 0.999, 100), rng.integers(0, 2, 100)):
        bce = -(t * math.log(q) + (1 - t) * math.log(1 - q))
        assert abs(focal_loss(float(q), int(t), 0.0) - bce) < 1e-9


def test_focal_clamps_extremes():
    assert math.isfinite(focal_loss(0.0, 1, 1.5))
    assert math.isfinite(focal_loss(1.0, 0, 1.5))
    assert focal_loss(1.0, 1, 1.5) >= 0.0


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.0, 3.0))
def test_focal_monotone(q1, q2, g):
    lo, hi = sorted((q1, q2))
    assert focal_loss(hi, 1, g) <= focal_loss(lo, 1, g) + 1e-12
    assert focal_loss(hi, 0, g) >= focal_loss(lo, 0, g) - 1e-12


def test_focal_tensor_matches_scalar():
    q = torch.tensor([0.1, 0.5, 0.9, 0.0], dtype=torch.float64)
    t = torch.tensor([1.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    out = focal_loss_tensor(q, t, 1.5)
    for i in range(4):
        assert out[i].item() == pytest.approx(focal_loss(q[i].item(), int(t[i].item()), 1.5), abs=1e-12)


def _m(v, i=0):
    return MatchResult(i, v, 0 if v > 0 else None, v >= 0.5)


def test_target_examples():
    out = assign_branch_targets([_m(0.8), _m(0.75, 1), _m(0.45, 2), _m(0.5, 3)], 0.5, 0.75)
    assert [(b.included, b.t) for b in out] == [(True, 1), (True, 0), (False, 0), (True, 0)]


def test_target_invalid_thresholds():
    with pytest.raises(ValueError):
        assign_branch_targets([], 0.8, 0.75)


@given(st.lists(st.floats(0.0, 1.0), max_size=20), st.floats(0.5, 0.95), st.floats(0.5, 0.95))
def test_positive_count_nonincreasing_in_mu(ious, m1, m2):
    lo, hi = sorted((m1, m2))
    ms = [_m(v, i) for i, v in enumerate(ious)]
    pos = lambda mu: sum(b.t for b in assign_branch_targets(ms, 0.5, mu))
    assert pos(hi) <= pos(lo)


@given(st.lists(st.floats(0.0, 1.0), max_size=20), st.floats(0.05, 0.95))
def test_positive_implies_included(ious, mu):
    for b in assign_branch_targets([_m(v, i) for i, v in enumerate(ious)], min(0.5, mu), mu):
        assert b.included or b.t == 0


# -- a hand-built output fixture ---------------------------------------------------

ANCHORS = [[0, 0, 10, 10], [0, 0, 20, 20], [30, 30, 40, 40]]
GT = [[0, 0, 10, 10]]
ROIS = [[0, 0, 10, 10], [0, 0, 12, 10], [30, 30, 40, 40]]


def _outputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    d = torch.float64
    return ImageOutputs(
        anchors=torch.tensor(ANCHORS, dtype=d),
        obj_logits=torch.randn(3, generator=g, dtype=d),
        anchor_deltas=torch.randn(3, 4, generator=g, dtype=d) * 0.3,
        rois=torch.tensor(ROIS, dtype=d),
        cls_logits=torch.randn(3, 3, generator=g, dtype=d),
        roi_deltas=torch.randn(3, 2, 4, generator=g, dtype=d),
        x_sh=torch.zeros(3, 8, dtype=d),
        q=torch.rand(3, 3, generator=g, dtype=d),
        rpn_reg_weights=(1.0, 1.0, 1.0, 1.0),
        roi_reg_weights=(10.0, 10.0, 5.0, 5.0),
    )


def _encode(p, t):
    pw, ph = p[2] - p[0], p[3] - p[1]
    tw, th = t[2] - t[0], t[3] - t[1]
    return np.array([(t[0] + tw / 2 - p[0] - pw / 2) / pw, (t[1] + th / 2 - p[1] - ph / 2) / ph,
                     math.log(tw / pw), math.log(th / ph)])


def _decode(p, d):
    pw, ph = p[2] - p[0], p[3] - p[1]
    cx, cy = p[0] + pw / 2 + d[0] * pw, p[1] + ph / 2 + d[1] * ph
    w, h = pw * math.exp(d[2]), ph * math.exp(d[3])
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _sl1(x):
    x = np.abs(x)
    return np.where(x < 1, 0.5 * x * x, x - 0.5).sum()


def test_five_terms_match_hand_computation():
    out = _outputs()
    cls = 1
    # an exact regression on the first RoI gives one positive branch target
    out.roi_deltas[0, cls] = 0.0
    got = detection_losses([out], [(torch.tensor(GT, dtype=torch.float64), torch.tensor([cls]))])
    obj = out.obj_logits.numpy()
    # anchor IoUs with the gt: 1.0, 0.25, 0.0 -> labels 1, 0, 0
    labels = np.array([1.0, 0.0, 0.0])
    p = 1 / (1 + np.exp(-obj))
    rpn_cls = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    rpn_reg = _sl1(out.anchor_deltas.numpy()[0] - _encode(ANCHORS[0], GT[0]))
    # RoI IoUs: 1.0, 10/12, 0 -> classes cls, cls, background(2)
    logits = out.cls_logits.numpy()
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    roi_cls = -(logp[0, cls] + logp[1, cls] + logp[2, 2]) / 3
    w = np.array([10, 10, 5, 5])
    rd = out.roi_deltas.numpy()
    roi_reg = (_sl1(rd[0, cls] - w * _encode(ROIS[0], GT[0]))
               + _sl1(rd[1, cls] - w * _encode(ROIS[1], GT[0]))) / 2
    # branch targets come from the regressed boxes, not the RoIs
    t = [int(_iou(_decode(ROIS[i], rd[i, cls] / w), GT[0]) > 0.75) for i in (0, 1)]
    assert t == [1, 0]
    q = out.q.numpy()
    iou_b = (focal_loss(q[0, cls], t[0], 1.5) + focal_loss(q[1, cls], t[1], 1.5)) / 2
    expected = [rpn_cls, rpn_reg, roi_cls, roi_reg, iou_b]
    actual = [got.rpn_cls, got.rpn_reg, got.roi_cls, got.roi_reg, got.iou_branch]
    for a, e in zip(actual, expected):
        assert a.item() == pytest.approx(e, abs=1e-10)


def test_no_foreground_gives_zero_reg_and_iou():
    out = _outputs()
    gt = torch.tensor([[50.0, 50.0, 60.0, 60.0]], dtype=torch.float64)
    got = detection_losses([out], [(gt, torch.tensor([0]))])
    assert got.roi_reg.item() == 0.0 and got.iou_branch.item() == 0.0
    assert got.roi_cls.item() > 0


def test_perfect_predictions_give_near_zero():
    out = _outputs()
    big = 40.0
    cls = 0
    out.obj_logits = torch.tensor([big, -big, -big], dtype=torch.float64)
    out.anchor_deltas = torch.zeros(3, 4, dtype=torch.float64)
    logits = torch.full((3, 3), -big, dtype=torch.float64)
    logits[0, cls] = logits[1, cls] = logits[2, 2] = big
    out.cls_logits = logits
    rd = torch.zeros(3, 2, 4, dtype=torch.float64)
    w = torch.tensor([10, 10, 5, 5], dtype=torch.float64)
    rd[1, cls] = torch.tensor(_encode(ROIS[1], GT[0])) * w
    out.roi_deltas = rd
    out.q = torch.ones(3, 3, dtype=torch.float64)
    got = detection_losses([out], [(torch.tensor(GT, dtype=torch.float64), torch.tensor([cls]))])
    assert all(v < 1e-6 for v in got.as_floats().values())


def _breakdown(vals, stream):
    return LossBreakdown(*[torch.tensor(float(v)) for v in vals], stream=stream)


def test_unsup_weighting():
    w = LossWeights(alpha=4, beta=1, gamma_iou=1)
    lb = _breakdown([0.05, 0.1, 0.05, 0.1, 0.15], "unsupervised")
    # 4 * (0.05 + 0.05) + 1 * (0.1 + 0.1) + 1 * 0.15
    assert lb.total(w).item() == pytest.approx(0.75, abs=1e-7)
    sup = _breakdown([0.05, 0.1, 0.05, 0.1, 0.15], "supervised")
    assert sup.total(w).item() == pytest.approx(0.45, abs=1e-7)


def test_beta_zero_ignores_regression():
    a = _breakdown([0.1, 0.2, 0.3, 0.4, 0.5], "unsupervised")
    b = _breakdown([0.1, 9.0, 0.3, 7.0, 0.5], "unsupervised")
    w = LossWeights(beta=0.0)
    assert a.total(w).item() == pytest.approx(b.total(w).item(), abs=1e-7)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_unsup_total_linear_in_weights(al, be, ga):
    lb = _breakdown([0.1, 0.2, 0.3, 0.4, 0.5], "unsupervised")
    expected = al * 0.4 + be * 0.6 + ga * 0.5
    got = lb.total(LossWeights(alpha=al, beta=be, gamma_iou=ga)).item()
    assert got == pytest.approx(expected, rel=1e-5, abs=1e-6)


def test_unsupervised_skips_empty_images():
    out = _outputs()
    empty = (torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, dtype=torch.long))
    full = (torch.tensor(GT, dtype=torch.float64), torch.tensor([1]))
    w = LossWeights()
    assert all(v == 0.0 for v in unsupervised_loss([out], [empty], w).as_floats().values())
    a = unsupervised_loss([out, _outputs(1)], [full, empty], w).as_floats()
    b = unsupervised_loss([out], [full], w).as_floats()
    assert a == pytest.approx(b)


def test_total_loss_shares():
    w = LossWeights()
    sup = _breakdown([0.1, 0.1, 0.1, 0.1, 0.1], "supervised")
    unsup = _breakdown([0.1, 0.1, 0.1, 0.1, 0.1], "unsupervised")
    total, shares = total_loss(sup, unsup, w)
    # sup 0.2 + 0.2 + 0.1; unsup 0.8 + 0.2 + 0.1
    assert total.item() == pytest.approx(1.6, abs=1e-6)
    assert sum(shares.values()) == pytest.approx(1.0)
    assert shares["unsup_cls"] == pytest.approx(0.5)


def test_total_loss_burn_up_and_zero():
    w = LossWeights()
    total, shares = total_loss(_breakdown([0.1] * 5, "supervised"), None, w)
    assert total.item() == pytest.approx(0.5, abs=1e-6)
    assert shares["unsup_cls"] == 0.0
    total, shares = total_loss(_breakdown([0] * 5, "supervised"), None, w)
    assert total.item() == 0.0 and all(v == 0.0 for v in shares.values())


def test_non_finite_raises():
    bad = _breakdown([0.1, float("nan"), 0, 0, 0], "supervised")
    with pytest.raises(NonFiniteLossError) as err:
        total_loss(bad, None, LossWeights(), iteration=7)
    assert "rpn_reg" in str(err.value)


def test_supervised_loss_on_real_model():
    from ilnet.model import Detector
    from ilnet.synthdata import DataConfig, generate_scene

    sc = generate_scene(5, DataConfig())
    boxes = torch.tensor([b.as_tuple() for b, _ in sc.objects])
    classes = torch.tensor([c for _, c in sc.objects])
    outs = Detector().forward_train(sc.image, [boxes])
    lb = supervised_loss(outs, [(boxes, classes)], LossWeights())
    assert all(math.isfinite(v) and v >= 0 for v in lb.as_floats().values())
    # gt boxes are appended to the RoIs, so foreground is never empty
    assert lb.roi_reg.item() > 0 and lb.iou_branch.item() > 0


def test_match_counts_feed_targets():
    props = [BBox(0, 0, 10, 10), BBox(0, 0, 9, 10), BBox(40, 40, 50, 50)]
    ms = match_to_gt(props, [(BBox(0, 0, 10, 10), 2)], 0.5)
    tg = assign_branch_targets(ms, 0.5, 0.75, gt_classes=[2])
    assert [(t.included, t.t, t.class_id) for t in tg] == [(True, 1, 2), (True, 1, 2), (False, 0, None)]
