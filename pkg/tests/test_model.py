import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from ilnet.geometry import BBox
from ilnet.losses import LossWeights, supervised_loss
from ilnet.model import (
    BranchInputMask,
    Detector,
    IoUBranch,
    ModelConfig,
    gradient_check,
    iou_branch_forward,
    load_checkpoint,
    make_anchors,
    save_checkpoint,
)
from ilnet.synthdata import DataConfig, generate_scene


@pytest.fixture(scope="module")
def scene():
    return generate_scene(11, DataConfig())


def _zero_params(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def test_anchor_count_and_layout():
    a = make_anchors(64, 8, (12, 20, 30))
    assert a.shape == (192, 4)
    assert a[0].tolist() == [-2.0, -2.0, 10.0, 10.0]
    assert Detector().anchors.shape == (192, 4)


def test_proposals_bounded(scene):
    model = Detector()
    props = model.forward_proposals(scene.image)
    assert 0 < len(props) <= model.config.num_proposals
    for box, score, _ in props:
        assert 0 <= box.x1 < box.x2 <= 64 and 0 <= box.y1 < box.y2 <= 64
        assert 0.0 <= score <= 1.0


def test_zero_parameters_give_even_objectness(scene):
    model = Detector()
    _zero_params(model)
    props = model.forward_proposals(scene.image)
    assert props and all(s == 0.5 for _, s, _ in props)


def test_roi_outputs(scene):
    model = Detector()
    props = [BBox(0, 0, 20, 20), BBox(10, 12, 40, 50)]
    dets = model.forward_roi(scene.image, props)
    assert len(dets) == 2
    for d in dets:
        assert d.scores.shape == (4,)
        assert d.scores.sum() == pytest.approx(1.0, abs=1e-6)
        assert d.iou_scores.shape == (4,)
        assert np.all((d.iou_scores > 0) & (d.iou_scores < 1))
        assert d.deltas.shape == (3, 4)
        assert d.shared_feature.shape == (128,)
    assert model.forward_roi(scene.image, []) == []


def test_branch_zero_weights_give_half():
    fc1, fc2 = nn.Linear(132, 132), nn.Linear(132, 4)
    for p in (*fc1.parameters(), *fc2.parameters()):
        nn.init.zeros_(p)
    q = iou_branch_forward(torch.randn(5, 128), torch.rand(5, 4), torch.randn(5, 4),
                           BranchInputMask(), fc1, fc2)
    assert torch.all(q == 0.5)


def test_branch_input_widths():
    assert BranchInputMask().input_dim(128, 3) == 132
    assert BranchInputMask(True, True, True).input_dim(128, 3) == 136
    assert BranchInputMask.parse("shared+scores+deltas") == BranchInputMask(True, True, True)
    assert str(BranchInputMask()) == "shared+scores"
    with pytest.raises(ValueError):
        BranchInputMask(False, False, False)


def test_branch_width_mismatch_raises():
    branch = IoUBranch(132, 132, 4, BranchInputMask(True, True, True))
    with pytest.raises(ValueError):
        branch(torch.zeros(2, 128), torch.zeros(2, 4), torch.zeros(2, 4))


def test_no_branch_means_no_q(scene):
    model = Detector(ModelConfig(branch_enabled=False))
    assert model.iou_branch is None
    dets = model.predict(scene.image, score_threshold=0.0)
    assert all(d.q_iou is None for d in dets)


def test_predict_threshold_one_is_empty(scene):
    assert Detector().predict(scene.image, score_threshold=1.0) == []


def test_predict_boxes_clipped_and_sorted(scene):
    model = Detector(ModelConfig(init_seed=4))
    dets = model.predict(scene.image, score_threshold=0.0)
    assert dets
    for d in dets:
        assert 0 <= d.box.x1 < d.box.x2 <= 64 and 0 <= d.box.y1 < d.box.y2 <= 64
        assert d.q_iou is not None and 0 < d.q_iou < 1
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)


def test_predict_monotone_in_threshold(scene):
    model = Detector(ModelConfig(init_seed=2))
    counts = [len(model.predict(scene.image, score_threshold=t)) for t in (0.0, 0.2, 0.3, 0.5, 0.9)]
    assert counts == sorted(counts, reverse=True)


def test_predict_rejects_bad_size():
    with pytest.raises(ValueError):
        Detector().predict(np.zeros((32, 32, 3), dtype=np.float32))


def test_gradient_check_on_quadratic():
    torch.manual_seed(0)
    lin = nn.Linear(6, 3).double()
    x = torch.randn(10, 6, dtype=torch.float64)
    err = gradient_check(lin, lambda m: (m(x) ** 2).sum(), fraction=1.0)
    assert err < 1e-6


def test_gradient_check_supervised_loss(scene):
    model = Detector().double()
    boxes = torch.tensor([b.as_tuple() for b, _ in scene.objects], dtype=torch.float64)
    classes = torch.tensor([c for _, c in scene.objects])
    props = model.proposals_for(scene.image)
    weights = LossWeights()

    def loss_fn(m):
        outs = m.forward_train(scene.image, [boxes], proposals=props)
        return supervised_loss(outs, [(boxes, classes)], weights).total(weights)

    assert gradient_check(model, loss_fn, fraction=0.01) < 1e-3


def test_checkpoint_roundtrip_bit_exact(tmp_path, scene):
    cfg = ModelConfig(branch_mask=BranchInputMask(True, True, True), init_seed=9)
    model = Detector(cfg)
    save_checkpoint(model, tmp_path, iteration=42)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["dtype"] == "<f4" and manifest["iteration"] == 42
    back, it = load_checkpoint(tmp_path)
    assert it == 42
    assert back.config == cfg
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    a = model.predict(scene.image, score_threshold=0.0)
    b = back.predict(scene.image, score_threshold=0.0)
    assert a == b


def test_checkpoint_wrong_format(tmp_path):
    save_checkpoint(Detector(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format"] = "other"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def test_init_is_seeded():
    a, b = Detector(ModelConfig(init_seed=1)), Detector(ModelConfig(init_seed=1))
    c = Detector(ModelConfig(init_seed=2))
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.conv1.weight, c.conv1.weight)
