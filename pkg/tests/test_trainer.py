import copy
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn

from ilnet.losses import LossWeights, supervised_loss
from ilnet.model import Detector, ModelConfig
from ilnet.synthdata import make_splits
from ilnet.trainer import (
    HyperConfig,
    ema_update,
    generate_pseudo_labels,
    labeled_batch,
    make_optimizer,
    make_teacher,
    run_training,
    train_step_burn_up,
    train_step_mutual,
)


def _pair():
    torch.manual_seed(0)
    t, s = nn.Linear(4, 3).double(), nn.Linear(4, 3).double()
    return t, s


def test_ema_extremes():
    t, s = _pair()
    t0 = copy.deepcopy(t)
    ema_update(t, s, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(t.parameters(), t0.parameters()))
    ema_update(t, s, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(t.parameters(), s.parameters()))


def test_ema_closed_form_small():
    t, s = _pair()
    t0 = [p.clone() for p in t.parameters()]
    m, k = 0.9, 25
    for _ in range(k):
        ema_update(t, s, m)
    for p, p0, w in zip(t.parameters(), t0, s.parameters()):
        assert torch.allclose(p, m ** k * p0 + (1 - m ** k) * w, atol=1e-12)


def test_ema_rejects_mismatch():
    with pytest.raises(ValueError):
        ema_update(nn.Linear(4, 3), nn.Linear(4, 2), 0.5)
    with pytest.raises(ValueError):
        ema_update(nn.Linear(4, 3), nn.Linear(4, 3), 1.5)


def test_teacher_is_frozen_copy():
    s = Detector()
    t = make_teacher(s)
    assert all(not p.requires_grad for p in t.parameters())
    assert all(torch.equal(a, b) for a, b in zip(t.parameters(), s.parameters()))


@pytest.fixture(scope="module")
def warm_teacher():
    """A briefly trained detector so pseudo-labels are not empty."""
    from ilnet.synthdata import DataConfig

    data = make_splits(DataConfig(n_scenes=60, labeled_fraction=0.5, seed=1))
    cfg = HyperConfig(total_iters=150, burn_up_iters=150, log_interval=150, seed=1)
    art = run_training(cfg, data)
    return art.student, data


def test_pseudo_label_filters(warm_teacher):
    model, data = warm_teacher
    images = np.stack([s.image for s in data.unlabeled[:20]])
    base = HyperConfig(total_iters=10)
    raw, st = generate_pseudo_labels(model, images, replace(base, theta=0.0, delta=0.0))
    assert st.raw == st.after_iou_filter == st.kept > 0
    for pls in raw:
        for p in pls:
            assert 0.0 <= p.q_iou <= 1.0

    picked = replace(base, theta=0.4, delta=0.0)
    out, _ = generate_pseudo_labels(model, images, picked)
    assert all(p.q_iou >= 0.4 for pls in out for p in pls)
    dropped = [p for pls in raw for p in pls if p.q_iou < 0.4]
    kept_boxes = {(p.box, p.class_id) for pls in out for p in pls}
    assert all((p.box, p.class_id) not in kept_boxes for p in dropped)

    off, st_off = generate_pseudo_labels(model, images, replace(picked, filter_enabled=False))
    assert st_off.kept == st.raw


def test_pseudo_label_counts_monotone(warm_teacher):
    model, data = warm_teacher
    images = np.stack([s.image for s in data.unlabeled[:20]])
    base = HyperConfig(total_iters=10, delta=0.0)
    counts = [generate_pseudo_labels(model, images, replace(base, theta=t))[1].kept
              for t in (0.3, 0.4, 0.5, 0.6, 0.7)]
    assert counts == sorted(counts, reverse=True)
    base = HyperConfig(total_iters=10, theta=0.0)
    counts = [generate_pseudo_labels(model, images, replace(base, delta=d))[1].kept
              for d in (0.5, 0.6, 0.7, 0.8, 0.9)]
    assert counts == sorted(counts, reverse=True)


def _batch(data, seed=0):
    rng = np.random.default_rng(seed)
    return labeled_batch(data.labeled[:2], rng)


def test_burn_up_step_sgd_rule(tiny_data_config):
    data = make_splits(tiny_data_config)
    cfg = HyperConfig(total_iters=10, momentum=0.0, lr=0.01, weight_decay=1e-3)
    model = Detector(ModelConfig(init_seed=1))
    batch = _batch(data)
    ref = copy.deepcopy(model)
    outs = ref.forward_train(batch[0], [t[0] for t in batch[1]])
    supervised_loss(outs, batch[1], cfg.weights).total(cfg.weights).backward()
    expected = [p - cfg.lr * (p.grad + cfg.weight_decay * p) for p in ref.parameters()]
    train_step_burn_up(model, make_optimizer(model, cfg), batch, cfg)
    for p, e in zip(model.parameters(), expected):
        assert torch.allclose(p, e, atol=1e-6)


def test_zero_lr_leaves_parameters(tiny_data_config):
    data = make_splits(tiny_data_config)
    # the config insists on lr > 0, so zero it on the optimizer as the schedule does
    cfg = HyperConfig(total_iters=10)
    model = Detector()
    opt = make_optimizer(model, cfg)
    for group in opt.param_groups:
        group["lr"] = 0.0
    before = [p.clone() for p in model.parameters()]
    train_step_burn_up(model, opt, _batch(data), cfg)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_mutual_step_zero_unsup_weights_matches_burn_up(warm_teacher):
    student, data = warm_teacher
    cfg = HyperConfig(total_iters=10, weights=LossWeights(0.0, 0.0, 0.0), momentum=0.0,
                      theta=0.0, delta=0.0)
    batch = _batch(data)
    a, b = copy.deepcopy(student), copy.deepcopy(student)
    teacher = make_teacher(student)
    train_step_burn_up(a, make_optimizer(a, cfg), batch, cfg)
    _, unsup, stats = train_step_mutual(b, teacher, make_optimizer(b, cfg), batch, data.unlabeled[:2],
                                        cfg, np.random.default_rng(0))
    assert stats.kept > 0
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.allclose(p, q, atol=1e-5)


def test_mutual_step_updates_teacher_by_ema(warm_teacher):
    student, data = warm_teacher
    cfg = HyperConfig(total_iters=10, ema_momentum=0.5)
    s = copy.deepcopy(student)
    teacher = make_teacher(s)
    t0 = [p.clone() for p in teacher.parameters()]
    train_step_mutual(s, teacher, make_optimizer(s, cfg), _batch(data), data.unlabeled[:2], cfg,
                      np.random.default_rng(0))
    for pt, p0, ps in zip(teacher.parameters(), t0, s.parameters()):
        assert torch.allclose(pt, 0.5 * p0 + 0.5 * ps, atol=1e-7)
        assert pt.grad is None


def test_mutual_step_without_pseudo_labels(warm_teacher):
    student, data = warm_teacher
    cfg = HyperConfig(total_iters=10, delta=1.0)
    s = copy.deepcopy(student)
    _, unsup, stats = train_step_mutual(s, make_teacher(s), make_optimizer(s, cfg), _batch(data),
                                        data.unlabeled[:2], cfg, np.random.default_rng(0))
    assert stats.kept == 0
    assert all(v == 0.0 for v in unsup.as_floats().values())


def test_zero_iterations(tiny_data_config):
    data = make_splits(tiny_data_config)
    art = run_training(HyperConfig(total_iters=0), data)
    assert art.records == [] and art.final_report is None
    assert all(torch.equal(a, b) for a, b in zip(art.student.parameters(), art.teacher.parameters()))


def test_training_is_deterministic_and_respects_hidden_labels(tiny_data_config):
    data = make_splits(tiny_data_config)
    cfg = HyperConfig(total_iters=12, burn_up_iters=6, log_interval=4, eval_interval=6,
                      quality_interval=6, quality_scenes=5, theta=0.0, delta=0.0)
    from ilnet.synthdata import make_eval_set

    ev = make_eval_set(tiny_data_config)
    runs = [run_training(cfg, data, eval_scenes=ev) for _ in range(2)]
    assert runs[0].records == runs[1].records
    assert [r["stage"] for r in runs[0].records] == ["burn_up", "mutual", "mutual"]
    assert runs[0].records[-1]["ap"] is not None
    # the teacher exists from iteration 6 on, so only the snapshot at 12 is taken
    assert [q["iteration"] for q in runs[0].quality] == [12]
    # unlabeled scenes stayed hidden throughout
    assert all(not s.labeled for s in data.unlabeled)


def test_hyper_config_validation():
    assert HyperConfig(total_iters=600).burn_up_iters == 100
    assert HyperConfig(total_iters=6000).lr_steps == (5999, 5999)
    with pytest.raises(ValueError):
        HyperConfig(u=0.8, mu=0.75)
    with pytest.raises(ValueError):
        HyperConfig(total_iters=10, burn_up_iters=20)


def test_burn_up_overfit_mostly_decreasing(tiny_data_config):
    # plain gradient descent: heavy-ball momentum overshoots and oscillates on a fixed batch
    data = make_splits(tiny_data_config)
    batch = _batch(data)
    cfg = HyperConfig(total_iters=200, momentum=0.0)
    model = Detector(ModelConfig(init_seed=0))
    opt = make_optimizer(model, cfg)
    losses = [sum(train_step_burn_up(model, opt, batch, cfg, i).as_floats().values()) for i in range(201)]
    assert np.mean(np.diff(losses) < 0) >= 0.9


def test_survivor_iou_nondecreasing_in_theta(warm_teacher):
    from ilnet.eval_analysis import pseudo_label_quality

    model, data = warm_teacher
    scenes = data.unlabeled[:30]
    images = np.stack([s.image for s in scenes])
    means = []
    for theta in (0.0, 0.2, 0.4, 0.6):
        pseudo, _ = generate_pseudo_labels(model, images, HyperConfig(total_iters=10, theta=theta, delta=0.0))
        vals = [v for p, s in zip(pseudo, scenes) for v, _ in pseudo_label_quality(p, s.reveal())]
        if vals:
            means.append(float(np.mean(vals)))
    assert len(means) >= 2
    assert all(b >= a - 1e-12 for a, b in zip(means, means[1:]))
