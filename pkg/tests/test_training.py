import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import resdistill.training as training
from resdistill.imaging import ImageRecord, prepare_train_view
from resdistill.model import ModelSpec, build_model, extract_features, freeze, parameter_hash
from resdistill.training import (
    TrainConfig,
    ValidationSet,
    batch_views,
    distillation_feature_grad,
    distillation_loss,
    fit,
    init_state,
    make_optimizer,
    train_step,
    update_lr_on_plateau,
    validate,
)

TINY = ModelSpec(num_classes=3, embedding_dim=4, channels=(4, 8))


def images(n_ids=3, per_id=4, seed=0, shape=(40, 48)):
    rng = np.random.default_rng(seed)
    recs = []
    for ident in range(n_ids):
        base = rng.uniform(0, 1, 3)
        for _ in range(per_id):
            px = np.clip(base + rng.normal(0, 0.1, shape + (3,)), 0, 1).astype(np.float32)
            recs.append(ImageRecord(px, ident))
    return recs


def cfg(**kw):
    base = dict(total_steps=4, batch_size=4, lr_init=0.01, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# loss


def test_loss_hand_example():
    # CE of a two-way tie is ln 2, and the squared distance 2 is weighted by 0.1
    br = distillation_loss([[0.0, 0.0]], [0], [[1.0, 1.0]], [[0.0, 0.0]], 0.1)
    assert br.classification == pytest.approx(math.log(2), abs=1e-12)
    assert br.distillation == pytest.approx(2.0)
    assert br.total == pytest.approx(0.893147, abs=1e-6)


def test_loss_zero_distance_and_zero_lambda():
    logits = np.random.default_rng(0).normal(size=(5, 4))
    labels = [0, 1, 2, 3, 0]
    f = np.random.default_rng(1).normal(size=(5, 8))
    same = distillation_loss(logits, labels, f, f, 0.7)
    assert same.distillation == 0.0 and same.total == same.classification
    off = distillation_loss(logits, labels, f, f + 1.0, 0.0)
    assert off.total == off.classification and off.distillation == pytest.approx(8.0)


def test_loss_reductions():
    ft = np.zeros((4, 2))
    fs = np.ones((4, 2))
    logits = np.zeros((4, 3))
    assert distillation_loss(logits, [0] * 4, ft, fs, 1.0).distillation == pytest.approx(2.0)
    assert distillation_loss(logits, [0] * 4, ft, fs, 1.0, "sum").distillation == pytest.approx(8.0)


def test_loss_shape_checks():
    with pytest.raises(ValueError):
        distillation_loss(np.zeros((2, 3)), [0, 1], np.zeros((2, 4)), np.zeros((2, 5)), 0.1)
    with pytest.raises(ValueError):
        distillation_loss(np.zeros((2, 3)), [0], np.zeros((2, 4)), np.zeros((2, 4)), 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.0, 2.0), st.sampled_from(["mean", "sum"]),
       st.integers(0, 2**31 - 1))
def test_feature_gradient_matches_finite_differences(n, d, lam, reduction, seed):
    rng = np.random.default_rng(seed)
    logits, ft, fs = rng.normal(size=(n, 3)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
    labels = rng.integers(0, 3, n)
    grad = distillation_feature_grad(ft, fs, lam, reduction)
    eps = 1e-6
    for i in range(n):
        for k in range(d):
            up, down = fs.copy(), fs.copy()
            up[i, k] += eps
            down[i, k] -= eps
            num = (distillation_loss(logits, labels, ft, up, lam, reduction).total
                   - distillation_loss(logits, labels, ft, down, lam, reduction).total) / (2 * eps)
            assert abs(num - grad[i, k]) <= 1e-5 * max(1.0, abs(num))


# plateau schedule


def run_schedule(losses, lr=1e-3):
    c = cfg(lr_init=lr)
    for k in range(1, len(losses) + 1):
        lr = update_lr_on_plateau(losses[:k], lr, c)
    return lr


def test_plateau_improving_keeps_rate():
    assert run_schedule([1.0, 0.8, 0.6]) == 1e-3


def test_plateau_flat_decays_once():
    assert run_schedule([1.0] * 4) == pytest.approx(2e-4)


def test_plateau_two_decays():
    assert run_schedule([1.0] * 7) == pytest.approx(4e-5)


def test_plateau_small_improvement_counts_as_flat():
    # a 1e-4 relative gain is below the 1e-3 threshold
    assert run_schedule([1.0, 0.9999, 0.9998, 0.9997]) == pytest.approx(2e-4)


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=30))
def test_plateau_rate_is_power_of_factor(losses):
    lr = run_schedule(losses, 1.0)
    k = round(-math.log(lr, 5))
    assert lr == pytest.approx(5.0**-k) and 0 <= k <= len(losses) // 3


def test_weight_decay_only_update():
    # with a zero loss gradient one SGD step shrinks every weight by lr * wd
    net = torch.nn.Linear(5, 2, bias=False).double()
    before = net.weight.detach().clone()
    c = cfg(lr_init=0.1, weight_decay=1e-2)
    opt = make_optimizer(SimpleNamespace(net=net), c)
    net.weight.grad = torch.zeros_like(net.weight)
    opt.step()
    assert torch.allclose(net.weight, before * (1 - 0.1 * 1e-2), atol=1e-15)
    assert opt.defaults["momentum"] == 0.9


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="bogus")
    with pytest.raises(ValueError):
        TrainConfig(lr_init=0)
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"total_step": 3})
    assert TrainConfig.from_mapping({"total_steps": 3}).total_steps == 3


# training loop


def test_curriculum_views_follow_step():
    recs = images()
    c = cfg(total_steps=10)
    first = batch_views(recs, range(4), c, 0)
    last = batch_views(recs, range(4), c, 10)
    assert not any(v.degraded for v in first)
    assert all(v.degraded for v in last)


def test_fixed_frequency_views():
    recs = images(per_id=30)
    views = batch_views(recs, range(90), cfg(mode="nT-nC", fixed_degrade_frequency=0.0), 0)
    assert not any(v.degraded for v in views)
    views = batch_views(recs, range(90), cfg(mode="nT-nC", fixed_degrade_frequency=1.0), 0)
    assert all(v.degraded for v in views)


def test_teacher_unchanged_by_student_updates():
    teacher = freeze(build_model(TINY, seed=1))
    h = parameter_hash(teacher)
    recs = images()
    x = np.stack([v.teacher_input for v in batch_views(recs, range(3), cfg(), 0)])
    emb = extract_features(teacher, x)
    state = fit(cfg(total_steps=6), recs, recs, teacher)
    assert state.step == 6
    assert parameter_hash(teacher) == h
    assert parameter_hash(state.student) != h
    assert np.array_equal(extract_features(teacher, x), emb)


def test_nT_nC_never_touches_teacher():
    recs = images()
    student = build_model(TINY, seed=2)
    c = cfg(mode="nT-nC")
    state = init_state(c, student, None)

    views = [prepare_train_view(r, 0.5, np.random.default_rng(i)) for i, r in enumerate(recs[:4])]
    _, br = train_step(state, views, [r.identity for r in recs[:4]])
    assert br.distillation == 0.0 and br.lambda_applied == 0.0 and br.total == br.classification


def test_T_C_needs_frozen_teacher():
    with pytest.raises(ValueError):
        init_state(cfg(), build_model(TINY), None)
    with pytest.raises(ValueError):
        init_state(cfg(), build_model(TINY), build_model(TINY))


def test_single_step_run_writes_final(tmp_path):
    teacher = freeze(build_model(TINY, seed=3))
    recs = images()
    state = fit(cfg(total_steps=1), recs, recs, teacher, out_dir=tmp_path)
    assert state.step == 1 and len(state.val_history) == 1
    assert (tmp_path / "final.pt").exists() and (tmp_path / "best.pt").exists()
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch,step,lr")


def test_same_seed_same_history():
    teacher = freeze(build_model(TINY, seed=4))
    recs = images()
    a = fit(cfg(total_steps=6), recs, recs, teacher)
    b = fit(cfg(total_steps=6), recs, recs, teacher)
    assert a.val_history == b.val_history and a.epoch_losses == b.epoch_losses
    assert parameter_hash(a.student) == parameter_hash(b.student)


def test_resume_matches_uninterrupted(tmp_path):
    teacher = freeze(build_model(TINY, seed=5))
    recs = images()
    c = cfg(total_steps=7)
    full = fit(c, recs, recs, teacher)
    fit(c, recs, recs, teacher, out_dir=tmp_path, stop_at_step=4)
    resumed = fit(c, recs, recs, teacher, out_dir=tmp_path, resume_from=tmp_path / "resume.pt")
    assert parameter_hash(resumed.student) == parameter_hash(full.student)
    assert resumed.val_history == full.val_history


def test_resume_rejects_other_config(tmp_path):
    teacher = freeze(build_model(TINY, seed=5))
    recs = images()
    fit(cfg(total_steps=4), recs, recs, teacher, out_dir=tmp_path, stop_at_step=2)
    with pytest.raises(ValueError):
        fit(cfg(total_steps=5), recs, recs, teacher, resume_from=tmp_path / "resume.pt")


def test_validate_chance_and_perfect():
    recs = images()
    zero = build_model(TINY, zero_head=True)
    # all logits tie, argmax picks class 0: one third of a balanced set
    assert validate(zero, recs) == (pytest.approx(1 / 3), pytest.approx(1 / 3))



def test_validate_perfect_classifier(monkeypatch):
    # identity k is the image whose channel k is brightest; a colour rule classifies it exactly
    recs = []
    for k in range(3):
        px = np.full((40, 48, 3), 0.2, dtype=np.float32)
        px[:, :, k] = 0.9
        recs += [ImageRecord(px, k)] * 2
    monkeypatch.setattr(training, "classify", lambda m, x: x.mean(axis=(1, 2)))
    assert validate(None, recs) == (1.0, 1.0)
