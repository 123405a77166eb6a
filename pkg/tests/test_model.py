import numpy as np
import pytest
import torch

from resdistill.model import (
    ModelSpec,
    ShapeError,
    build_model,
    classify,
    clone,
    extract_features,
    freeze,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
    spec_from_dict,
    spec_to_dict,
    to_tensor,
)

SMALL = ModelSpec(num_classes=5, embedding_dim=6, channels=(4, 8), input_size=32, stem_pool=1)


def batch(n, seed=0, size=32):
    return np.random.default_rng(seed).uniform(0, 1, (n, size, size, 3)).astype(np.float32)


def test_identical_inputs_identical_embeddings():
    m = build_model(SMALL, seed=1)
    x = batch(1)
    out = extract_features(m, np.concatenate([x, x]))
    assert np.array_equal(out[0], out[1])


def test_batch_shape_contract():
    m = build_model(SMALL, seed=1)
    out = extract_features(m, batch(7), batch_size=3)
    assert out.shape == (7, 6) and np.all(np.isfinite(out))


def test_softmax_rows_normalised():
    m = build_model(SMALL, seed=2)
    p = torch.softmax(torch.from_numpy(classify(m, batch(9))), dim=1).numpy()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_zero_head_gives_uniform_softmax():
    m = build_model(SMALL, seed=3, zero_head=True)
    p = torch.softmax(torch.from_numpy(classify(m, batch(4))), dim=1).numpy()
    np.testing.assert_allclose(p, np.full((4, 5), 1 / 5), atol=1e-7)


def test_seeded_build_is_deterministic_and_isolated():
    torch.manual_seed(123)
    before = torch.random.get_rng_state()
    a, b = build_model(SMALL, seed=4), build_model(SMALL, seed=4)
    assert parameter_hash(a) == parameter_hash(b)
    assert parameter_hash(a) != parameter_hash(build_model(SMALL, seed=5))
    assert torch.equal(before, torch.random.get_rng_state())


def test_shape_errors():
    m = build_model(SMALL)
    with pytest.raises(ShapeError):
        to_tensor(m, batch(2, size=16))
    with pytest.raises(ShapeError):
        to_tensor(m, np.zeros((2, 32, 32, 1), dtype=np.float32))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(num_classes=1)
    with pytest.raises(ValueError):
        ModelSpec(num_classes=3, in_channels=2)
    assert spec_from_dict(spec_to_dict(SMALL)) == SMALL


@pytest.mark.parametrize("param_name", ["trunk.0.weight", "embedding.bias", "classifier.weight"])
def test_finite_difference_gradient(param_name):
    # float64 model in eval mode so the function of the parameters is fixed
    m = build_model(SMALL, seed=6)
    m.net.double().eval()
    with torch.no_grad():
        for mod in m.net.modules():
            if isinstance(mod, torch.nn.BatchNorm2d):
                mod.running_mean.uniform_(-0.1, 0.1)
                mod.running_var.uniform_(0.5, 1.5)
    x = to_tensor(m, batch(3, seed=7).astype(np.float64))
    w = torch.from_numpy(np.random.default_rng(8).normal(size=(3, 5)))
    param = dict(m.net.named_parameters())[param_name]

    def objective():
        return (m.net(x)[0] * w).sum()

    m.net.zero_grad()
    objective().backward()
    analytic = param.grad.reshape(-1).clone()
    rng = np.random.default_rng(9)
    eps = 1e-6
    for k in rng.choice(param.numel(), size=min(5, param.numel()), replace=False):
        flat = param.data.view(-1)
        orig = flat[k].item()
        with torch.no_grad():
            flat[k] = orig + eps
            up = objective().item()
            flat[k] = orig - eps
            down = objective().item()
            flat[k] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - analytic[k].item()) <= 1e-4 * max(1.0, abs(numeric))


def test_freeze_properties():
    m = build_model(SMALL, seed=10)
    f = freeze(m)
    assert f.frozen and not f.net.training
    assert all(not p.requires_grad for p in f.net.parameters())
    assert freeze(f) is f
    x = batch(3)
    assert np.array_equal(extract_features(freeze(f), x), extract_features(f, x))
    # freezing copies: later changes to the source do not leak in
    with torch.no_grad():
        next(m.net.parameters()).add_(1.0)
    assert parameter_hash(f) != parameter_hash(m)


def test_clone_then_diverge():
    teacher = freeze(build_model(SMALL, seed=11))
    student = clone(teacher)
    assert not student.frozen and student.net.training
    x = batch(4)
    assert np.array_equal(extract_features(student, x), extract_features(teacher, x))
    opt = torch.optim.SGD(student.net.parameters(), lr=0.1)
    logits, _ = student.net(to_tensor(student, x))
    torch.nn.functional.cross_entropy(logits, torch.tensor([0, 1, 2, 3])).backward()
    opt.step()
    assert not np.array_equal(extract_features(student, x), extract_features(teacher, x))


def test_inference_restores_training_mode():
    m = build_model(SMALL)
    m.net.train()
    extract_features(m, batch(2))
    assert m.net.training


def test_checkpoint_round_trip(tmp_path):
    m = build_model(SMALL, seed=12)
    m.net.train()
    m.net(to_tensor(m, batch(4)))  # move the BatchNorm running statistics
    path = save_checkpoint(tmp_path / "m.pt", m, note="hello")
    loaded, payload = load_checkpoint(path)
    assert payload["note"] == "hello"
    assert parameter_hash(loaded) == parameter_hash(m)
    x = batch(3, seed=1)
    assert np.array_equal(extract_features(loaded, x), extract_features(m, x))
    frozen_path = save_checkpoint(tmp_path / "f.pt", freeze(m))
    assert load_checkpoint(frozen_path)[0].frozen


def test_checkpoint_version_checked(tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", build_model(SMALL))
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_parameter_count():
    m = build_model(SMALL)
    assert m.parameter_count() == sum(p.numel() for p in m.net.parameters()) > 0
