from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import resdistill.imaging as imaging
from resdistill.imaging import (
    CurriculumState,
    ImageRecord,
    ResolutionSet,
    bilinear_weights,
    degrade,
    degrade_probability,
    prepare_eval_input,
    prepare_train_view,
    resize,
    resize_crop,
    sample_resolution,
    shortest_side_shape,
)

import oracles


def record(h, w, seed=0, c=3):
    rng = np.random.default_rng(seed)
    return ImageRecord(rng.uniform(0, 1, (h, w, c)).astype(np.float32), identity=0)


class FixedExponent:
    """Stands in for a Generator whose integer draw is known."""

    def __init__(self, e):
        self.e = e

    def integers(self, lo, hi):
        assert lo <= self.e < hi
        return self.e


# sampler and schedule


def test_sampler_endpoints():
    assert sample_resolution(FixedExponent(3)) == 8
    assert sample_resolution(FixedExponent(8)) == 256
    assert ResolutionSet().values == (8, 16, 32, 64, 128, 256)


def test_sampler_uniform_chi_square():
    rng = np.random.default_rng(12345)
    draws = [sample_resolution(rng) for _ in range(60_000)]
    values = ResolutionSet().values
    counts = [draws.count(v) for v in values]
    assert sum(counts) == 60_000
    _, p = oracles.chi_square_uniform(counts)
    assert p > 0.01


def test_resolution_set_validation():
    with pytest.raises(ValueError):
        ResolutionSet(5, 4)
    assert ResolutionSet(2, 2).values == (4,)


def test_degrade_probability_examples():
    assert degrade_probability(0, 1000) == 0.0
    assert degrade_probability(1000, 1000) == 1.0
    assert degrade_probability(500, 1000) == 0.5
    assert degrade_probability(5000, 1000) == 1.0
    with pytest.raises(ValueError):
        degrade_probability(0, 0)
    with pytest.raises(ValueError):
        degrade_probability(-1, 10)


@given(st.integers(1, 10**6), st.integers(0, 2 * 10**6))
def test_degrade_probability_is_clamped_linear(total, step):
    p = degrade_probability(step, total)
    assert p == (step / total if step < total else 1.0)
    assert 0.0 <= p <= 1.0
    if step < total:
        assert p <= degrade_probability(step + 1, total)


def test_curriculum_state_property():
    assert CurriculumState(250, 1000).degrade_probability == 0.25
    with pytest.raises(ValueError):
        CurriculumState(1, 0)


# resampling


@pytest.mark.parametrize("src,dst", [((100, 150), (8, 12)), ((8, 12), (100, 150)), ((137, 180), (256, 336)),
                                     ((64, 64), (16, 16)), ((31, 17), (13, 40))])
def test_resize_matches_pillow_bilinear(src, dst):
    img = record(*src, seed=1).pixels
    ours = resize(img, dst)
    ref = oracles.bilinear_pil_reference(img, dst)
    assert ours.shape == dst + (3,)
    np.testing.assert_allclose(ours, ref, atol=2e-5)


def test_weights_are_convex_combinations():
    for n_in, n_out in [(100, 8), (8, 100), (137, 256), (5, 5)]:
        w = bilinear_weights(n_in, n_out)
        assert w.shape == (n_out, n_in)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 30), st.integers(1, 30))
def test_resize_stays_in_unit_range(h, w, oh, ow):
    img = record(h, w, seed=h * 41 + w).pixels
    out = resize(img, (oh, ow))
    assert out.shape == (oh, ow, 3)
    assert out.min() >= -1e-6 and out.max() <= 1 + 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 60), st.integers(10, 60), st.data())
def test_resize_crop_equals_resize_then_slice(h, w, data):
    img = record(h, w, seed=3).pixels
    size = (data.draw(st.integers(8, 70)), data.draw(st.integers(8, 70)))
    crop = data.draw(st.integers(1, min(size)))
    top = data.draw(st.integers(0, size[0] - crop))
    left = data.draw(st.integers(0, size[1] - crop))
    full = resize(img, size)
    np.testing.assert_allclose(resize_crop(img, size, top, left, crop), full[top:top + crop, left:left + crop],
                               atol=1e-6)


def test_resize_crop_rejects_bad_window():
    with pytest.raises(ValueError):
        resize_crop(record(10, 10).pixels, (20, 20), 5, 0, 16)


@given(st.integers(1, 2000), st.integers(1, 2000), st.integers(1, 512))
def test_shortest_side_shape(h, w, target):
    oh, ow = shortest_side_shape(h, w, target)
    if h <= w:
        assert oh == target and abs(Fraction(ow) - Fraction(w * target, h)) <= Fraction(1, 2)
    else:
        assert ow == target and abs(Fraction(oh) - Fraction(h * target, w)) <= Fraction(1, 2)
    assert min(oh, ow) >= 1


# degradation


def _instrument_resize(monkeypatch):
    calls = []
    real = imaging.resize

    def spy(pixels, size):
        out = real(pixels, size)
        calls.append((pixels.shape[:2], tuple(size), out.shape[:2]))
        return out

    monkeypatch.setattr(imaging, "resize", spy)
    return calls


def test_degrade_intermediate_shape_100x150(monkeypatch):
    calls = _instrument_resize(monkeypatch)
    out = degrade(record(100, 150), 8)
    # 150 * 8 / 100 = 12 exactly
    assert [c[2] for c in calls] == [(8, 12), (100, 150)]
    assert out.native_resolution == (100, 150)


def test_degrade_square(monkeypatch):
    calls = _instrument_resize(monkeypatch)
    out = degrade(record(64, 64), 16)
    assert [c[2] for c in calls] == [(16, 16), (64, 64)]
    assert out.native_resolution == (64, 64)


def test_degrade_noop_when_target_not_smaller(monkeypatch):
    calls = _instrument_resize(monkeypatch)
    img = record(137, 180)
    for target in (137, 256):
        out = degrade(img, target)
        assert np.array_equal(out.pixels, img.pixels)
    assert calls == []


def test_degrade_keeps_label_and_range():
    img = ImageRecord(record(40, 50).pixels, identity=4, media_id=9)
    out = degrade(img, 8)
    assert (out.identity, out.media_id) == (4, 9)
    assert out.pixels.dtype == np.float32
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_degrade_removes_detail():
    # a one-pixel checkerboard cannot survive an 8 px bottleneck
    y, x = np.mgrid[0:64, 0:64]
    board = ((x + y) % 2).astype(np.float32)[:, :, None]
    out = degrade(ImageRecord(board, 0), 8).pixels
    assert out.std() < 0.05 < board.std()


def test_degrade_rejects_bad_target():
    with pytest.raises(ValueError):
        degrade(record(10, 10), 0)
    with pytest.raises(ValueError):
        degrade(record(10, 10), 2.5)


def test_image_record_validation():
    with pytest.raises(ValueError):
        ImageRecord(np.full((4, 4, 3), 2.0), 0)
    with pytest.raises(ValueError):
        ImageRecord(np.zeros((4, 4, 2)), 0)
    with pytest.raises(ValueError):
        ImageRecord(np.zeros((4, 4, 3)), -1)
    assert ImageRecord(np.zeros((4, 5)), 0).pixels.shape == (4, 5, 1)


# network inputs


def _instrument_crop(monkeypatch):
    calls = []
    real = imaging.resize_crop

    def spy(pixels, size, top, left, crop):
        calls.append((tuple(size), top, left, crop))
        return real(pixels, size, top, left, crop)

    monkeypatch.setattr(imaging, "resize_crop", spy)
    return calls


def test_eval_input_offsets_300x400(monkeypatch):
    calls = _instrument_crop(monkeypatch)
    out = prepare_eval_input(record(300, 400))
    assert out.shape == (224, 224, 3)
    expected_left = int((Fraction(256 * 400, 300) - 224) // 2)
    assert calls == [((256, 341), 16, expected_left, 224)]
    assert expected_left == 58


def test_eval_input_offsets_square(monkeypatch):
    calls = _instrument_crop(monkeypatch)
    prepare_eval_input(record(256, 256))
    assert calls == [((256, 256), 16, 16, 224)]


def test_eval_input_composition_identity():
    img = record(137, 180, seed=5)
    assert np.array_equal(prepare_eval_input(img, 24), prepare_eval_input(degrade(img, 24)))


def test_eval_input_grayscale():
    out = prepare_eval_input(record(50, 60, c=1))
    assert out.shape == (224, 224, 1)


def test_train_view_without_degradation():
    v = prepare_train_view(record(137, 180), CurriculumState(0, 100), np.random.default_rng(0))
    assert not v.degraded and v.degraded_resolution is None
    assert np.array_equal(v.teacher_input, v.student_input)
    assert v.teacher_input.shape == (224, 224, 3)


def test_train_view_full_degradation():
    for seed in range(20):
        v = prepare_train_view(record(137, 180), CurriculumState(100, 100), np.random.default_rng(seed))
        assert v.degraded and v.degraded_resolution in ResolutionSet().values


def test_train_view_shares_crop_window(monkeypatch):
    calls = _instrument_crop(monkeypatch)
    img = record(137, 180)
    v = prepare_train_view(img, 1.0, np.random.default_rng(3))
    assert len(calls) == 2 and calls[0][1:] == calls[1][1:]
    assert v.crop_box == calls[0][1:3]


def test_train_view_deterministic():
    img = record(137, 180, seed=2)
    a = prepare_train_view(img, 0.5, np.random.default_rng(7))
    b = prepare_train_view(img, 0.5, np.random.default_rng(7))
    assert a.degraded == b.degraded and a.degraded_resolution == b.degraded_resolution
    assert a.crop_box == b.crop_box
    assert np.array_equal(a.teacher_input, b.teacher_input) and np.array_equal(a.student_input, b.student_input)


def test_train_view_rejects_bad_probability():
    with pytest.raises(ValueError):
        prepare_train_view(record(30, 30), 1.5, np.random.default_rng(0))


def test_train_view_teacher_matches_eval_geometry():
    # at the central crop the teacher view equals the deterministic eval input
    img = record(256, 256, seed=4)

    class Centre:
        def random(self):
            return 1.0

        def integers(self, lo, hi):
            return 16

    v = prepare_train_view(img, 0.0, Centre())
    assert np.array_equal(v.teacher_input, prepare_eval_input(img))
