"""Image degradation and geometry pipeline.

All resizing goes through one separable bilinear resampler whose weights
follow PIL's ``Image.BILINEAR`` convention: a triangle filter sampled at
pixel centres, widened by the scale factor when downsampling (so the
downsampling direction is antialiased), and renormalised per output pixel.
Because the weights are non-negative and sum to one, outputs of ``[0, 1]``
inputs stay in ``[0, 1]`` up to float rounding; results are clamped anyway.

Images are ``H x W x C`` float32 arrays with intensities in ``[0, 1]``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Union

import numpy as np

NETWORK_INPUT = 224
RESIZE_SHORTEST = 256
VALIDATION_RESOLUTION = 24


@dataclass(frozen=True)
class ImageRecord:
    """One labelled image.

    ``media_id`` groups stills/frames that come from the same source.
    """

    pixels: np.ndarray
    identity: int
    media_id: int = 0

    def __post_init__(self):
        pixels = self.pixels
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ValueError(f"expected H x W x C with C in (1, 3), got {self.pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if pixels.dtype != np.float32:
            pixels = pixels.astype(np.float32)
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        if self.identity < 0:
            raise ValueError("identity label must be >= 0")
        object.__setattr__(self, "pixels", pixels)

    @property
    def native_resolution(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class ResolutionSet:
    """Powers of two ``2**lo .. 2**hi`` used by the training sampler."""

    exponent_lo: int = 3
    exponent_hi: int = 8

    def __post_init__(self):
        if self.exponent_lo < 0 or self.exponent_hi < self.exponent_lo:
            raise ValueError(f"invalid exponent range [{self.exponent_lo}, {self.exponent_hi}]")

    @property
    def values(self) -> tuple[int, ...]:
        return tuple(2**e for e in range(self.exponent_lo, self.exponent_hi + 1))


@dataclass(frozen=True)
class CurriculumState:
    step: int
    total_steps: int

    def __post_init__(self):
        # validates the arguments
        degrade_probability(self.step, self.total_steps)

    @property
    def degrade_probability(self) -> float:
        return degrade_probability(self.step, self.total_steps)


@dataclass(frozen=True)
class TrainView:
    teacher_input: np.ndarray
    student_input: np.ndarray
    degraded: bool
    degraded_resolution: Optional[int] = None
    crop_box: tuple[int, int] = field(default=(0, 0), compare=False)


def sample_resolution(rng: np.random.Generator, rset: ResolutionSet = ResolutionSet()) -> int:
    """Draw ``2**e`` with ``e`` uniform over the configured exponent range."""
    e = int(rng.integers(rset.exponent_lo, rset.exponent_hi + 1))
    return 2**e


def degrade_probability(step: int, total_steps: int) -> float:
    """Linear curriculum: probability of feeding a degraded image at ``step``."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return min(step / total_steps, 1.0)


@functools.lru_cache(maxsize=512)
def bilinear_weights(in_size: int, out_size: int) -> np.ndarray:
    """``out_size x in_size`` resampling matrix (PIL bilinear convention)."""
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be positive")
    scale = in_size / out_size
    filterscale = max(scale, 1.0)
    support = filterscale
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), in_size)
        taps = np.arange(lo, hi, dtype=np.float64)
        k = np.maximum(0.0, 1.0 - np.abs((taps - center + 0.5) / filterscale))
        total = k.sum()
        if total > 0:
            k /= total
        weights[i, lo:hi] = k
    weights = weights.astype(np.float32)
    weights.setflags(write=False)
    return weights


def _apply(pixels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # (h, H) @ (H, W, C) @ (W, w) as two tensordots; result h x w x C
    tmp = np.tensordot(pixels, cols, axes=([1], [1]))  # H x C x w
    out = np.tensordot(rows, tmp, axes=([1], [0]))  # h x C x w
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` array to ``size == (h, w)``."""
    h, w = size
    H, W = pixels.shape[:2]
    if (h, w) == (H, W):
        return pixels.copy()
    return _apply(pixels, bilinear_weights(H, h), bilinear_weights(W, w))


def resize_crop(pixels: np.ndarray, size: tuple[int, int], top: int, left: int, crop: int) -> np.ndarray:
    """Resize to ``size`` then take the ``crop x crop`` window at ``(top, left)``.

    Only the rows/columns inside the window are computed; the result equals
    ``resize(pixels, size)[top:top+crop, left:left+crop]``.
    """
    h, w = size
    if top < 0 or left < 0 or top + crop > h or left + crop > w:
        raise ValueError(f"crop window ({top}, {left}, {crop}) outside {size}")
    H, W = pixels.shape[:2]
    rows = bilinear_weights(H, h)[top : top + crop]
    cols = bilinear_weights(W, w)[left : left + crop]
    return _apply(pixels, rows, cols)


def shortest_side_shape(height: int, width: int, target: int) -> tuple[int, int]:
    """Shape with shortest side ``target``, aspect ratio kept.

    The long side is rounded half-to-even, minimum 1.
    """
    if height <= width:
        return target, max(1, round(Fraction(width * target, height)))
    return max(1, round(Fraction(height * target, width))), target


def degrade(img: ImageRecord, target: int) -> ImageRecord:
    """Downsample so the shortest side is ``target``, then resize back.

    A no-op when ``target`` is not smaller than the shortest side.
    """
    if int(target) != target or target < 1:
        raise ValueError(f"target resolution must be a positive integer, got {target!r}")
    H, W = img.native_resolution
    if target >= min(H, W):
        return img
    small = resize(img.pixels, shortest_side_shape(H, W, target))
    back = resize(small, (H, W))
    np.clip(back, 0.0, 1.0, out=back)
    return replace(img, pixels=back)


def center_crop_offsets(height: int, width: int, crop: int = NETWORK_INPUT) -> tuple[int, int]:
    return (height - crop) // 2, (width - crop) // 2


def prepare_eval_input(img: ImageRecord, target: Optional[int] = None) -> np.ndarray:
    """Deterministic network input: optional degradation, resize, centre crop."""
    if target is not None:
        img = degrade(img, target)
    H, W = img.native_resolution
    size = shortest_side_shape(H, W, RESIZE_SHORTEST)
    top, left = center_crop_offsets(*size)
    return resize_crop(img.pixels, size, top, left, NETWORK_INPUT)


def prepare_train_view(
    img: ImageRecord,
    state: Union[CurriculumState, float],
    rng: np.random.Generator,
    rset: ResolutionSet = ResolutionSet(),
) -> TrainView:
    """Teacher/student inputs for one training image.

    ``state`` is either a curriculum state or a fixed degradation
    probability. Draw order from ``rng``: Bernoulli, resolution (only when
    degrading), crop top, crop left. Both inputs share the crop window.
    """
    p = state.degrade_probability if isinstance(state, CurriculumState) else float(state)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"degradation probability must be in [0, 1], got {p}")
    degraded = bool(rng.random() < p)
    resolution = sample_resolution(rng, rset) if degraded else None

    H, W = img.native_resolution
    size = shortest_side_shape(H, W, RESIZE_SHORTEST)
    top = int(rng.integers(0, size[0] - NETWORK_INPUT + 1))
    left = int(rng.integers(0, size[1] - NETWORK_INPUT + 1))

    teacher = resize_crop(img.pixels, size, top, left, NETWORK_INPUT)
    if degraded:
        student = resize_crop(degrade(img, resolution).pixels, size, top, left, NETWORK_INPUT)
    else:
        student = teacher
    return TrainView(teacher, student, degraded, resolution, (top, left))
