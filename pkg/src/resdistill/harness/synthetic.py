"""Procedural identity dataset.

Each identity is a fixed latent vector rendered as a stylised face: hair, a
face ellipse with an identity-specific fine stripe texture, eyes, brows, nose
and mouth. Skin and hair tones come from narrow ranges so that colour alone
separates identities only weakly; most of the identity signal sits in the
texture and the facial geometry, as it does for real faces.

Per-image jitter shifts the pose, scales brightness, redraws the background
colour and adds Gaussian noise. Generation is a pure function of the config.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .dataset import (
    DatasetManifest,
    ManifestRecord,
    compute_checksum,
    save_image,
    split_counts,
    write_manifest,
)

log = logging.getLogger(__name__)

_LATENT_STREAM = 0
_JITTER_STREAM = 1
_CHECK_STREAM = 2


class GeneratorCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class Jitter:
    pose_shift_px: float = 4.0
    brightness_range: float = 0.15
    noise_sigma: float = 0.02
    background_mix: float = 1.0  # 0 keeps the identity background, 1 draws a fresh colour per image


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_identities: int = 32
    images_per_identity: int = 40
    image_size: tuple[int, int] = (137, 180)
    jitter: Jitter = field(default_factory=Jitter)
    seed: int = 0
    val_fraction: float = 0.1
    gallery_fraction: float = 0.1
    probe_fraction: float = 0.1
    # the last k identities are never trained on and supply every gallery and probe image
    heldout_identities: int = 0

    def __post_init__(self):
        if self.num_identities < 2 or self.images_per_identity < 2:
            raise ValueError("need at least 2 identities with at least 2 images each")
        if self.heldout_identities and not 2 <= self.heldout_identities <= self.num_identities - 2:
            raise ValueError("heldout_identities must be 0 or leave at least 2 identities on each side")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError("image_size must be at least 16x16")
        object.__setattr__(self, "image_size", (int(h), int(w)))
        if isinstance(self.jitter, dict):
            object.__setattr__(self, "jitter", Jitter(**self.jitter))
        j = self.jitter
        if (j.pose_shift_px < 0 or j.noise_sigma < 0 or not 0 <= j.brightness_range < 1
                or not 0 <= j.background_mix <= 1):
            raise ValueError(f"invalid jitter {j}")
        split_counts(self.images_per_identity, [self.val_fraction, self.gallery_fraction, self.probe_fraction])


@dataclass(frozen=True)
class IdentityLatent:
    background: np.ndarray
    hair: np.ndarray
    skin: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    face_axes: tuple[float, float]  # (vertical, horizontal) in units of the short side
    hair_lift: float
    eye_y: float
    eye_spacing: float
    eye_radius: float
    brow_gap: float
    brow_tilt: float
    nose_length: float
    mouth_y: float
    mouth_half_width: float
    mouth_curve: float
    stripe_period: float  # pixels
    stripe_angle: float
    stripe_amplitude: float


def sample_latent(rng: np.random.Generator) -> IdentityLatent:
    return IdentityLatent(
        background=rng.uniform(0.05, 0.95, 3),
        hair=rng.uniform(0.15, 0.45) * np.array([1.0, rng.uniform(0.7, 0.9), rng.uniform(0.5, 0.8)]),
        skin=rng.uniform(0.6, 0.8) * np.array([1.0, rng.uniform(0.75, 0.85), rng.uniform(0.6, 0.7)]),
        iris=rng.uniform(0.0, 0.7, 3),
        lips=np.array([rng.uniform(0.4, 0.9), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.45)]),
        face_axes=(rng.uniform(0.36, 0.46), rng.uniform(0.25, 0.36)),
        hair_lift=rng.uniform(0.05, 0.2),
        eye_y=rng.uniform(0.04, 0.14),
        eye_spacing=rng.uniform(0.10, 0.19),
        eye_radius=rng.uniform(0.035, 0.065),
        brow_gap=rng.uniform(0.03, 0.08),
        brow_tilt=rng.uniform(-0.35, 0.35),
        nose_length=rng.uniform(0.08, 0.18),
        mouth_y=rng.uniform(0.16, 0.27),
        mouth_half_width=rng.uniform(0.06, 0.15),
        mouth_curve=rng.uniform(-0.6, 0.6),
        stripe_period=rng.uniform(6.0, 12.0),
        stripe_angle=rng.uniform(0.0, np.pi),
        stripe_amplitude=rng.uniform(0.15, 0.25),
    )


def _soft(signed_distance: np.ndarray) -> np.ndarray:
    # coverage of a pixel by a shape, with a one-pixel antialiased edge
    return np.clip(0.5 - signed_distance, 0.0, 1.0)[:, :, None]


def _ellipse(y, x, cy, cx, ry, rx):
    q = np.sqrt(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
    return (q - 1.0) * min(ry, rx)


def _paint(canvas, alpha, color):
    canvas *= 1.0 - alpha
    canvas += alpha * np.asarray(color, dtype=np.float64)


def render(latent: IdentityLatent, size: tuple[int, int], shift=(0.0, 0.0), brightness=1.0,
           noise: np.ndarray | None = None, background: np.ndarray | None = None) -> np.ndarray:
    """Float image in ``[0, 1]`` of shape ``size + (3,)``."""
    h, w = size
    s = float(min(h, w))
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2.0 + shift[0]
    cx = w / 2.0 + shift[1]
    L = latent
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = L.background if background is None else background

    fy, fx = L.face_axes[0] * s, L.face_axes[1] * s
    hair_d = _ellipse(y, x, cy - L.hair_lift * s, cx, fy, fx * 1.12)
    _paint(img, _soft(hair_d), L.hair)

    face_d = _ellipse(y, x, cy, cx, fy, fx)
    face_alpha = _soft(face_d)
    _paint(img, face_alpha, L.skin)
    ca, sa = np.cos(L.stripe_angle), np.sin(L.stripe_angle)
    phase = 2.0 * np.pi * ((x - cx) * ca + (y - cy) * sa) / L.stripe_period
    img += (face_alpha * L.stripe_amplitude) * np.sin(phase)[:, :, None]

    ey = cy - L.eye_y * s
    for side in (-1.0, 1.0):
        ex = cx + side * L.eye_spacing * s
        r = L.eye_radius * s
        _paint(img, _soft(_ellipse(y, x, ey, ex, r * 0.75, r * 1.4)), (0.95, 0.95, 0.95))
        _paint(img, _soft(_ellipse(y, x, ey, ex, r * 0.7, r * 0.7)), L.iris)
        # brow: thin tilted bar above the eye
        by = ey - r - L.brow_gap * s
        dy = (y - by) - side * L.brow_tilt * (x - ex)
        bar = np.maximum(np.abs(dy) - 0.018 * s, np.abs(x - ex) - r * 1.5)
        _paint(img, _soft(bar), L.hair * 0.6)

    nose = np.maximum(np.abs(x - cx) - 0.018 * s, np.abs(y - (cy + L.nose_length * s / 2)) - L.nose_length * s / 2)
    _paint(img, _soft(nose) * 0.6, L.skin * 0.6)

    my = cy + L.mouth_y * s
    half = L.mouth_half_width * s
    u = (x - cx) / half
    curve = my + L.mouth_curve * 0.08 * s * (u**2 - 0.5)
    mouth = np.maximum(np.abs(y - curve) - 0.022 * s, np.abs(x - cx) - half)
    _paint(img, _soft(mouth), L.lips)

    img *= brightness
    if noise is not None:
        img += noise
    return np.clip(img, 0.0, 1.0)


def _identity_rng(cfg: SyntheticDatasetConfig, identity: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _LATENT_STREAM, identity])


def render_identity_images(cfg: SyntheticDatasetConfig, identity: int) -> list[np.ndarray]:
    latent = sample_latent(_identity_rng(cfg, identity))
    j = cfg.jitter
    images = []
    for k in range(cfg.images_per_identity):
        rng = np.random.default_rng([cfg.seed, _JITTER_STREAM, identity, k])
        shift = rng.uniform(-1.0, 1.0, 2) * j.pose_shift_px
        brightness = 1.0 + rng.uniform(-1.0, 1.0) * j.brightness_range
        background = (1.0 - j.background_mix) * latent.background + j.background_mix * rng.uniform(0.05, 0.95, 3)
        noise = rng.normal(0.0, 1.0, cfg.image_size + (3,)) * j.noise_sigma if j.noise_sigma > 0 else None
        images.append(render(latent, cfg.image_size, tuple(shift), brightness, noise, background))
    return images


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def separation_check(images: list[list[np.ndarray]], seed: int, max_per_identity: int = 8) -> dict:
    """Mean intra- and inter-identity RMS pixel distance on quantised images."""
    rng = np.random.default_rng([seed, _CHECK_STREAM])
    sample = [[im.astype(np.float64) / 255.0 for im in group[:max_per_identity]] for group in images]

    def rms(a, b):
        return float(np.sqrt(np.mean((a - b) ** 2)))

    intra = [rms(g[a], g[b]) for g in sample for a in range(len(g)) for b in range(a + 1, len(g))]
    inter = []
    n = len(sample)
    for i in range(n):
        for _ in range(max_per_identity):
            j = int(rng.integers(0, n - 1))
            j += j >= i
            a = sample[i][int(rng.integers(0, len(sample[i])))]
            b = sample[j][int(rng.integers(0, len(sample[j])))]
            inter.append(rms(a, b))
    mean_intra, mean_inter = float(np.mean(intra)), float(np.mean(inter))
    return {"intra": mean_intra, "inter": mean_inter, "ratio": mean_intra / mean_inter}


def generator_dict(cfg: SyntheticDatasetConfig) -> dict:
    d = asdict(cfg)
    d["image_size"] = list(cfg.image_size)
    return d


def generate_synthetic(cfg: SyntheticDatasetConfig, out_dir: Union[str, Path]) -> DatasetManifest:
    """Render the dataset into ``out_dir`` and write its manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    n_val, n_gal, n_probe, _ = split_counts(
        cfg.images_per_identity, [cfg.val_fraction, cfg.gallery_fraction, cfg.probe_fraction]
    )
    n = cfg.images_per_identity
    split_of = ["val"] * n_val + ["gallery"] * n_gal + ["probe"] * n_probe
    split_of += ["train"] * (n - len(split_of))
    if cfg.heldout_identities:
        train_split = ["val"] * n_val + ["train"] * (n - n_val)
        eval_split = ["gallery"] * (n // 2) + ["probe"] * (n - n // 2)

    records = []
    quantized = []
    width = max(3, len(str(cfg.num_identities - 1)))
    for identity in range(cfg.num_identities):
        group = [_quantize(im) for im in render_identity_images(cfg, identity)]
        quantized.append(group)
        folder = out / "images" / f"id{identity:0{width}d}"
        folder.mkdir(exist_ok=True)
        for k, im in enumerate(group):
            rel = f"images/id{identity:0{width}d}/{k:04d}.png"
            save_image(out / rel, im.astype(np.float64) / 255.0)
            split = split_of[k]
            if cfg.heldout_identities:
                heldout = identity >= cfg.num_identities - cfg.heldout_identities
                split = (eval_split if heldout else train_split)[k]
            records.append(ManifestRecord(rel, identity, identity * cfg.images_per_identity + k, split))

    check = separation_check(quantized, cfg.seed)
    if not check["ratio"] < 1.0:
        raise GeneratorCheckError(f"intra/inter distance ratio {check['ratio']:.3f} is not below 1")
    log.info("generated %d images, intra/inter ratio %.3f", len(records), check["ratio"])

    manifest = DatasetManifest(
        records=records,
        num_identities=cfg.num_identities,
        identity_names=[f"id{i:0{width}d}" for i in range(cfg.num_identities)],
        extra={"generator": generator_dict(cfg), "separation_check": check},
    )
    manifest.checksum = compute_checksum(out, records)
    manifest.check()
    write_manifest(out, manifest)
    return manifest
