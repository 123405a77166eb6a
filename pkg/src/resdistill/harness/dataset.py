"""Dataset manifests and loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from ..imaging import ImageRecord

SPLITS = ("train", "val", "probe", "gallery")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ManifestRecord:
    path: str  # relative to the manifest directory
    identity: int
    media_id: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    num_identities: int
    checksum: str = ""
    identity_names: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def check(self) -> None:
        train_ids = {r.identity for r in self.split("train")}
        val_ids = {r.identity for r in self.split("val")}
        missing = sorted(val_ids - train_ids)
        if missing:
            raise ValueError(f"validation identities without training images: {missing}")
        probe_paths = {r.path for r in self.split("probe")}
        if probe_paths & {r.path for r in self.split("gallery")}:
            raise ValueError("probe and gallery splits share images")

    def to_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "checksum": self.checksum,
            "identity_names": list(self.identity_names),
            "records": [asdict(r) for r in self.records],
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            records=[ManifestRecord(**r) for r in d["records"]],
            num_identities=int(d["num_identities"]),
            checksum=d.get("checksum", ""),
            identity_names=list(d.get("identity_names", [])),
            extra=dict(d.get("extra", {})),
        )


def compute_checksum(root: Union[str, Path], records: Sequence[ManifestRecord]) -> str:
    """SHA-256 over record fields and the bytes of every referenced file."""
    root = Path(root)
    h = hashlib.sha256()
    for r in sorted(records, key=lambda r: r.path):
        h.update(f"{r.path}\0{r.identity}\0{r.media_id}\0{r.split}\n".encode())
        h.update(hashlib.sha256((root / r.path).read_bytes()).digest())
    return h.hexdigest()


def write_manifest(root: Union[str, Path], manifest: DatasetManifest) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> tuple[Path, DatasetManifest]:
    """Accepts the manifest file or its directory; returns ``(root, manifest)``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return path.parent, DatasetManifest.from_dict(json.loads(path.read_text()))


def load_image(path: Union[str, Path], channels: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if channels == 1 or (channels is None and im.mode in ("L", "I", "F", "I;16")):
            arr = np.asarray(im.convert("L"), dtype=np.float32)[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


@dataclass
class Dataset:
    """Loaded images grouped by split."""

    manifest: DatasetManifest
    train: list[ImageRecord]
    val: list[ImageRecord]
    probe: list[ImageRecord]
    gallery: list[ImageRecord]
    paths: dict = field(default_factory=dict)


def load_dataset(path: Union[str, Path], channels: Optional[int] = 3) -> Dataset:
    root, manifest = read_manifest(path)
    manifest.check()
    groups: dict[str, list[ImageRecord]] = {s: [] for s in SPLITS}
    paths: dict[str, list[str]] = {s: [] for s in SPLITS}
    for r in manifest.records:
        pixels = load_image(root / r.path, channels)
        groups[r.split].append(ImageRecord(pixels, r.identity, r.media_id))
        paths[r.split].append(r.path)
    return Dataset(manifest, groups["train"], groups["val"], groups["probe"], groups["gallery"], paths)


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Sizes of consecutive chunks of ``n`` items; the remainder is last.

    Chunk boundaries are ``round(cumulative_fraction * n)`` (half to even).
    """
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError(f"invalid split fractions {fractions}")
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(min(n, round(acc * n)))
    sizes = [b - a for a, b in zip(bounds[:-1], bounds[1:])]
    return sizes + [n - bounds[-1]]
