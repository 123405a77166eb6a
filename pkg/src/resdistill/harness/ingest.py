"""Ingest a ``root/<identity>/<image>`` directory tree into a manifest."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from PIL import Image, UnidentifiedImageError

from .dataset import DatasetManifest, ManifestRecord, compute_checksum, split_counts, write_manifest

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
_FRAME_SUFFIX = re.compile(r"[_\-.]?\d+$")


@dataclass(frozen=True)
class SplitRules:
    """Per-identity split of media groups, in this order: gallery, train, val.

    Whatever is left over becomes probe media. The default puts half of each
    subject's media in the gallery and the rest in the probe set.
    """

    gallery_fraction: float = 0.5
    train_fraction: float = 0.0
    val_fraction: float = 0.0

    def __post_init__(self):
        split_counts(1, [self.gallery_fraction, self.train_fraction, self.val_fraction])


def media_key(path: Path) -> str:
    """Files whose stems differ only by a trailing frame number share a media id."""
    stem = path.stem
    key = _FRAME_SUFFIX.sub("", stem)
    return key or stem


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            im.load()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        log.warning("skipping unreadable image %s: %s", path, exc)
        return False


def ingest(root: Union[str, Path], rules: SplitRules = SplitRules(), write: bool = False) -> DatasetManifest:
    """Label identities in sorted-name order and split their media.

    Raises ``ValueError`` when no identity directory holds a readable image;
    in that case nothing is written.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    identity_dirs = sorted(p for p in root.iterdir() if p.is_dir())

    records = []
    names = []
    skipped = []
    next_media = 0
    for ident_dir in identity_dirs:
        files = sorted(p for p in ident_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        good = []
        for f in files:
            if _readable(f):
                good.append(f)
            else:
                skipped.append(str(f.relative_to(root)))
        if not good:
            continue
        label = len(names)
        names.append(ident_dir.name)

        groups: dict[str, list[Path]] = {}
        for f in good:
            groups.setdefault(media_key(f), []).append(f)
        keys = sorted(groups)
        n_gal, n_train, n_val, _ = split_counts(
            len(keys), [rules.gallery_fraction, rules.train_fraction, rules.val_fraction]
        )
        split_of = ["gallery"] * n_gal + ["train"] * n_train + ["val"] * n_val
        split_of += ["probe"] * (len(keys) - len(split_of))
        for key, split in zip(keys, split_of):
            for f in groups[key]:
                records.append(ManifestRecord(f.relative_to(root).as_posix(), label, next_media, split))
            next_media += 1

    if skipped:
        log.warning("excluded %d unreadable file(s): %s", len(skipped), ", ".join(skipped))
    if not records:
        raise ValueError(f"no readable identity images under {root}")

    manifest = DatasetManifest(
        records=records,
        num_identities=len(names),
        identity_names=names,
        extra={"excluded": skipped} if skipped else {},
    )
    manifest.checksum = compute_checksum(root, records)
    manifest.check()
    if write:
        write_manifest(root, manifest)
    return manifest
