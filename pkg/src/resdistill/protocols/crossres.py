"""Cross-resolution verification matrices and pair-list files."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..imaging import ImageRecord, ResolutionSet, prepare_eval_input
from ..model import ModelHandle, extract_features
from .curves import pair_scores, roc, split_scores, tar_at_far

Resolution = Optional[int]  # None = native resolution

EVAL_RESOLUTIONS: tuple[Resolution, ...] = (8, 16, 24, 32, 64, 128, None)
GENUINE, IMPOSTOR = "genuine", "impostor"


def resolution_label(r: Resolution) -> str:
    return "full" if r is None else str(int(r))


def parse_resolution(label: Union[str, int, None]) -> Resolution:
    if label is None:
        return None
    if isinstance(label, str) and label.strip().lower() in ("full", "native", "none"):
        return None
    value = int(label)
    if value < 1:
        raise ValueError(f"resolution must be positive, got {label!r}")
    return value


def sort_resolutions(resolutions: Sequence[Resolution]) -> list[Resolution]:
    """Ascending, native resolution last, duplicates dropped."""
    numeric = sorted({int(r) for r in resolutions if r is not None})
    return numeric + ([None] if any(r is None for r in resolutions) else [])


@dataclass
class PairSet:
    """Verification pairs between two image lists.

    ``pairs[k] = (probe_index, gallery_index)``; ``genuine[k]`` marks mates.
    """

    probes: list[ImageRecord]
    gallery: list[ImageRecord]
    pairs: np.ndarray
    genuine: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        if self.pairs.shape[0] == 0:
            raise ValueError("pair list is empty")
        if self.genuine.shape != (self.pairs.shape[0],):
            raise ValueError("one label per pair required")
        if not self.genuine.any() or self.genuine.all():
            raise ValueError("pair list needs both genuine and impostor pairs")

    @classmethod
    def all_pairs(cls, probes: Sequence[ImageRecord], gallery: Sequence[ImageRecord]) -> "PairSet":
        p, g = np.meshgrid(np.arange(len(probes)), np.arange(len(gallery)), indexing="ij")
        pairs = np.stack([p.ravel(), g.ravel()], axis=1)
        pid = np.array([r.identity for r in probes])
        gid = np.array([r.identity for r in gallery])
        return cls(list(probes), list(gallery), pairs, pid[pairs[:, 0]] == gid[pairs[:, 1]])


def write_pair_list(path: Union[str, Path], pairs: np.ndarray, genuine: np.ndarray,
                    probe_ids: Sequence, gallery_ids: Sequence) -> None:
    """CSV ``probe_template_id,gallery_template_id,label``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_template_id", "gallery_template_id", "label"])
        for (a, b), g in zip(np.asarray(pairs), np.asarray(genuine)):
            w.writerow([probe_ids[a], gallery_ids[b], GENUINE if g else IMPOSTOR])


def read_pair_list(path: Union[str, Path]) -> list[tuple[str, str, bool]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["probe_template_id", "gallery_template_id", "label"]
        if reader.fieldnames != expected:
            raise ValueError(f"pair list header must be {','.join(expected)}")
        for line, row in enumerate(reader, start=2):
            label = row["label"].strip().lower()
            if label not in (GENUINE, IMPOSTOR):
                raise ValueError(f"{path}:{line}: label must be genuine or impostor, got {row['label']!r}")
            rows.append((row["probe_template_id"], row["gallery_template_id"], label == GENUINE))
    return rows


def embed_images(
    model: ModelHandle,
    images: Sequence[ImageRecord],
    resolution: Resolution,
    batch_size: int = 64,
    jobs: int = 1,
) -> np.ndarray:
    """Embeddings of ``images`` after degradation to ``resolution``."""
    out = []
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            prep = (lambda r: prepare_eval_input(r, resolution))
            arrays = list(pool.map(prep, chunk)) if pool else [prep(r) for r in chunk]
            out.append(extract_features(model, np.stack(arrays), batch_size=batch_size))
    finally:
        if pool is not None:
            pool.shutdown()
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class CrossResMatrix:
    """Lower-triangular TAR@FAR table.

    Row ``i`` / column ``j <= i``: probes at ``resolutions[j]`` against the
    gallery at ``resolutions[i]``.
    """

    resolutions: tuple[Resolution, ...]
    tar: tuple[tuple[float, ...], ...]
    far_unreachable: tuple[tuple[bool, ...], ...]
    far_target: float

    def entry(self, a: Resolution, b: Resolution) -> float:
        i, j = self.resolutions.index(a), self.resolutions.index(b)
        if j > i:
            i, j = j, i
        return self.tar[i][j]

    @property
    def labels(self) -> list[str]:
        return [resolution_label(r) for r in self.resolutions]

    def to_dict(self) -> dict:
        return {
            "resolutions": self.labels,
            "far_target": self.far_target,
            "rows": [
                {"resolution": label, "tar": list(row), "far_unreachable": list(flags)}
                for label, row, flags in zip(self.labels, self.tar, self.far_unreachable)
            ],
        }

    def to_markdown(self, reference: Optional["CrossResMatrix"] = None) -> str:
        """Table with percentages; ``reference`` values go in brackets."""
        labels = self.labels
        lines = [
            "| | " + " | ".join(labels) + " |",
            "|---|" + "---|" * len(labels),
        ]
        for i, label in enumerate(labels):
            cells = []
            for j in range(len(labels)):
                if j > i:
                    cells.append("")
                    continue
                cell = f"{100 * self.tar[i][j]:.1f}"
                if reference is not None:
                    cell += f" ({100 * reference.tar[i][j]:.1f})"
                cells.append(cell)
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[list[str]]:
        rows = [["resolution"] + self.labels]
        for i, label in enumerate(self.labels):
            rows.append([label] + [repr(self.tar[i][j]) if j <= i else "" for j in range(len(self.labels))])
        return rows


def matrix_from_embeddings(
    probe_emb: dict,
    gallery_emb: dict,
    pairs: np.ndarray,
    genuine: np.ndarray,
    resolutions: Sequence[Resolution],
    far_target: float,
) -> CrossResMatrix:
    """Fill the lower triangle from per-resolution embedding tables."""
    resolutions = tuple(resolutions)
    tars, flags = [], []
    for i, r_row in enumerate(resolutions):
        row_t, row_f = [], []
        for r_col in resolutions[: i + 1]:
            scores = pair_scores(probe_emb[r_col], gallery_emb[r_row], pairs)
            op = tar_at_far(roc(*split_scores(scores, genuine)), far_target)
            row_t.append(op.tar)
            row_f.append(op.far_unreachable)
        tars.append(tuple(row_t))
        flags.append(tuple(row_f))
    return CrossResMatrix(resolutions, tuple(tars), tuple(flags), float(far_target))


def cross_resolution_matrix(
    model: ModelHandle,
    pairs: PairSet,
    resolutions: Union[ResolutionSet, Sequence[Resolution]] = EVAL_RESOLUTIONS,
    far_target: float = 1e-3,
    jobs: int = 1,
) -> CrossResMatrix:
    """TAR@FAR for every unordered resolution pair, diagonal included."""
    if isinstance(resolutions, ResolutionSet):
        resolutions = resolutions.values
    resolutions = sort_resolutions(resolutions)
    if not resolutions:
        raise ValueError("no resolutions given")
    probe_emb = {r: embed_images(model, pairs.probes, r, jobs=jobs) for r in resolutions}
    gallery_emb = {r: embed_images(model, pairs.gallery, r, jobs=jobs) for r in resolutions}
    return matrix_from_embeddings(probe_emb, gallery_emb, pairs.pairs, pairs.genuine, resolutions, far_target)
