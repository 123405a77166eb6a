"""Templates and cosine scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from ..model import Embedding


class ProtocolViolation(ValueError):
    """Inputs break a protocol precondition (e.g. a probe with no mate)."""


class DegenerateTemplate(ValueError):
    """Aggregated embedding has zero norm."""


@dataclass(frozen=True)
class Template:
    subject_id: int
    vector: np.ndarray
    media_count: int = 1

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if self.media_count < 1:
            raise ValueError("media_count must be >= 1")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("template vector must have unit norm")
        object.__setattr__(self, "vector", v)


def _as_vector(e: Union[Embedding, np.ndarray, Sequence[float]]) -> np.ndarray:
    return np.asarray(e.vector if isinstance(e, Embedding) else e, dtype=np.float64)


def build_template(embs: Sequence[Union[Embedding, np.ndarray]], subject_id: int = -1) -> Template:
    """Mean of the media embeddings, L2-normalised."""
    if len(embs) == 0:
        raise ValueError("cannot build a template from no embeddings")
    vectors = [_as_vector(e) for e in embs]
    if len({v.shape for v in vectors}) != 1 or vectors[0].ndim != 1:
        raise ValueError("embeddings must be 1-D with equal dimensions")
    mean = np.mean(vectors, axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateTemplate(f"mean embedding of subject {subject_id} has zero norm")
    return Template(subject_id, mean / norm, len(vectors))


def similarity(a: Template, b: Template) -> float:
    if a.vector.shape != b.vector.shape:
        raise ValueError(f"dimension mismatch: {a.vector.shape} vs {b.vector.shape}")
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateTemplate("zero-norm embedding row")
    return x / norms


def score_matrix(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarities between raw embedding rows, ``P x G``."""
    return np.clip(normalize_rows(probes) @ normalize_rows(gallery).T, -1.0, 1.0)


def stack(templates: Sequence[Template]) -> np.ndarray:
    return np.stack([t.vector for t in templates])


def templates_by_subject(embeddings: np.ndarray, subject_ids: Sequence[int]) -> list[Template]:
    """One template per distinct subject, in ascending subject order."""
    subject_ids = np.asarray(subject_ids)
    return [
        build_template(list(embeddings[subject_ids == s]), int(s))
        for s in np.unique(subject_ids)
    ]
