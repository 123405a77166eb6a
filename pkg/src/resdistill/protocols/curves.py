"""Threshold-swept biometric curves and their operating points.

Acceptance is ``score >= threshold`` throughout. Every curve is an exact step
function: thresholds are the distinct observed scores plus the two sentinels
``-inf`` (accept everything) and ``+inf`` (reject everything), and every rate
is an integer count divided by its population size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .templates import ProtocolViolation, Template, score_matrix, stack


def _scores(values, name: str) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} scores are empty")
    if np.any(np.isnan(a)):
        raise ValueError(f"{name} scores contain NaN")
    return a


def _sweep_thresholds(*score_sets: np.ndarray) -> np.ndarray:
    distinct = np.unique(np.concatenate(score_sets))
    return np.concatenate([[-np.inf], distinct, [np.inf]])


def _count_at_or_above(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return sorted_scores.size - np.searchsorted(sorted_scores, thresholds, side="left")


def _max_count(rate: float, population: int) -> int:
    """Largest integer k with k / population <= rate, exactly.

    The comparison uses the exact binary value of ``rate``: ``0.1`` and
    ``1e-3`` sit just above their decimal values, while ``1/3`` sits just
    below one third and so admits no false accept out of three.
    """
    return math.floor(Fraction(rate) * population)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # ascending, sentinels included
    true_accepts: np.ndarray
    false_accepts: np.ndarray
    genuine_count: int
    impostor_count: int

    @property
    def tar(self) -> np.ndarray:
        return self.true_accepts / self.genuine_count

    @property
    def far(self) -> np.ndarray:
        return self.false_accepts / self.impostor_count

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.tar.tolist()))

    def at(self, threshold: float) -> tuple[float, float]:
        """``(FAR, TAR)`` for an arbitrary threshold."""
        i = int(np.searchsorted(self.thresholds, threshold, side="left"))
        return float(self.far[i]), float(self.tar[i])


@dataclass(frozen=True)
class OperatingPoint:
    tar: float
    threshold: float
    far: float
    far_unreachable: bool = False


def roc(genuine, impostor) -> RocCurve:
    g = np.sort(_scores(genuine, "genuine"))
    i = np.sort(_scores(impostor, "impostor"))
    t = _sweep_thresholds(g, i)
    return RocCurve(t, _count_at_or_above(g, t), _count_at_or_above(i, t), g.size, i.size)


def tar_at_far(curve: RocCurve, far_target: float) -> OperatingPoint:
    """TAR at the smallest threshold whose FAR does not exceed ``far_target``.

    No interpolation. When fewer than ``1 / far_target`` impostors exist the
    target cannot be resolved; the FAR = 0 point is returned and flagged.
    """
    if not 0.0 <= far_target <= 1.0:
        raise ValueError(f"far_target must be in [0, 1], got {far_target}")
    limit = _max_count(far_target, curve.impostor_count)
    # false_accepts is non-increasing along ascending thresholds
    idx = int(np.argmax(curve.false_accepts <= limit))
    return OperatingPoint(
        tar=float(curve.true_accepts[idx] / curve.genuine_count),
        threshold=float(curve.thresholds[idx]),
        far=float(curve.false_accepts[idx] / curve.impostor_count),
        far_unreachable=bool(far_target > 0 and limit == 0),
    )


def verification_accuracy(genuine, impostor) -> float:
    """Best achievable fraction of correctly decided pairs over all thresholds."""
    curve = roc(genuine, impostor)
    correct = curve.true_accepts + (curve.impostor_count - curve.false_accepts)
    return float(correct.max() / (curve.genuine_count + curve.impostor_count))


@dataclass(frozen=True)
class CmcCurve:
    hits: np.ndarray  # hits[r-1] = probes with rank <= r
    probe_count: int

    @property
    def hits_at_rank(self) -> np.ndarray:
        return self.hits / self.probe_count

    def rank(self, r: int) -> float:
        if r < 1:
            raise ValueError("rank must be >= 1")
        return float(self.hits[min(r, self.hits.size) - 1] / self.probe_count)


def mated_ranks(scores: np.ndarray, probe_ids: Sequence[int], gallery_ids: Sequence[int]) -> np.ndarray:
    """Rank of the mated gallery entry per probe; ties count against the probe."""
    scores = np.asarray(scores, dtype=np.float64)
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if scores.shape != (probe_ids.size, gallery_ids.size):
        raise ValueError(f"score matrix shape {scores.shape} does not match probes/gallery")
    if np.unique(gallery_ids).size != gallery_ids.size:
        raise ProtocolViolation("gallery identities must be unique")
    position = {int(g): k for k, g in enumerate(gallery_ids)}
    missing = [int(p) for p in probe_ids if int(p) not in position]
    if missing:
        raise ProtocolViolation(f"probe identities absent from the gallery: {sorted(set(missing))}")
    cols = np.array([position[int(p)] for p in probe_ids], dtype=np.int64)
    mated = scores[np.arange(probe_ids.size), cols]
    above_or_tied = (scores >= mated[:, None]).sum(axis=1)
    # the mated entry itself satisfies >=, so this is 1 + strictly greater + tied non-mated
    return above_or_tied


def cmc_from_scores(scores, probe_ids, gallery_ids) -> CmcCurve:
    ranks = mated_ranks(scores, probe_ids, gallery_ids)
    size = np.asarray(gallery_ids).size
    hits = np.cumsum(np.bincount(ranks - 1, minlength=size)[:size])
    return CmcCurve(hits, int(ranks.size))


def cmc(probes: Sequence[tuple[Template, int]], gallery: Sequence[Template]) -> CmcCurve:
    """Close-set cumulative match characteristic."""
    if len(probes) == 0 or len(gallery) == 0:
        raise ValueError("probes and gallery must be nonempty")
    p = stack([t for t, _ in probes])
    scores = np.clip(p @ stack(gallery).T, -1.0, 1.0)
    return cmc_from_scores(scores, [ident for _, ident in probes], [t.subject_id for t in gallery])


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray  # ascending, sentinels included
    false_positives: np.ndarray
    false_negatives: np.ndarray
    mated_count: int
    unmated_count: int

    @classmethod
    def from_rates(cls, fpir: Sequence[float], tpir: Sequence[float]) -> "DetCurve":
        """Curve from explicit ``(FPIR, TPIR)`` pairs; thresholds are placeholders."""
        fpir = np.asarray(fpir, dtype=np.float64)
        fnir = 1.0 - np.asarray(tpir, dtype=np.float64)
        return cls(np.arange(fpir.size, dtype=np.float64), fpir, fnir, 1, 1)

    @property
    def fpir(self) -> np.ndarray:
        return self.false_positives / self.unmated_count

    @property
    def fnir(self) -> np.ndarray:
        return self.false_negatives / self.mated_count

    @property
    def tpir(self) -> np.ndarray:
        return 1.0 - self.fnir

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpir.tolist(), self.fnir.tolist()))

    def at(self, threshold: float) -> tuple[float, float]:
        """``(FPIR, FNIR)`` for an arbitrary threshold."""
        i = int(np.searchsorted(self.thresholds, threshold, side="left"))
        return float(self.fpir[i]), float(self.fnir[i])


def open_set_from_scores(mated_scores, mated_ids, unmated_scores, gallery_ids) -> DetCurve:
    """DET curve; a mated probe is a miss if rejected or not ranked first."""
    gallery_ids = np.asarray(gallery_ids)
    mated_scores = np.asarray(mated_scores, dtype=np.float64)
    unmated_scores = np.asarray(unmated_scores, dtype=np.float64)
    if gallery_ids.size == 0:
        raise ValueError("gallery is empty")
    if mated_scores.shape[0] == 0 or unmated_scores.shape[0] == 0:
        raise ValueError("need mated and unmated probes")
    if mated_scores.shape[1] != gallery_ids.size or unmated_scores.shape[1] != gallery_ids.size:
        raise ValueError("score matrices do not match the gallery size")
    ranks = mated_ranks(mated_scores, mated_ids, gallery_ids)
    mated_top = mated_scores.max(axis=1)
    unmated_top = unmated_scores.max(axis=1)

    t = _sweep_thresholds(mated_top, unmated_top)
    false_pos = _count_at_or_above(np.sort(unmated_top), t)
    correct_top = np.sort(mated_top[ranks == 1])
    false_neg = mated_top.size - _count_at_or_above(correct_top, t)
    return DetCurve(t, false_pos, false_neg, int(mated_top.size), int(unmated_top.size))


def open_set_identification(
    mated_probes: Sequence[tuple[Template, int]],
    unmated_probes: Sequence[Template],
    gallery: Sequence[Template],
) -> DetCurve:
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    gallery_ids = [t.subject_id for t in gallery]
    unmated_ids = {t.subject_id for t in unmated_probes}
    if unmated_ids & set(gallery_ids):
        raise ProtocolViolation("unmated probe identities overlap the gallery")
    g = stack(gallery)
    mated = np.clip(stack([t for t, _ in mated_probes]) @ g.T, -1.0, 1.0)
    unmated = np.clip(stack(unmated_probes) @ g.T, -1.0, 1.0)
    return open_set_from_scores(mated, [i for _, i in mated_probes], unmated, gallery_ids)


def fnir_at_fpir(curve: DetCurve, fpir_target: float) -> OperatingPoint:
    """FNIR at the smallest threshold whose FPIR does not exceed the target.

    Returned in an :class:`OperatingPoint` with ``tar`` holding TPIR.
    """
    limit = _max_count(fpir_target, curve.unmated_count)
    idx = int(np.argmax(curve.false_positives <= limit))
    return OperatingPoint(
        tar=float(1.0 - curve.false_negatives[idx] / curve.mated_count),
        threshold=float(curve.thresholds[idx]),
        far=float(curve.false_positives[idx] / curve.unmated_count),
        far_unreachable=bool(fpir_target > 0 and limit == 0),
    )


def det_auc(curve: DetCurve) -> float:
    """Trapezoidal area under TPIR as a function of FPIR."""
    fpir = curve.fpir
    tpir = curve.tpir
    if fpir.size == 0:
        raise ValueError("empty curve")
    order = np.lexsort((tpir, fpir))
    x, y = fpir[order], tpir[order]
    if x.size == 1:
        return 0.0
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return min(max(area, 0.0), 1.0)


def average_precision(relevance: Sequence[bool]) -> Fraction:
    rel = [bool(r) for r in relevance]
    total = sum(rel)
    if total == 0:
        raise ProtocolViolation("query has no relevant item")
    hits = 0
    acc = Fraction(0)
    for position, flag in enumerate(rel, start=1):
        if flag:
            hits += 1
            acc += Fraction(hits, position)
    return acc / total


def retrieval_map(rankings: Sequence[Sequence[bool]]) -> float:
    """Mean average precision, accumulated in exact rational arithmetic."""
    if len(rankings) == 0:
        raise ValueError("no queries")
    return float(sum((average_precision(r) for r in rankings), Fraction(0)) / len(rankings))


def retrieval_rate(rankings: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of queries with a relevant item in the top ``k``."""
    if len(rankings) == 0:
        raise ValueError("no queries")
    return sum(1 for r in rankings if any(r[:k])) / len(rankings)


def rankings_from_scores(scores, probe_ids, gallery_ids) -> list[list[bool]]:
    """Relevance flags per query in descending score order.

    Among tied scores, non-relevant items are ranked first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gallery_ids = np.asarray(gallery_ids)
    out = []
    for row, pid in zip(scores, probe_ids):
        relevant = gallery_ids == pid
        order = np.lexsort((relevant, -row))
        out.append(relevant[order].tolist())
    return out


def summarize_scores(genuine, impostor, far_target: float) -> dict:
    curve = roc(genuine, impostor)
    op = tar_at_far(curve, far_target)
    return {
        "tar": op.tar,
        "threshold": op.threshold,
        "far": op.far,
        "far_unreachable": op.far_unreachable,
        "genuine_count": curve.genuine_count,
        "impostor_count": curve.impostor_count,
        "accuracy": verification_accuracy(genuine, impostor),
    }


def pair_scores(probe_emb: np.ndarray, gallery_emb: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Cosine score for each ``(probe_index, gallery_index)`` row of ``pairs``."""
    s = score_matrix(probe_emb, gallery_emb)
    return s[pairs[:, 0], pairs[:, 1]]


def split_scores(scores: np.ndarray, genuine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    genuine = np.asarray(genuine, dtype=bool)
    return scores[genuine], scores[~genuine]


def roc_table(curve: RocCurve, far_grid: Optional[Sequence[float]] = None) -> list[dict]:
    """Operating points on a FAR grid (log-spaced by default), for reports."""
    if far_grid is None:
        far_grid = [0.0] + list(np.logspace(-4, 0, 17))
    rows = []
    for f in far_grid:
        op = tar_at_far(curve, float(f))
        rows.append({"far_target": float(f), "far": op.far, "tar": op.tar, "threshold": op.threshold})
    return rows
