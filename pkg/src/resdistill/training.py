"""Teacher-student resolution distillation loop.

Loss per batch::

    total = cross_entropy(logits, labels) + lambda * reduce_i ||F_T(i) - F_S(i')||^2

where ``i'`` is the (possibly degraded) student view of image ``i`` and
``reduce`` is a batch mean by default (``distill_reduction="sum"`` keeps the
literal per-batch sum).
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import (
    VALIDATION_RESOLUTION,
    CurriculumState,
    ImageRecord,
    ResolutionSet,
    TrainView,
    prepare_eval_input,
    prepare_train_view,
)
from .model import (
    ModelHandle,
    classify,
    clone,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
    to_tensor,
)

log = logging.getLogger(__name__)

MODES = ("T-C", "nT-nC")
REDUCTIONS = ("mean", "sum")

# stream tags for seed-derived generators
_EPOCH_STREAM = 1
_VIEW_STREAM = 2

LOG_COLUMNS = (
    "epoch",
    "step",
    "lr",
    "train_loss",
    "classification",
    "distillation",
    "fullres_metric",
    "lowres24_metric",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    total_steps: int = 3000
    lambda_distill: float = 0.1
    batch_size: int = 64
    lr_init: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_decay_factor: float = 5.0
    plateau_patience: int = 3
    plateau_min_rel_improvement: float = 1e-3
    seed: int = 0
    mode: str = "T-C"
    fixed_degrade_frequency: float = 0.5
    distill_reduction: str = "mean"
    resolution_exponent_lo: int = 3
    resolution_exponent_hi: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.distill_reduction not in REDUCTIONS:
            raise ValueError(f"distill_reduction must be one of {REDUCTIONS}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if self.lambda_distill < 0:
            raise ValueError("lambda_distill must be >= 0")
        for name in ("lr_init", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.plateau_min_rel_improvement < 0:
            raise ValueError("momentum, weight_decay and plateau_min_rel_improvement must be >= 0")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if not 0.0 <= self.fixed_degrade_frequency <= 1.0:
            raise ValueError("fixed_degrade_frequency must be in [0, 1]")
        ResolutionSet(self.resolution_exponent_lo, self.resolution_exponent_hi)

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {', '.join(unknown)}")
        return cls(**data)

    @property
    def resolution_set(self) -> ResolutionSet:
        return ResolutionSet(self.resolution_exponent_lo, self.resolution_exponent_hi)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    classification: float
    distillation: float
    lambda_applied: float


@dataclass
class TrainState:
    cfg: TrainConfig
    student: ModelHandle
    teacher: Optional[ModelHandle]
    optimizer: torch.optim.SGD
    lr_current: float
    step: int = 0
    epoch: int = 0
    val_history: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    best_lowres: float = -math.inf
    # running sums over the current epoch: total, classification, distillation, batches
    running: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0])


def loss_terms(
    logits: torch.Tensor,
    labels: torch.Tensor,
    teacher_feats: torch.Tensor,
    student_feats: torch.Tensor,
    lam: float,
    reduction: str = "mean",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable ``(total, classification, distillation)`` tensors."""
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != n or teacher_feats.shape[0] != n or student_feats.shape[0] != n:
        raise ValueError("logits, labels and features must share the batch size")
    if teacher_feats.shape != student_feats.shape:
        raise ValueError(f"feature shapes differ: {tuple(teacher_feats.shape)} vs {tuple(student_feats.shape)}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    ce = F.cross_entropy(logits, labels)
    sq = ((teacher_feats - student_feats) ** 2).sum(dim=1)
    dist = sq.mean() if reduction == "mean" else sq.sum()
    return ce + lam * dist, ce, dist


def distillation_loss(logits, labels, teacher_feats, student_feats, lam: float, reduction: str = "mean") -> LossBreakdown:
    """Classification + weighted feature-matching loss, as plain floats."""

    def as_tensor(a, dtype=None):
        t = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))
        return t.to(dtype) if dtype is not None else t

    logits = as_tensor(logits, torch.float64)
    teacher_feats = as_tensor(teacher_feats, torch.float64)
    student_feats = as_tensor(student_feats, torch.float64)
    labels = as_tensor(labels).long()
    if logits.ndim != 2 or teacher_feats.ndim != 2 or student_feats.ndim != 2:
        raise ValueError("logits and features must be 2-D")
    with torch.no_grad():
        total, ce, dist = loss_terms(logits, labels, teacher_feats, student_feats, lam, reduction)
    return LossBreakdown(float(total), float(ce), float(dist), float(lam))


def distillation_feature_grad(teacher_feats, student_feats, lam: float, reduction: str = "mean") -> np.ndarray:
    """Analytic gradient of the weighted distillation term w.r.t. student features."""
    ft = np.asarray(teacher_feats, dtype=np.float64)
    fs = np.asarray(student_feats, dtype=np.float64)
    scale = 2.0 * lam / (fs.shape[0] if reduction == "mean" else 1)
    return scale * (fs - ft)


def make_optimizer(model: ModelHandle, cfg: TrainConfig) -> torch.optim.SGD:
    # weight decay on every parameter, classifier included
    return torch.optim.SGD(
        model.net.parameters(), lr=cfg.lr_init, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def init_state(cfg: TrainConfig, student: ModelHandle, teacher: Optional[ModelHandle] = None) -> TrainState:
    if student.frozen:
        raise ValueError("student must not be frozen")
    if teacher is not None and not teacher.frozen:
        raise ValueError("teacher must be frozen")
    if cfg.mode == "T-C" and teacher is None:
        raise ValueError("T-C mode needs a frozen teacher")
    return TrainState(cfg, student, teacher, make_optimizer(student, cfg), cfg.lr_init)


def train_step(state: TrainState, views: Sequence[TrainView], labels) -> tuple[TrainState, LossBreakdown]:
    """One SGD update of the student. The teacher is only read, never updated."""
    if len(views) == 0:
        raise ValueError("empty batch")
    cfg = state.cfg
    student = state.student
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    x_student = to_tensor(student, np.stack([v.student_input for v in views]))

    student.net.train()
    logits, fs = student.net(x_student)
    if cfg.mode == "T-C":
        state.teacher.net.eval()
        with torch.no_grad():
            x_teacher = to_tensor(state.teacher, np.stack([v.teacher_input for v in views]))
            ft = state.teacher.net.features(x_teacher).to(fs.dtype)
        lam = cfg.lambda_distill
    else:
        ft = fs.detach()
        lam = 0.0
    total, ce, dist = loss_terms(logits, labels_t, ft, fs, lam, cfg.distill_reduction)
    if not torch.isfinite(total):
        raise TrainingDiverged(state.step, total.item())

    for group in state.optimizer.param_groups:
        group["lr"] = state.lr_current
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return state, LossBreakdown(total.item(), ce.item(), dist.item(), float(lam))


def _plateau_decisions(history: Sequence[float], patience: int, min_rel: float) -> list[bool]:
    best = math.inf
    bad = 0
    out = []
    for loss in history:
        if not math.isfinite(best) or loss < best * (1.0 - min_rel):
            best = loss
            bad = 0
        else:
            bad += 1
        fired = bad >= patience
        if fired:
            bad = 0
        out.append(fired)
    return out


def update_lr_on_plateau(history: Sequence[float], lr: float, cfg: TrainConfig) -> float:
    """Learning rate after the latest epoch of ``history``.

    Replays the whole loss history through a patience counter (reset after
    every decay) and decays only if the counter fires on the last entry.
    """
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    fires = _plateau_decisions(history, cfg.plateau_patience, cfg.plateau_min_rel_improvement)
    return lr / cfg.lr_decay_factor if fires[-1] else lr


class ValidationSet:
    """Full-resolution and 24 px network inputs for a fixed image list."""

    def __init__(self, records: Sequence[ImageRecord], low_resolution: int = VALIDATION_RESOLUTION):
        if len(records) == 0:
            raise ValueError("validation set is empty")
        self.labels = np.array([r.identity for r in records])
        self.full = np.stack([prepare_eval_input(r) for r in records])
        self.low = np.stack([prepare_eval_input(r, low_resolution) for r in records])

    def __len__(self):
        return len(self.labels)


def validate(student: ModelHandle, val_set: Union[ValidationSet, Sequence[ImageRecord]]) -> tuple[float, float]:
    """Top-1 accuracy at full resolution and at 24 px."""
    if not isinstance(val_set, ValidationSet):
        val_set = ValidationSet(val_set)
    full = classify(student, val_set.full).argmax(axis=1)
    low = classify(student, val_set.low).argmax(axis=1)
    return float(np.mean(full == val_set.labels)), float(np.mean(low == val_set.labels))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _EPOCH_STREAM, epoch]).permutation(n)


def view_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, _VIEW_STREAM, step, slot])


def batch_views(
    records: Sequence[ImageRecord],
    indices: Sequence[int],
    cfg: TrainConfig,
    step: int,
    pool: Optional[ThreadPoolExecutor] = None,
) -> list[TrainView]:
    if cfg.mode == "T-C":
        prob: Union[CurriculumState, float] = CurriculumState(step, cfg.total_steps)
    else:
        prob = cfg.fixed_degrade_frequency
    rset = cfg.resolution_set

    def one(slot_idx):
        slot, idx = slot_idx
        return prepare_train_view(records[idx], prob, view_rng(cfg.seed, step, slot), rset)

    jobs = list(enumerate(indices))
    if pool is None:
        return [one(j) for j in jobs]
    return list(pool.map(one, jobs))


def _checkpoint_extra(state: TrainState) -> dict:
    return {
        "config": asdict(state.cfg),
        "optimizer": state.optimizer.state_dict(),
        "lr_current": state.lr_current,
        "step": state.step,
        "epoch": state.epoch,
        "val_history": [list(v) for v in state.val_history],
        "epoch_losses": list(state.epoch_losses),
        "best_lowres": state.best_lowres,
        "running": list(state.running),
        "teacher_hash": parameter_hash(state.teacher) if state.teacher is not None else None,
        # views are drawn from streams keyed by (seed, step), so this is the full rng state
        "rng": {"seed": state.cfg.seed, "step": state.step, "torch": torch.random.get_rng_state()},
    }


def save_state(path: Union[str, Path], state: TrainState) -> Path:
    return save_checkpoint(path, state.student, **_checkpoint_extra(state))


def restore_state(path: Union[str, Path], cfg: TrainConfig, teacher: Optional[ModelHandle]) -> TrainState:
    student, payload = load_checkpoint(path)
    saved_cfg = TrainConfig(**payload["config"])
    if saved_cfg != cfg:
        raise ValueError("checkpoint was written with a different TrainConfig")
    if teacher is not None and payload["teacher_hash"] not in (None, parameter_hash(teacher)):
        raise ValueError("teacher parameters differ from the checkpointed run")
    state = init_state(cfg, student, teacher)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.lr_current = payload["lr_current"]
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    state.val_history = [tuple(v) for v in payload["val_history"]]
    state.epoch_losses = list(payload["epoch_losses"])
    state.best_lowres = payload["best_lowres"]
    state.running = list(payload["running"])
    torch.random.set_rng_state(payload["rng"]["torch"])
    return state


def _close_epoch(state: TrainState, val: ValidationSet, out_dir: Optional[Path], writer) -> None:
    total, ce, dist, batches = state.running
    train_loss = total / batches
    state.epoch_losses.append(train_loss)
    fullres, lowres = validate(state.student, val)
    state.val_history.append((state.epoch, fullres, lowres, train_loss))
    if writer is not None:
        writer.writerow(
            [state.epoch, state.step, repr(state.lr_current), repr(train_loss), repr(ce / batches),
             repr(dist / batches), repr(fullres), repr(lowres)]
        )
    log.info(
        "epoch %d step %d lr %.2e loss %.4f val full %.3f val 24px %.3f",
        state.epoch, state.step, state.lr_current, train_loss, fullres, lowres,
    )
    state.lr_current = update_lr_on_plateau(state.epoch_losses, state.lr_current, state.cfg)
    state.running = [0.0, 0.0, 0.0, 0]
    state.epoch += 1
    if lowres > state.best_lowres:
        state.best_lowres = lowres
        if out_dir is not None:
            save_state(out_dir / "best.pt", state)


def fit(
    cfg: TrainConfig,
    train_set: Sequence[ImageRecord],
    val_set: Union[ValidationSet, Sequence[ImageRecord]],
    teacher: Optional[ModelHandle],
    *,
    student: Optional[ModelHandle] = None,
    out_dir: Union[str, Path, None] = None,
    resume_from: Union[str, Path, None] = None,
    stop_at_step: Optional[int] = None,
    jobs: int = 1,
) -> TrainState:
    """Run the training loop until ``cfg.total_steps`` updates.

    The student defaults to a trainable clone of the teacher. Validation runs
    at every epoch end (and once more at completion if the last epoch was
    partial). ``best.pt`` is written whenever the 24 px accuracy improves,
    ``final.pt`` at completion; ``stop_at_step`` interrupts the run early and
    writes ``resume.pt`` instead.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    val = val_set if isinstance(val_set, ValidationSet) else ValidationSet(val_set)
    if teacher is not None and not teacher.frozen:
        raise ValueError("teacher must be frozen")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = restore_state(resume_from, cfg, teacher)
    else:
        if student is None:
            if teacher is None:
                raise ValueError("need a teacher or an explicit student")
            student = clone(teacher)
        state = init_state(cfg, student, teacher)

    n = len(train_set)
    batch = min(cfg.batch_size, n)
    steps_per_epoch = n // batch
    labels = np.array([r.identity for r in train_set])
    teacher_hash = parameter_hash(teacher) if teacher is not None else None
    end = cfg.total_steps if stop_at_step is None else min(stop_at_step, cfg.total_steps)

    log_file = None
    writer = None
    if out is not None:
        log_path = out / "train_log.csv"
        fresh = resume_from is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_COLUMNS)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while state.step < end:
            epoch = state.step // steps_per_epoch
            j = state.step % steps_per_epoch
            order = epoch_order(cfg.seed, epoch, n)
            idx = order[j * batch : (j + 1) * batch]
            views = batch_views(train_set, idx, cfg, state.step, pool)
            state, br = train_step(state, views, labels[idx])
            state.running[0] += br.total
            state.running[1] += br.classification
            state.running[2] += br.distillation
            state.running[3] += 1
            if state.step % steps_per_epoch == 0:
                _close_epoch(state, val, out, writer)
        if state.step >= cfg.total_steps:
            if state.running[3] > 0:
                _close_epoch(state, val, out, writer)
            if out is not None:
                save_state(out / "final.pt", state)
        elif out is not None:
            save_state(out / "resume.pt", state)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()

    if teacher is not None and parameter_hash(teacher) != teacher_hash:
        raise RuntimeError("teacher parameters changed during training")
    return state
