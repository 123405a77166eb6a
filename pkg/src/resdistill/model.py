"""Toy backbone, model handles and checkpoint container."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    num_classes: int
    embedding_dim: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 128)
    in_channels: int = 3
    input_size: int = 224
    stem_pool: int = 4
    architecture_id: str = "toy-conv4"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass
class Embedding:
    vector: np.ndarray
    source_role: str = "student"
    source_resolution: Optional[int] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")


class ToyBackbone(nn.Module):
    """Average-pool stem, strided conv-BN-ReLU blocks, GAP, embedding, classifier.

    Inputs in ``[0, 1]`` are centred before the first convolution. BatchNorm
    uses batch statistics in training mode and running statistics in eval
    mode; a frozen teacher is always evaluated in eval mode, so its running
    statistics never move.
    """

    input_mean = 0.5
    input_scale = 0.25

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.stem = nn.AvgPool2d(spec.stem_pool) if spec.stem_pool > 1 else nn.Identity()
        layers: list[nn.Module] = []
        c_in = spec.in_channels
        for c_out in spec.channels:
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.trunk = nn.Sequential(*layers)
        self.embedding = nn.Linear(c_in, spec.embedding_dim)
        self.classifier = nn.Linear(spec.embedding_dim, spec.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        # pooling is linear, so centring after it equals centring before it
        h = (self.stem(x) - self.input_mean) / self.input_scale
        h = self.trunk(h).mean(dim=(2, 3))
        return self.embedding(h)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.features(x)
        return self.classifier(feats), feats


@dataclass
class ModelHandle:
    spec: ModelSpec
    net: ToyBackbone
    frozen: bool = False

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


class ShapeError(ValueError):
    pass


def build_model(spec: ModelSpec, seed: int = 0, zero_head: bool = False) -> ModelHandle:
    """Fresh toy backbone with seeded initialisation."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = ToyBackbone(spec)
    finally:
        torch.random.set_rng_state(gen_state)
    if zero_head:
        with torch.no_grad():
            net.classifier.weight.zero_()
            net.classifier.bias.zero_()
    return ModelHandle(spec, net)


def to_tensor(m: ModelHandle, batch) -> torch.Tensor:
    """``N x S x S x C`` array (or tensor) to an NCHW tensor of the model dtype."""
    x = batch if isinstance(batch, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(batch))
    s = m.spec.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (s, s, m.spec.in_channels):
        raise ShapeError(f"expected N x {s} x {s} x {m.spec.in_channels} batch, got {tuple(x.shape)}")
    # a channels-last view; the stem reads it without a layout copy
    return x.permute(0, 3, 1, 2).to(m.dtype)


def extract_features(m: ModelHandle, batch, batch_size: int = 64) -> np.ndarray:
    """Penultimate-layer embeddings, one row per input, in inference mode.

    Embeddings are raw (not L2-normalised).
    """
    return _infer(m, batch, batch_size, logits=False)


def classify(m: ModelHandle, batch, batch_size: int = 64) -> np.ndarray:
    """Classifier logits, one row per input."""
    return _infer(m, batch, batch_size, logits=True)


def _infer(m: ModelHandle, batch, batch_size: int, logits: bool) -> np.ndarray:
    n = len(batch)
    was_training = m.net.training
    m.net.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, max(n, 1), batch_size):
                chunk = batch[start : start + batch_size]
                x = to_tensor(m, chunk)
                y = m.net(x)[0] if logits else m.net.features(x)
                out.append(y.numpy())
    finally:
        m.net.train(was_training)
    return np.concatenate(out, axis=0)


def freeze(m: ModelHandle) -> ModelHandle:
    """Frozen copy: gradients disabled, eval mode. Idempotent."""
    if m.frozen:
        return m
    net = copy.deepcopy(m.net)
    net.requires_grad_(False)
    net.eval()
    return ModelHandle(m.spec, net, frozen=True)


def clone(m: ModelHandle) -> ModelHandle:
    """Trainable exact copy (used to initialise the student from the teacher)."""
    net = copy.deepcopy(m.net)
    net.requires_grad_(True)
    net.train()
    return ModelHandle(m.spec, net, frozen=False)


def parameter_hash(m: Union[ModelHandle, nn.Module]) -> str:
    net = m.net if isinstance(m, ModelHandle) else m
    h = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["channels"] = list(spec.channels)
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    return ModelSpec(**d)


def save_checkpoint(path: Union[str, Path], model: ModelHandle, **extra) -> Path:
    """Write a model (plus arbitrary training state) to a versioned container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec_to_dict(model.spec),
        "frozen": model.frozen,
        "parameters": {k: v.detach().clone() for k, v in model.net.state_dict().items()},
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelHandle, dict]:
    """Inverse of :func:`save_checkpoint`; returns the model and the full payload."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    spec = spec_from_dict(payload["spec"])
    net = ToyBackbone(spec)
    params = payload["parameters"]
    first = next(iter(params.values()))
    net.to(first.dtype)
    net.load_state_dict(params)
    model = ModelHandle(spec, net)
    if payload.get("frozen"):
        model = freeze(model)
    return model, payload
