"""Experiment configuration files (YAML, unknown keys rejected)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from ..protocols.crossres import EVAL_RESOLUTIONS, parse_resolution, resolution_label
from ..training import TrainConfig
from .synthetic import Jitter, SyntheticDatasetConfig

MODES = ("teacher-only", "nT-nC", "T-C")
DEFAULT_CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class ConfigError(ValueError):
    pass


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 128)


@dataclass(frozen=True)
class EvalConfig:
    far: float = 1e-3
    resolutions: tuple = EVAL_RESOLUTIONS
    cmc_ranks: tuple[int, ...] = (1, 5, 10)
    retrieval_ranks: tuple[int, ...] = (1, 5, 20)
    fpir: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        if not 0.0 <= self.far <= 1.0 or not 0.0 <= self.fpir <= 1.0:
            raise ConfigError("far and fpir must lie in [0, 1]")
        res = tuple(parse_resolution(r) for r in self.resolutions)
        if not res:
            raise ConfigError("eval.resolutions is empty")
        object.__setattr__(self, "resolutions", res)
        object.__setattr__(self, "cmc_ranks", tuple(int(r) for r in self.cmc_ranks))
        object.__setattr__(self, "retrieval_ranks", tuple(int(r) for r in self.retrieval_ranks))


# the teacher is pretrained on full-resolution images with classification only
_TEACHER_FIXED = {"mode": "nT-nC", "fixed_degrade_frequency": 0.0}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    modes: tuple[str, ...] = MODES
    data: SyntheticDatasetConfig = field(default_factory=SyntheticDatasetConfig)
    data_dir: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(**_TEACHER_FIXED))
    student: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a nonempty subset of {MODES}, got {list(self.modes)}")
        # the master seed drives every stage
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "data", replace(self.data, seed=self.seed))
        object.__setattr__(self, "teacher", replace(self.teacher, seed=self.seed, **_TEACHER_FIXED))
        object.__setattr__(self, "student", replace(self.student, seed=self.seed))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "eval" in kw and isinstance(kw["eval"], dict):
            kw["eval"] = replace(self.eval, **kw["eval"])
        return replace(self, **kw)

    def student_config(self, mode: str) -> TrainConfig:
        return replace(self.student, mode=mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        d["data"]["image_size"] = list(self.data.image_size)
        d["data"].update(d["data"].pop("jitter"))  # config files keep jitter keys flat
        d["model"]["channels"] = list(self.model.channels)
        d["eval"]["resolutions"] = [resolution_label(r) for r in self.eval.resolutions]
        d["eval"]["cmc_ranks"] = list(self.eval.cmc_ranks)
        d["eval"]["retrieval_ranks"] = list(self.eval.retrieval_ranks)
        for key in _TEACHER_FIXED:
            d["teacher"].pop(key)
        d["teacher"].pop("seed")
        d["student"].pop("seed")
        d["student"].pop("mode")  # set per mode at training time
        d["data"].pop("seed")
        if d["data_dir"] is None:
            d.pop("data_dir")
        return d


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def experiment_from_mapping(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    _check_keys("<root>", raw, _names(ExperimentConfig))
    kw: dict[str, Any] = {}
    if "seed" in raw:
        kw["seed"] = int(raw["seed"])
    if "modes" in raw:
        kw["modes"] = tuple(raw["modes"])
    if "data_dir" in raw:
        kw["data_dir"] = raw["data_dir"]
    if "data" in raw:
        data = dict(raw["data"])
        allowed = (_names(SyntheticDatasetConfig) - {"jitter", "seed"}) | _names(Jitter)
        _check_keys("data", data, allowed)
        jitter = Jitter(**{k: data.pop(k) for k in list(data) if k in _names(Jitter)})
        if "image_size" in data:
            data["image_size"] = tuple(data["image_size"])
        kw["data"] = SyntheticDatasetConfig(jitter=jitter, **data)
    if "model" in raw:
        _check_keys("model", raw["model"], _names(ModelConfig))
        m = dict(raw["model"])
        if "channels" in m:
            m["channels"] = tuple(m["channels"])
        kw["model"] = ModelConfig(**m)
    if "teacher" in raw:
        allowed = _names(TrainConfig) - set(_TEACHER_FIXED) - {"seed"}
        _check_keys("teacher", raw["teacher"], allowed)
        kw["teacher"] = TrainConfig(**{**raw["teacher"], **_TEACHER_FIXED})
    if "student" in raw:
        _check_keys("student", raw["student"], _names(TrainConfig) - {"mode", "seed"})
        kw["student"] = TrainConfig(**raw["student"])
    if "eval" in raw:
        _check_keys("eval", raw["eval"], _names(EvalConfig))
        kw["eval"] = EvalConfig(**raw["eval"])
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_yaml(path: Union[str, Path]) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return data or {}


def load_experiment_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return experiment_from_mapping(load_yaml(path))


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """Flat key-value file whose keys are exactly ``TrainConfig`` field names."""
    try:
        return TrainConfig.from_mapping(load_yaml(path))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_yaml(data: dict, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True))


def bundled_config(name: str) -> Path:
    path = DEFAULT_CONFIG_DIR / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
