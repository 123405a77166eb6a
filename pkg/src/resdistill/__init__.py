"""Resolution-robust embedding distillation and biometric evaluation protocols."""

from .imaging import (
    CurriculumState,
    ImageRecord,
    ResolutionSet,
    TrainView,
    degrade,
    degrade_probability,
    prepare_eval_input,
    prepare_train_view,
    sample_resolution,
)
from .model import ModelHandle, ModelSpec, build_model, clone, extract_features, freeze, parameter_hash
from .training import LossBreakdown, TrainConfig, TrainState, distillation_loss, fit, train_step, validate

__version__ = "0.1.0"
