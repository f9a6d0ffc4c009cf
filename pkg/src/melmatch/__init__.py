"""Trainable HMM error model for matching sung melody queries against symbolic targets."""

from .events import QuantizationConfig, QuantizedEvent, RawNote, load_events, quantize_sequence
from .model import EditKind, EditType, HiddenState, TargetModel, build_target_model
from .params import ErrorModelParams, apply_variant, default_params

__version__ = "0.1.0"

__all__ = [
    "EditKind",
    "EditType",
    "ErrorModelParams",
    "HiddenState",
    "QuantizationConfig",
    "QuantizedEvent",
    "RawNote",
    "TargetModel",
    "apply_variant",
    "build_target_model",
    "default_params",
    "load_events",
    "quantize_sequence",
]
