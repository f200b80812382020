"""Dual-stream audio/video flow-matching transformer on a synthetic world."""

from .model import ConditionSet, DualStreamDiT, ModelConfig
from .rope import RopeConfig
from .sampler import GuidanceSpec
from .tensor import ParamStore, Tensor, grad_check
from .toyworld import TemplateBank, ToyWorldConfig, make_bank, make_paired_sample

__all__ = [
    "ConditionSet",
    "DualStreamDiT",
    "GuidanceSpec",
    "ModelConfig",
    "ParamStore",
    "RopeConfig",
    "TemplateBank",
    "Tensor",
    "ToyWorldConfig",
    "grad_check",
    "make_bank",
    "make_paired_sample",
]
