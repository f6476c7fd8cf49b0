from .footprint import FootprintReport, FootprintRow, footprint
from .layers import ForwardContext, Layer, LayerRecord
from .model import Model, build, load_model
from .spec import LAYER_KINDS, WEIGHTED_KINDS, LayerSpec, ModelSpec, SpecError

__all__ = [
    "LAYER_KINDS",
    "WEIGHTED_KINDS",
    "FootprintReport",
    "FootprintRow",
    "ForwardContext",
    "Layer",
    "LayerRecord",
    "LayerSpec",
    "Model",
    "ModelSpec",
    "SpecError",
    "build",
    "footprint",
    "load_model",
]
