from .layers import Architecture, LayerSpec, ShapeError, TapNet, default_architecture
from .optim import SGD, NonFiniteGradient, sgd_step
from .serialize import (BadMagic, ModelFormatError, TruncatedStream, UnsupportedVersion,
                        load_model, save_model)
from .tensor import GradTape, TapeError, Tensor

__all__ = [
    "Architecture", "LayerSpec", "ShapeError", "TapNet", "default_architecture",
    "SGD", "NonFiniteGradient", "sgd_step",
    "BadMagic", "ModelFormatError", "TruncatedStream", "UnsupportedVersion",
    "load_model", "save_model",
    "GradTape", "TapeError", "Tensor",
]
