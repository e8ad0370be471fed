"""Small NHWC neural-network engine with hand-written backward passes."""
from __future__ import annotations

from . import container
from .container import FormatError
from .gradcheck import grad_check
from .layers import (BatchNorm, Conv2D, Dropout, L2Normalize, Layer, MaxPool2D, ReLU,
                     ShapeError, Sigmoid, UninitializedStatisticsError, conv_output_size,
                     sigmoid)
from .losses import (InvalidBatchError, binary_cross_entropy, pairwise_distances,
                     sigmoid_cross_entropy, triplet_semihard_loss)
from .model import Sequential
from .optim import SGD, NonFiniteGradientError, sgd_step

ARCHITECTURES = {}


def register_architecture(arch_id):
    def wrap(builder):
        ARCHITECTURES[arch_id] = builder
        return builder
    return wrap


def save_model(model: Sequential, path, metadata=None) -> None:
    meta = {"architecture": model.arch}
    meta.update(model.metadata)
    meta.update(metadata or {})
    meta["stats_initialized"] = int(model.stats_ready())
    container.save(path, model.state(), meta)


def load_model(path) -> Sequential:
    """Rebuilds a registered architecture and loads its tensors."""
    # builders register on import
    from .. import descnet, detector  # noqa: F401

    tensors, meta = container.load(path)
    arch = meta.get("architecture")
    if arch not in ARCHITECTURES:
        raise FormatError(f"unknown architecture {arch!r}", 0)
    model = ARCHITECTURES[arch](meta)
    model.load_state(tensors, stats_ready=meta.get("stats_initialized", "1") == "1")
    model.metadata.update(meta)
    return model


__all__ = [
    "ARCHITECTURES", "BatchNorm", "Conv2D", "Dropout", "FormatError", "InvalidBatchError",
    "L2Normalize", "Layer", "MaxPool2D", "NonFiniteGradientError", "ReLU", "SGD",
    "Sequential", "ShapeError", "Sigmoid", "UninitializedStatisticsError",
    "binary_cross_entropy", "container", "conv_output_size", "grad_check", "load_model",
    "pairwise_distances", "register_architecture", "save_model", "sgd_step", "sigmoid",
    "sigmoid_cross_entropy", "triplet_semihard_loss",
]
