from __future__ import annotations

import copy

import numpy as np

from .layers import BatchNorm, Conv2D, Layer


class Sequential:
    """A fixed stack of layers.

    Parameters are addressed as ``"<layer>/<param>"``. ``state`` holds both
    trainable parameters and batchnorm moving statistics.
    """

    def __init__(self, layers: list[Layer], arch: str = "custom", metadata=None):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = layers
        self.arch = arch
        self.metadata = dict(metadata or {})

    def forward(self, x, train=False, rng=None, stop_before=None):
        """Runs the stack. ``stop_before`` names a layer kind (e.g.
        ``"sigmoid"``) at which to stop when it is the final layer, which
        is how fused losses get at the logits."""
        layers = self.layers
        if stop_before is not None and layers[-1].kind == stop_before:
            layers = layers[:-1]
        self._ran = layers
        for layer in layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    __call__ = forward

    def backward(self, dy):
        for layer in reversed(self._ran):
            dy = layer.backward(dy)
        return dy

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def trainable(self) -> dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers for k, v in l.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers for k, v in l.grads.items()}

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.layers:
            for k, v in l.params.items():
                out[f"{l.name}/{k}"] = v
            for k, v in l.buffers.items():
                out[f"{l.name}/{k}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray], stats_ready=True):
        expected = self.state()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for l in self.layers:
            for k in l.params:
                arr = np.asarray(state[f"{l.name}/{k}"])
                if arr.shape != l.params[k].shape:
                    raise ValueError(f"{l.name}/{k}: shape {arr.shape} != {l.params[k].shape}")
                l.params[k] = arr.astype(l.params[k].dtype).copy()
            for k in l.buffers:
                l.buffers[k] = np.asarray(state[f"{l.name}/{k}"], l.buffers[k].dtype).copy()
            if isinstance(l, BatchNorm):
                l.stats_ready = stats_ready

    def set_param(self, key, value):
        layer_name, name = key.split("/")
        layer = self.layer(layer_name)
        store = layer.params if name in layer.params else layer.buffers
        store[name] = value

    def layer(self, name) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def count_params(self, trainable_only=False) -> int:
        tensors = self.trainable() if trainable_only else self.state()
        return int(sum(v.size for v in tensors.values()))

    def init_weights(self, rng):
        for l in self.layers:
            if isinstance(l, Conv2D):
                l.init_weights(rng)

    def astype(self, dtype) -> "Sequential":
        """Deep copy with every tensor cast to ``dtype``."""
        other = copy.deepcopy(self)
        for l in other.layers:
            l.params = {k: v.astype(dtype) for k, v in l.params.items()}
            l.buffers = {k: v.astype(dtype) for k, v in l.buffers.items()}
            l.grads = {}
        return other

    def clone(self) -> "Sequential":
        other = copy.deepcopy(self)
        for l in other.layers:
            l.__dict__.pop("_cache", None)
            l.grads = {}
        return other

    def batchnorms(self):
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def stats_ready(self) -> bool:
        return all(bn.stats_ready for bn in self.batchnorms())

    def calibrate(self, x, rng=None):
        """Sets every batchnorm's moving statistics to those of batch ``x``
        (a train-mode pass with momentum 0). Parameters are untouched."""
        saved = [bn.momentum for bn in self.batchnorms()]
        for bn in self.batchnorms():
            bn.momentum = 0.0
        try:
            self.forward(x, train=True, rng=rng if rng is not None else np.random.default_rng(0))
        finally:
            for bn, m in zip(self.batchnorms(), saved):
                bn.momentum = m
