"""The tap-layer CNN: a small sequential net that exports chosen feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LayerSpec:
    """One architecture entry.

    kind is one of ``conv``, ``relu``, ``pool``, ``flatten``, ``linear``.
    ``out`` is the channel / unit count for conv and linear layers; ``skip``
    adds the layer input back onto a conv output (needs matching shapes).
    """

    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    skip: bool = False

    def to_dict(self):
        return {"kind": self.kind, "out": self.out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "skip": self.skip}


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple  # (C, H, W)
    num_classes: int
    layers: tuple
    taps: tuple

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [l.to_dict() for l in self.layers], "taps": list(self.taps)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), int(d["num_classes"]),
                   tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["taps"]))


def default_architecture(input_shape=(1, 28, 28), num_classes=10, channels=(16, 32, 32, 64)):
    """Four 3x3 convs with 2x2 average pooling after the second and fourth.

    Taps sit on the ReLU output of every conv, giving K = 4.
    """
    c1, c2, c3, c4 = channels
    layers = (
        LayerSpec("conv", c1), LayerSpec("relu"),
        LayerSpec("conv", c2), LayerSpec("relu"), LayerSpec("pool", kernel=2),
        LayerSpec("conv", c3), LayerSpec("relu"),
        LayerSpec("conv", c4), LayerSpec("relu"), LayerSpec("pool", kernel=2),
        LayerSpec("flatten"), LayerSpec("linear", num_classes),
    )
    return Architecture(tuple(input_shape), num_classes, layers, taps=(1, 3, 6, 8))


class ShapeError(ValueError):
    pass


class TapNet:
    """Sequential CNN whose forward pass also returns the tapped activations."""

    def __init__(self, arch: Architecture, seed=0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self._validate_taps()
        self.params = {}
        self._shapes = self._infer_shapes()
        rng = np.random.default_rng(seed)
        for i, (spec, shape) in enumerate(zip(arch.layers, self._shapes[:-1])):
            if spec.kind == "conv":
                cin = shape[0]
                fan_in = cin * spec.kernel ** 2
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, (spec.out, cin, spec.kernel, spec.kernel))
                self._add_param(f"{i}.weight", w)
                self._add_param(f"{i}.bias", np.zeros(spec.out))
            elif spec.kind == "linear":
                fan_in = shape[0]
                bound = np.sqrt(3.0 / fan_in)
                self._add_param(f"{i}.weight", rng.uniform(-bound, bound, (spec.out, fan_in)))
                self._add_param(f"{i}.bias", np.zeros(spec.out))

    def _add_param(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _validate_taps(self):
        taps, n = self.arch.taps, len(self.arch.layers)
        if not taps:
            raise ValueError("at least one tap layer is required")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"taps must be strictly increasing, got {taps}")
        if taps[0] < 0 or taps[-1] >= n:
            raise ValueError(f"tap index out of range for {n} layers: {taps}")

    def _infer_shapes(self):
        """Per-layer input shapes plus the final output shape, as (C, H, W) or (F,)."""
        shapes = [tuple(self.arch.input_shape)]
        for i, spec in enumerate(self.arch.layers):
            s = shapes[-1]
            if spec.kind == "conv":
                if len(s) != 3:
                    raise ShapeError(f"layer {i} (conv) needs a CHW input, got {s}")
                c, h, w = s
                ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                if ho <= 0 or wo <= 0:
                    raise ShapeError(f"layer {i} (conv) produces an empty map from {s}")
                out = (spec.out, ho, wo)
                if spec.skip and out != s:
                    raise ShapeError(f"layer {i} (conv) skip needs output {out} == input {s}")
            elif spec.kind == "pool":
                c, h, w = s
                if h % spec.kernel or w % spec.kernel:
                    raise ShapeError(f"layer {i} (pool) input {h}x{w} not divisible by {spec.kernel}")
                out = (c, h // spec.kernel, w // spec.kernel)
            elif spec.kind == "flatten":
                out = (int(np.prod(s)),)
            elif spec.kind == "linear":
                if len(s) != 1:
                    raise ShapeError(f"layer {i} (linear) needs a flat input, got {s}")
                out = (spec.out,)
            elif spec.kind == "relu":
                out = s
            else:
                raise ValueError(f"layer {i}: unknown kind {spec.kind!r}")
            shapes.append(out)
        if shapes[-1] != (self.arch.num_classes,):
            raise ShapeError(f"final layer emits {shapes[-1]}, expected ({self.arch.num_classes},)")
        return shapes

    @property
    def num_taps(self):
        return len(self.arch.taps)

    def parameters(self):
        return list(self.params.values())

    def forward(self, batch):
        """Return ``(logits, tap_features)`` for an NCHW batch."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        expected = tuple(self.arch.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"layer 0 ({self.arch.layers[0].kind}) expects input (B, {expected}), "
                             f"got {tuple(x.shape)}")
        taps = set(self.arch.taps)
        feats = []
        for i, spec in enumerate(self.arch.layers):
            if spec.kind == "conv":
                y = T.conv2d(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"],
                             stride=spec.stride, padding=spec.padding)
                x = T.add(y, x) if spec.skip else y
            elif spec.kind == "relu":
                x = T.relu(x)
            elif spec.kind == "pool":
                x = T.avg_pool2d(x, spec.kernel)
            elif spec.kind == "flatten":
                x = T.reshape(x, (x.shape[0], -1))
            elif spec.kind == "linear":
                x = T.linear(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
            if i in taps:
                feats.append(x)
        return x, feats

    __call__ = forward

    def predict(self, images, batch_size=500):
        """Argmax labels, evaluated in chunks without recording."""
        images = np.asarray(images, dtype=self.dtype)
        out = [self.forward(images[s:s + batch_size])[0].data.argmax(axis=1)
               for s in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def logits(self, images, batch_size=500):
        images = np.asarray(images, dtype=self.dtype)
        return np.concatenate([self.forward(images[s:s + batch_size])[0].data
                               for s in range(0, len(images), batch_size)])

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.dtype).copy()

