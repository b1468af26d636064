"""Small convolutional classifiers built on :mod:`nolab.tensor`.

``convnet1`` is 32C-M-64C-M-1024FC and ``convnet2`` is 10C-M-20C-M-320FC,
where the FC width is the flattened feature size (5x5 valid convolutions on
28x28 inputs) feeding a classes-wide output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ARCHITECTURES = ("convnet1", "convnet2", "custom-small-cnn")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool | relu | flatten | fullyconnected
    name: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    filters: int = 0
    kernel: int = 0
    padding: int = 0
    units: int = 0

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            c = self.in_shape[0]
            return {"w": (self.filters, c, self.kernel, self.kernel), "b": (self.filters,)}
        if self.kind == "fullyconnected":
            return {"w": (self.in_shape[0], self.units), "b": (self.units,)}
        return {}

    @property
    def fan_in(self) -> int:
        if self.kind == "conv":
            return self.in_shape[0] * self.kernel * self.kernel
        if self.kind == "fullyconnected":
            return self.in_shape[0]
        return 0


class _Builder:
    def __init__(self, input_shape: Sequence[int]):
        self.shape = tuple(int(s) for s in input_shape)
        self.layers: list[LayerSpec] = []
        self._count: dict[str, int] = {}

    def _name(self, prefix: str) -> str:
        self._count[prefix] = self._count.get(prefix, 0) + 1
        return f"{prefix}{self._count[prefix]}"

    def _push(self, kind, prefix, out_shape, **kw):
        self.layers.append(LayerSpec(kind, self._name(prefix), self.shape, tuple(out_shape), **kw))
        self.shape = tuple(out_shape)

    def conv(self, filters: int, kernel: int, padding: int = 0):
        c, h, w = self.shape
        oh, ow = T.conv_output_hw(h, w, kernel, padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv {kernel}x{kernel} does not fit input {self.shape}")
        self._push("conv", "conv", (filters, oh, ow), filters=filters, kernel=kernel, padding=padding)

    def relu(self):
        self._push("relu", "relu", self.shape)

    def pool(self):
        c, h, w = self.shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool does not fit input {self.shape}")
        self._push("maxpool", "pool", (c, *T.maxpool_output_hw(h, w)))

    def flatten(self):
        self._push("flatten", "flatten", (int(np.prod(self.shape)),))

    def dense(self, units: int):
        self._push("fullyconnected", "fc", (units,), units=units)


def architecture(
    name: str,
    classes: int,
    input_shape: Sequence[int],
    conv: Sequence[int] = (8,),
    kernel: int = 3,
    padding: int = 0,
    pool: bool = True,
    hidden: Sequence[int] = (),
) -> list[LayerSpec]:
    """Layer stack for a named architecture.

    ``conv``, ``kernel``, ``padding``, ``pool`` and ``hidden`` only apply to
    ``custom-small-cnn``; with ``conv=()`` it degenerates to an MLP.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ShapeError(f"input shape must be (C, H, W) with positive extents, got {tuple(input_shape)}")
    b = _Builder(input_shape)
    if name in ("convnet1", "convnet2"):
        widths = (32, 64) if name == "convnet1" else (10, 20)
        for f in widths:
            b.conv(f, 5)
            b.relu()
            b.pool()
        b.flatten()
    elif name == "custom-small-cnn":
        for f in conv:
            b.conv(int(f), kernel, padding)
            b.relu()
            if pool:
                b.pool()
        b.flatten()
        for u in hidden:
            b.dense(int(u))
            b.relu()
    else:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    b.dense(classes)
    return b.layers


def parameter_count(layers: Sequence[LayerSpec]) -> int:
    return sum(int(np.prod(s)) for layer in layers for s in layer.param_shapes.values())


@dataclass
class Model:
    arch: str
    classes: int
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    params: dict[str, Tensor]
    options: dict = field(default_factory=dict)

    @property
    def taps(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x) -> Tensor:
        return forward_with_taps(self, x)[0]

    def copy(self) -> "Model":
        params = {k: Tensor(v.data, requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return Model(self.arch, self.classes, self.input_shape, list(self.layers), params, dict(self.options))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def build_model(
    name: str,
    classes: int = 10,
    input_shape: Sequence[int] = (1, 28, 28),
    seed: int = 0,
    **options,
) -> Model:
    """Build a model with weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    layers = architecture(name, classes, input_shape, **options)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for layer in layers:
        bound = 1.0 / np.sqrt(layer.fan_in) if layer.fan_in else 0.0
        for pname, shape in layer.param_shapes.items():
            key = f"{layer.name}.{pname}"
            params[key] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=key)
    return Model(name, classes, tuple(int(s) for s in input_shape), layers, params, dict(options))


def _apply(layer: LayerSpec, h: Tensor, params: dict[str, Tensor]) -> Tensor:
    if layer.kind == "conv":
        out = T.conv2d(h, params[f"{layer.name}.w"], layer.padding)
        return T.add_bias(out, params[f"{layer.name}.b"])
    if layer.kind == "relu":
        return T.relu(h)
    if layer.kind == "maxpool":
        return T.maxpool2d(h)
    if layer.kind == "flatten":
        return T.reshape(h, (h.shape[0], -1))
    if layer.kind == "fullyconnected":
        return T.add_bias(T.matmul(h, params[f"{layer.name}.w"]), params[f"{layer.name}.b"])
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def forward_with_taps(model: Model, x, taps: Sequence[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Logits plus the requested post-layer activations.

    Tapped activations are returned flattened to one row per sample; they are
    the same tensors that feed the next layer, reshaped.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    wanted = set(taps)
    unknown = wanted.difference(model.taps)
    if unknown:
        raise KeyError(f"unknown taps {sorted(unknown)}; available: {model.taps}")
    found: dict[str, Tensor] = {}
    h = x
    for layer in model.layers:
        h = _apply(layer, h, model.params)
        if layer.name in wanted:
            found[layer.name] = T.reshape(h, (h.shape[0], -1))
    return h, {name: found[name] for name in taps}


def predict_logits(model: Model, x, batch_size: int = 500) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out = [model(x[i : i + batch_size]).data for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.asarray(logits).argmax(axis=1)


def predict(model: Model, x, noise=None, batch_size: int = 500) -> np.ndarray:
    """Class index per sample, composing ``x`` with the bank's mean template when given."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if noise is not None:
        x = noise.compose_mean(x)
    return argmax_lowest(predict_logits(model, x, batch_size))
