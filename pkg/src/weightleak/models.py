"""Target architectures (MLP and LeNet-style convnet) and their weights."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, DimensionError


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Affine:
    n_in: int
    n_out: int
    use_bias: bool = False
    kind = "affine"


@dataclass(frozen=True)
class Conv2d:
    c_in: int
    c_out: int
    kernel: int
    pad: int = 0
    stride: int = 1
    use_bias: bool = False
    kind = "conv2d"


@dataclass(frozen=True)
class Sigmoid:
    kind = "sigmoid"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


Layer = Union[Flatten, Affine, Conv2d, Sigmoid, ReLU]


def _out_shape(layer: Layer, shape: tuple, position: int) -> tuple:
    name = f"layer {position} ({layer.kind})"
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, Affine):
        if shape != (layer.n_in,):
            raise DimensionError(f"{name}: expects input ({layer.n_in},), got {shape}")
        return (layer.n_out,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.c_in:
            raise DimensionError(f"{name}: expects [{layer.c_in}, H, W] input, got {list(shape)}")
        _, H, W = shape
        oh = (H + 2 * layer.pad - layer.kernel) // layer.stride + 1
        ow = (W + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"{name}: input {list(shape)} too small for {layer.kernel}x{layer.kernel} kernel")
        return (layer.c_out, oh, ow)
    return shape


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus input shape; validated on construction."""

    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = ""
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers, start=1):
            shape = _out_shape(layer, shape, i)
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise DimensionError(f"model output {shape} does not match num_classes={self.num_classes}")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def param_shapes(self) -> list[tuple]:
        out = []
        for layer in self.layers:
            if isinstance(layer, (Affine, Conv2d)):
                out += _layer_param_shapes(layer)
        return out

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes)

    @property
    def fingerprint(self) -> str:
        text = repr((self.layers, self.input_shape, self.num_classes))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Per-tensor parameters bound to a spec by fingerprint."""

    tensors: tuple
    fingerprint: str

    def __post_init__(self):
        tensors = []
        for t in self.tensors:
            arr = np.array(t, dtype=np.float64)
            arr.flags.writeable = False
            tensors.append(arr)
        object.__setattr__(self, "tensors", tuple(tensors))

    @classmethod
    def for_spec(cls, spec: ModelSpec, tensors: Sequence) -> "ModelWeights":
        shapes = [np.shape(t) for t in tensors]
        if shapes != spec.param_shapes:
            raise ContractError(f"weight shapes {shapes} do not match spec {spec.param_shapes}")
        return cls(tuple(tensors), spec.fingerprint)

    @property
    def shapes(self) -> list[tuple]:
        return [t.shape for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def __getitem__(self, i) -> np.ndarray:
        return self.tensors[i]

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    def unflatten(self, vector) -> "ModelWeights":
        vector = np.asarray(vector, dtype=np.float64)
        sizes = [t.size for t in self.tensors]
        if vector.shape != (sum(sizes),):
            raise ContractError(f"flat vector of length {vector.size} does not match {sum(sizes)} parameters")
        parts = np.split(vector, np.cumsum(sizes)[:-1])
        return self.like([p.reshape(t.shape) for p, t in zip(parts, self.tensors)])

    def like(self, tensors: Sequence) -> "ModelWeights":
        """Same fingerprint, new values (shapes checked)."""
        tensors = list(tensors)
        if [np.shape(t) for t in tensors] != self.shapes:
            raise ContractError("replacement tensors do not match weight shapes")
        return ModelWeights(tuple(tensors), self.fingerprint)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(t, t) for t in self.tensors)))

    def __sub__(self, other: "ModelWeights") -> "ModelWeights":
        check_compatible(self, other)
        return self.like([a - b for a, b in zip(self.tensors, other.tensors)])

    def allclose(self, other: "ModelWeights", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shapes == other.shapes and all(
            np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self.tensors, other.tensors)
        )

    def equal(self, other: "ModelWeights") -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors)
        )


def check_compatible(a: ModelWeights, b: ModelWeights) -> None:
    if a.shapes != b.shapes:
        raise ContractError(f"weight shapes differ: {a.shapes} vs {b.shapes}")


def build_mlp(input_shape, hidden: int, num_classes: int, use_bias: bool = False, name: str = "") -> ModelSpec:
    """Flatten -> Affine(in, hidden) -> ReLU -> Affine(hidden, classes)."""
    if hidden < 1:
        raise ValueError(f"hidden must be >= 1, got {hidden}")
    n_in = math.prod(input_shape)
    layers = (
        Flatten(),
        Affine(n_in, hidden, use_bias),
        ReLU(),
        Affine(hidden, num_classes, use_bias),
    )
    return ModelSpec(layers, tuple(input_shape), num_classes, name)


def build_lenet(input_shape, num_classes: int, use_bias: bool = False, name: str = "") -> ModelSpec:
    """Three sigmoid 5x5 convolutions (strides 2, 2, 1) and a linear head."""
    c, h, w = input_shape
    convs = [
        Conv2d(c, 12, 5, pad=2, stride=2, use_bias=use_bias),
        Conv2d(12, 12, 5, pad=2, stride=2, use_bias=use_bias),
        Conv2d(12, 12, 5, pad=2, stride=1, use_bias=use_bias),
    ]
    shape = tuple(input_shape)
    layers: list = []
    for conv in convs:
        layers += [conv, Sigmoid()]
        shape = _out_shape(conv, shape, len(layers) - 1)
    layers += [Flatten(), Affine(math.prod(shape), num_classes, use_bias)]
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes, name)


PRESETS = {
    "paper-mlp": lambda: build_mlp((3, 224, 224), 32, 200, name="paper-mlp"),
    "paper-lenet": lambda: build_lenet((3, 224, 224), 200, name="paper-lenet"),
    "tiny-mlp": lambda: build_mlp((3, 8, 8), 32, 10, use_bias=True, name="tiny-mlp"),
    "tiny-lenet": lambda: build_lenet((3, 16, 16), 10, name="tiny-lenet"),
}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


def _fan_in(layer) -> int:
    if isinstance(layer, Conv2d):
        return layer.c_in * layer.kernel * layer.kernel
    return layer.n_in


def init_weights(spec: ModelSpec, seed: int) -> ModelWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, seeded."""
    rng = np.random.default_rng(seed)
    tensors = []
    for layer in spec.layers:
        if not isinstance(layer, (Affine, Conv2d)):
            continue
        bound = 1.0 / math.sqrt(_fan_in(layer))
        for shape in _layer_param_shapes(layer):
            tensors.append(rng.uniform(-bound, bound, size=shape))
    return ModelWeights.for_spec(spec, tensors)


def _layer_param_shapes(layer) -> list[tuple]:
    if isinstance(layer, Affine):
        shapes = [(layer.n_in, layer.n_out)]
        return shapes + [(layer.n_out,)] if layer.use_bias else shapes
    shapes = [(layer.c_out, layer.c_in, layer.kernel, layer.kernel)]
    return shapes + [(layer.c_out,)] if layer.use_bias else shapes


def forward(spec: ModelSpec, weights, x) -> ad.DiffVar:
    """Logits [B, num_classes].

    ``weights`` is a ``ModelWeights`` or a list of ``DiffVar`` parameters in
    spec order; ``x`` is an array or ``DiffVar`` of shape [B, *input_shape].
    """
    if isinstance(weights, ModelWeights):
        if weights.fingerprint != spec.fingerprint:
            raise ContractError(
                f"weights fingerprint {weights.fingerprint} does not match spec {spec.fingerprint}"
            )
        params = list(weights.tensors)
    else:
        params = list(weights)
        if [tuple(np.shape(getattr(p, "value", p))) for p in params] != spec.param_shapes:
            raise ContractError("parameter list does not match spec")
    h = x if isinstance(x, ad.DiffVar) else ad.constant(ad.tensor(x))
    if h.shape[1:] != spec.input_shape:
        raise DimensionError(f"input batch shape {h.shape} does not match model input {spec.input_shape}")
    batch = h.shape[0]
    it = iter(params)
    for layer in spec.layers:
        if isinstance(layer, Flatten):
            h = ad.reshape(h, (batch, -1))
        elif isinstance(layer, Affine):
            w = next(it)
            b = next(it) if layer.use_bias else None
            h = ad.affine(h, w, layer.use_bias, b)
        elif isinstance(layer, Conv2d):
            k = next(it)
            h = ad.conv2d(h, k, layer.pad, layer.stride)
            if layer.use_bias:
                b = next(it)
                h = ad.add(h, ad.reshape(b, (1, -1, 1, 1)))
        elif isinstance(layer, Sigmoid):
            h = ad.sigmoid(h)
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
    return h
