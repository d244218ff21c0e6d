"""Architecture descriptors, parameter stores and forward passes.

An architecture is a JSON-able dict::

    {"name": "generator", "input": [20], "cond_dim": 1, "layers": [
        {"op": "cond"}, {"op": "reshape", "shape": [21, 1, 1]},
        {"op": "convT", "in": 21, "out": 32, "k": 4, "stride": 1, "pad": 0}, ...]}

Shapes exclude the batch axis. ``{"op": "cond"}`` appends the conditioning
vector to a flat activation. Parameters are named ``"<layer index>.weight"``
and ``"<layer index>.bias"``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ArchError",
    "ShapeMismatchError",
    "ModelParams",
    "AdamState",
    "infer_shapes",
    "build_model",
    "param_tensors",
    "apply",
    "forward",
    "generator_arch",
    "discriminator_arch",
    "autoencoder_arch",
    "INIT_STD",
    "LEAKY_SLOPE",
]

INIT_STD = 0.02
LEAKY_SLOPE = 0.2

_PARAM_OPS = ("dense", "conv", "convT")


class ArchError(ValueError):
    """Inconsistent architecture descriptor."""


class ShapeMismatchError(ValueError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ModelParams:
    arch: dict
    tensors: dict[str, np.ndarray]
    opt_state: AdamState = field(default_factory=AdamState)

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype if self.tensors else np.dtype(np.float32)

    def copy(self) -> "ModelParams":
        return ModelParams(
            copy.deepcopy(self.arch),
            {k: v.copy() for k, v in self.tensors.items()},
            AdamState(self.opt_state.step, {k: v.copy() for k, v in self.opt_state.m.items()},
                      {k: v.copy() for k, v in self.opt_state.v.items()}),
        )


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def infer_shapes(arch: dict) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis excluded); raises :class:`ArchError`."""
    shape = tuple(arch["input"])
    cond_dim = int(arch.get("cond_dim", 0))
    shapes = []
    for i, layer in enumerate(arch["layers"]):
        op = layer["op"]
        where = f"layer {i} ({op})"
        if op == "dense":
            if len(shape) != 1 or shape[0] != layer["in"]:
                raise ArchError(f"{where}: expects flat input of {layer['in']}, got {shape}")
            shape = (layer["out"],)
        elif op in ("conv", "convT"):
            if len(shape) != 3 or shape[0] != layer["in"]:
                raise ArchError(f"{where}: expects ({layer['in']}, H, W), got {shape}")
            k, s, p = layer["k"], layer["stride"], layer["pad"]
            if op == "conv":
                h, w = _conv_out(shape[1], k, s, p), _conv_out(shape[2], k, s, p)
            else:
                h, w = (shape[1] - 1) * s - 2 * p + k, (shape[2] - 1) * s - 2 * p + k
            if h < 1 or w < 1:
                raise ArchError(f"{where}: output would be empty for input {shape}")
            shape = (layer["out"], h, w)
        elif op == "inorm":
            if len(shape) != 3:
                raise ArchError(f"{where}: needs (C, H, W) input, got {shape}")
        elif op == "reshape":
            new = tuple(layer["shape"])
            if int(np.prod(new)) != int(np.prod(shape)):
                raise ArchError(f"{where}: cannot reshape {shape} to {new}")
            shape = new
        elif op == "cond":
            if cond_dim < 1:
                raise ArchError(f"{where}: architecture has cond_dim=0")
            if len(shape) != 1:
                raise ArchError(f"{where}: conditioning concatenates onto flat input, got {shape}")
            shape = (shape[0] + cond_dim,)
        elif op in ("lrelu", "relu", "tanh", "sigmoid", "dropout"):
            pass
        else:
            raise ArchError(f"{where}: unknown op")
        shapes.append(shape)
    return shapes


def build_model(arch: dict, seed: int, dtype=np.float32) -> ModelParams:
    """Initialize parameters for ``arch`` deterministically from ``seed``.

    Convolution weights (and dense weights with ``"init": "dcgan"``) are drawn
    from N(0, 0.02^2); other dense weights from N(0, 1/fan_in). Biases are zero.
    """
    infer_shapes(arch)
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for i, layer in enumerate(arch["layers"]):
        op = layer["op"]
        if op not in _PARAM_OPS:
            continue
        if op == "dense":
            wshape = (layer["in"], layer["out"])
            std = INIT_STD if layer.get("init") == "dcgan" else 1.0 / np.sqrt(layer["in"])
        elif op == "conv":
            wshape = (layer["out"], layer["in"], layer["k"], layer["k"])
            std = INIT_STD
        else:
            wshape = (layer["in"], layer["out"], layer["k"], layer["k"])
            std = INIT_STD
        tensors[f"{i}.weight"] = (rng.standard_normal(wshape) * std).astype(dtype)
        tensors[f"{i}.bias"] = np.zeros(layer["out"], dtype=dtype)
    return ModelParams(copy.deepcopy(arch), tensors)


def param_tensors(model: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in model.tensors.items()}


def apply(arch: dict, params: dict[str, Tensor], x, cond=None, *, training: bool = False,
          rng: np.random.Generator | None = None, stop: int | None = None) -> Tensor:
    """Run layers ``[0, stop)`` of ``arch`` on a batch.

    ``cond`` is a (B, cond_dim) array/tensor, required iff the architecture
    has a ``cond`` layer within the evaluated range.
    """
    h = T.as_tensor(x)
    expected = tuple(arch["input"])
    if tuple(h.shape[1:]) != expected:
        raise ShapeMismatchError(f"{arch.get('name', 'model')}: input shape {h.shape[1:]} != {expected}")
    layers = arch["layers"] if stop is None else arch["layers"][:stop]
    batch = h.shape[0]
    for i, layer in enumerate(layers):
        op = layer["op"]
        if op == "dense":
            h = T.matmul(h, params[f"{i}.weight"]) + params[f"{i}.bias"]
        elif op == "conv":
            h = T.conv2d(h, params[f"{i}.weight"], params[f"{i}.bias"], layer["stride"], layer["pad"])
        elif op == "convT":
            h = T.conv_transpose2d(h, params[f"{i}.weight"], params[f"{i}.bias"], layer["stride"], layer["pad"])
        elif op == "inorm":
            h = T.instance_norm(h)
        elif op == "lrelu":
            h = T.leaky_relu(h, layer.get("alpha", LEAKY_SLOPE))
        elif op == "relu":
            h = T.relu(h)
        elif op == "tanh":
            h = T.tanh(h)
        elif op == "sigmoid":
            h = T.sigmoid(h)
        elif op == "dropout":
            h = T.dropout(h, layer["p"], rng, training)
        elif op == "reshape":
            h = T.reshape(h, (batch, *layer["shape"]))
        elif op == "cond":
            if cond is None:
                raise ShapeMismatchError("conditional architecture called without a conditioning input")
            c = T.as_tensor(cond)
            if c.requires_grad:
                c = T.reshape(c, (batch, -1))
            else:
                c = Tensor(c.data.reshape(batch, -1).astype(h.dtype, copy=False))
            if c.shape[1] != arch.get("cond_dim", 0):
                raise ShapeMismatchError(f"conditioning width {c.shape[1]} != {arch.get('cond_dim', 0)}")
            h = T.concat([h, c], axis=1)
    return h


def forward(model: ModelParams, inputs, cond=None, *, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Inference forward pass returning a plain array."""
    x = np.asarray(inputs, dtype=model.dtype)
    c = None if cond is None else np.asarray(cond, dtype=model.dtype).reshape(x.shape[0], -1)
    return apply(model.arch, param_tensors(model, requires_grad=False), x, c, training=training, rng=rng).data


# --- default architectures ---------------------------------------------------------


def _levels(size: int) -> int:
    n = int(round(np.log2(size)))
    if 2 ** n != size or size < 8:
        raise ArchError(f"conv architecture needs a power-of-two grid size >= 8, got {size}")
    return n - 2


def generator_arch(size: int, latent_dim: int = 20, cond_dim: int = 0, kind: str = "conv",
                   width: int = 16) -> dict:
    """DCGAN-style generator mapping (latent ++ cond) to a (size, size) grid in (-1, 1).

    ``conv``: ConvT(4x4 from 1x1) then stride-2 ConvT blocks doubling the grid, each
    with InstanceNorm and LeakyReLU(0.2), a final stride-2 ConvT to one channel and
    Tanh. Channel widths halve from ``width * 2^(levels-1)`` down to ``width``, where
    ``levels = log2(size) - 2``; ``size=64, width=64`` gives the 512-256-128-64 stack.
    ``mlp``: latent -> 256 -> 1024 -> size^2 with LeakyReLU and Tanh.
    """
    d_in = latent_dim + cond_dim
    layers: list[dict] = [{"op": "cond"}] if cond_dim else []
    if kind == "mlp":
        layers += [
            {"op": "dense", "in": d_in, "out": 256}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
            {"op": "dense", "in": 256, "out": 1024}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
            {"op": "dense", "in": 1024, "out": size * size}, {"op": "tanh"},
            {"op": "reshape", "shape": [size, size]},
        ]
    elif kind == "conv":
        levels = _levels(size)
        chans = [width * 2 ** (levels - 1 - j) for j in range(levels)]
        layers.append({"op": "reshape", "shape": [d_in, 1, 1]})
        prev = d_in
        for j, ch in enumerate(chans):
            stride, pad = (1, 0) if j == 0 else (2, 1)
            layers += [
                {"op": "convT", "in": prev, "out": ch, "k": 4, "stride": stride, "pad": pad},
                {"op": "inorm"}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
            ]
            prev = ch
        layers += [
            {"op": "convT", "in": prev, "out": 1, "k": 4, "stride": 2, "pad": 1},
            {"op": "tanh"}, {"op": "reshape", "shape": [size, size]},
        ]
    else:
        raise ArchError(f"unknown architecture kind {kind!r}")
    return {"name": "generator", "kind": kind, "input": [latent_dim], "cond_dim": cond_dim, "layers": layers}


def discriminator_arch(size: int, cond_dim: int = 0, kind: str = "conv", width: int = 16,
                       features: int = 64) -> dict:
    """Discriminator ending in Linear(features [+cond]) -> Sigmoid.

    ``conv``: stride-2 Conv blocks (InstanceNorm, LeakyReLU) halving the grid to 4x4,
    then Conv4x4 to ``features`` channels at 1x1, flattened. ``mlp`` mirrors the
    generator: size^2 -> 1024 -> 256 -> features.
    """
    layers: list[dict] = []
    if kind == "mlp":
        layers += [
            {"op": "reshape", "shape": [size * size]},
            {"op": "dense", "in": size * size, "out": 1024}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
            {"op": "dense", "in": 1024, "out": 256}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
            {"op": "dense", "in": 256, "out": features}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
        ]
    elif kind == "conv":
        levels = _levels(size)
        layers.append({"op": "reshape", "shape": [1, size, size]})
        prev = 1
        for j in range(levels):
            ch = width * 2 ** j
            layers += [
                {"op": "conv", "in": prev, "out": ch, "k": 4, "stride": 2, "pad": 1},
                {"op": "inorm"}, {"op": "lrelu", "alpha": LEAKY_SLOPE},
            ]
            prev = ch
        layers += [
            {"op": "conv", "in": prev, "out": features, "k": 4, "stride": 1, "pad": 0},
            {"op": "reshape", "shape": [features]},
        ]
    else:
        raise ArchError(f"unknown architecture kind {kind!r}")
    if cond_dim:
        layers.append({"op": "cond"})
    layers += [{"op": "dense", "in": features + cond_dim, "out": 1}, {"op": "sigmoid"}]
    return {"name": "discriminator", "kind": kind, "input": [size, size], "cond_dim": cond_dim, "layers": layers}


def autoencoder_arch(size: int, bottleneck: int = 128, dropout: float = 0.5) -> dict:
    """Linear -> ReLU -> Dropout -> Linear, flattening the grid."""
    n = size * size
    return {
        "name": "autoencoder", "kind": "mlp", "input": [size, size], "cond_dim": 0,
        "layers": [
            {"op": "reshape", "shape": [n]},
            {"op": "dense", "in": n, "out": bottleneck}, {"op": "relu"},
            {"op": "dropout", "p": dropout},
            {"op": "dense", "in": bottleneck, "out": n},
            {"op": "reshape", "shape": [size, size]},
        ],
    }
