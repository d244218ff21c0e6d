"""Reverse-mode autodiff over numpy arrays.

Only the operations the GAN, autoencoder and latent-inversion objectives need.
Each op records its parents and a closure mapping the output gradient to
parent gradients; :meth:`Tensor.backward` walks the graph in reverse
topological order. Gradients are cast back to each parent's dtype, so
float64 loss reductions sit on top of float32 model math without promoting
the model.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "as_tensor",
    "gradients",
    "NonScalarLossError",
    "matmul",
    "add",
    "mul",
    "div",
    "sum",
    "mean",
    "reshape",
    "concat",
    "absolute",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "dropout",
    "conv2d",
    "conv_transpose2d",
    "instance_norm",
    "bce",
    "bce_with_logits",
]


class NonScalarLossError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise NonScalarLossError(f"backward() on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _make(data, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (), backward=backward if req else None)


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate a scalar ``loss`` and collect gradients for ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    for p in params.values():
        p.grad = None
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise and linear algebra --------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), back)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Sum accumulated in float64."""
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), back)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    dtype = np.result_type(*[x.dtype for x in xs])
    out = np.concatenate([x.data.astype(dtype, copy=False) for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, xs, back)


def absolute(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g * np.sign(x.data),)

    return _make(np.abs(x.data), (x,), back)


def log(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def back(g):
        return (g * (1 - out * out),)

    return _make(out, (x,), back)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def back(g):
        return (g * out * (1 - out),)

    return _make(out, (x,), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), back)


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)

    def back(g):
        return (g * slope,)

    return _make(x.data * slope, (x,), back)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def back(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), back)


# --- convolutions ------------------------------------------------------------------


def conv2d(x, w, b, stride: int, pad: int) -> Tensor:
    """``x`` (B, C, H, W), ``w`` (O, C, k, k), ``b`` (O,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    cols = kernels.im2col(x.data, k, stride, pad)
    w2 = w.data.reshape(O, -1)
    out = (w2 @ cols).reshape(O, B, oh, ow).transpose(1, 0, 2, 3) + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        dw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        dx = kernels.col2im(np.ascontiguousarray(w2.T @ g2), (B, C, H, W), k, stride, pad) if x.requires_grad else None
        return dx, dw, db

    return _make(out, (x, w, b), back)


def conv_transpose2d(x, w, b, stride: int, pad: int) -> Tensor:
    """Transposed convolution. ``x`` (B, C, H, W), ``w`` (C, O, k, k), ``b`` (O,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, C, H, W = x.shape
    _, O, k, _ = w.shape
    oh = (H - 1) * stride - 2 * pad + k
    ow = (W - 1) * stride - 2 * pad + k
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(C, -1)
    w2 = w.data.reshape(C, -1)
    cols = np.ascontiguousarray(w2.T @ x2)
    out = kernels.col2im(cols, (B, O, oh, ow), k, stride, pad) + b.data[None, :, None, None]

    def back(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), k, stride, pad)
        dx = None
        if x.requires_grad:
            dx = np.ascontiguousarray((w2 @ gcols).reshape(C, B, H, W).transpose(1, 0, 2, 3))
        dw = (x2 @ gcols.T).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return dx, dw, db

    return _make(out, (x, w, b), back)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""
    x = as_tensor(x)
    axes = (2, 3)
    n = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gs = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)

    return _make(xhat, (x,), back)


# --- losses --------------------------------------------------------------------------


def bce(p, target, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities against (soft) targets, in float64."""
    p, t = as_tensor(p), np.asarray(target, dtype=np.float64)
    pd = np.clip(p.data.astype(np.float64), eps, 1 - eps)
    n = pd.size
    val = -np.mean(t * np.log(pd) + (1 - t) * np.log1p(-pd))

    def back(g):
        return (g * (pd - t) / (pd * (1 - pd)) / n,)

    return _make(np.asarray(val), (p,), back)


def bce_with_logits(z, target) -> Tensor:
    """``bce(sigmoid(z), target)`` computed stably from logits, in float64."""
    z, t = as_tensor(z), np.asarray(target, dtype=np.float64)
    zd = z.data.astype(np.float64)
    n = zd.size
    # log(1 + exp(-|z|)) + max(z, 0) - t*z
    val = np.mean(np.logaddexp(0.0, zd) - t * zd)

    def back(g):
        return (g * (_sigmoid(zd) - t) / n,)

    return _make(np.asarray(val), (z,), back)
