"""A small reverse-mode autodiff engine over float64 numpy arrays.

Tensors have rank <= 2. The only broadcasting supported is a ``(n, d)``
operand combined with a ``(d,)`` or ``(1, d)`` row, or anything combined
with a scalar. That is all the MLPs and latent algebra need.
"""
from __future__ import annotations

import json
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ValueError(f"rank {arr.ndim} tensors are not supported")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    # -- graph --------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it first")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        self._consumed = True

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2:
        return g.sum(axis=0)
    if len(shape) == 2 and g.ndim == 2 and shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    raise ValueError(f"unsupported broadcast from {shape} to {g.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
        ok = (small == () or (len(small) == 1 and len(big) == 2 and small[0] == big[1])
              or (len(small) == 2 and small[0] == 1 and small[1] == big[1]))
        if not ok:
            raise ValueError(f"unsupported broadcast between {sa} and {sb}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def identity(a) -> Tensor:
    return as_tensor(a)


def clip(a, lo, hi) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity}


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return sum(a, axis, keepdims) * (1.0 / n)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), parts, back)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + heights)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), parts, back)


def slice_cols(a, start, stop) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), back)


def take_rows(a, index) -> Tensor:
    """Gather rows (repeats allowed); the backward pass scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), back)


# ---------------------------------------------------------------------------
# softmax family


def logsumexp_rows(a) -> Tensor:
    """Row-wise log-sum-exp -> (n, 1). Entries equal to -inf are ignored."""
    a = as_tensor(a)
    m = a.data.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    return _node(out, (a,), lambda g: (g * e / s,))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (a,), back)


def group_softmax_pool(values, logits, group: int) -> Tensor:
    """Attention pooling over consecutive groups of rows.

    ``values`` is ``(G*group, D)``, ``logits`` is ``(G*group, 1)``; output row
    ``k`` is the softmax(logits)-weighted sum of rows ``k*group..k*group+group-1``.
    """
    values, logits = as_tensor(values), as_tensor(logits)
    n, D = values.shape
    if n % group or logits.shape != (n, 1):
        raise ValueError("values/logits do not split into whole groups")
    G = n // group
    z = logits.data.reshape(G, group)
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    V = values.data.reshape(G, group, D)
    out = np.einsum("gn,gnd->gd", w, V)

    def back(g):
        gv = (w[:, :, None] * g[:, None, :]).reshape(n, D)
        dw = np.einsum("gd,gnd->gn", g, V)
        dz = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        return gv, dz.reshape(n, 1)

    return _node(out, (values, logits), back)


def group_mean(values, group: int) -> Tensor:
    values = as_tensor(values)
    n, D = values.shape
    G = n // group
    out = values.data.reshape(G, group, D).mean(axis=1)

    def back(g):
        return (np.repeat(g / group, group, axis=0),)

    return _node(out, (values,), back)


def group_max(values, group: int) -> Tensor:
    """Elementwise max over each group; ties route the gradient to the first."""
    values = as_tensor(values)
    n, D = values.shape
    G = n // group
    V = values.data.reshape(G, group, D)
    arg = V.argmax(axis=1)
    out = np.take_along_axis(V, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        full = np.zeros((G, group, D))
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(n, D),)

    return _node(out, (values,), back)


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, W, b, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W = W if isinstance(W, Tensor) else Tensor(W, requires_grad=True)
        self.b = b if isinstance(b, Tensor) else Tensor(b, requires_grad=True)
        self.W.requires_grad = self.b.requires_grad = True
        if self.W.shape[1] != self.b.shape[0]:
            raise ValueError("weight/bias width mismatch")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.activation](matmul(x, self.W) + self.b)


class Mlp:
    """Stack of affine layers; hidden layers share one activation, the last is linear."""

    def __init__(self, layers: list[Linear]):
        for a, b in zip(layers, layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise ValueError("consecutive layer widths disagree")
        self.layers = layers

    @classmethod
    def build(cls, sizes: Sequence[int], rng=None, activation="relu",
              out_activation="identity", init="glorot", out_scale=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            if init == "zeros":
                W = np.zeros((fan_in, fan_out))
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                if last:
                    W *= out_scale
            layers.append(Linear(W, np.zeros(fan_out), out_activation if last else activation))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[1]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return x

    forward = __call__

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.W, layer.b)]

    def named_parameters(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}.W", layer.W
            yield f"{prefix}{i}.b", layer.b

    def spec(self):
        return {
            "sizes": [self.in_dim] + [l.W.shape[1] for l in self.layers],
            "activations": [l.activation for l in self.layers],
        }

    @classmethod
    def from_arrays(cls, spec, arrays):
        layers = []
        for i, act in enumerate(spec["activations"]):
            layers.append(Linear(arrays[2 * i].copy(), arrays[2 * i + 1].copy(), act))
        return cls(layers)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, names: Sequence[str] | None = None) -> None:
    """In-place ``p <- p - lr * grad``; aborts untouched if any gradient is non-finite."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    bad = [n for n, p in zip(names, params) if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}; step skipped")
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"QUOSR-CHECKPOINT"
CKPT_VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays plus JSON metadata; byte-stable for equal input."""
    names = list(arrays)
    header = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    # write beside the target and rename so an interrupted save never leaves a torn file
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + b" %d\n" % CKPT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        first = fh.readline().rstrip(b"\n")
        magic, _, version = first.partition(b" ")
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        if int(version) != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(version)}")
        header = json.loads(fh.readline())
        arrays = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {t['name']}")
            arrays[t["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, header["meta"]
