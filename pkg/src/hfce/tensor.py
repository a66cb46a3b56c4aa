"""Minimal dense-tensor numerics with reverse-mode differentiation.

Just enough machinery for the recurrent estimator: float64 arrays (float32
passes through for inference benchmarking), a handful of ops with hand-coded
backward rules, and a topological-order backward pass. Each op's backward
returns the gradients for its parents; the engine routes them, so one
backward call contributes exactly one pass worth of gradient to every
reachable node's persistent `grad` buffer (repeating a call doubles it).
Graphs are acyclic by construction since every op creates a fresh output
node. Broadcasting follows numpy rules; gradients are summed back to the
operand shapes.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ShapeError

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "nan_input",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.nan_input = False
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; the named module functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record graph linkage only when gradients can flow."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward_fn)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward_fn)


def scale(t, alpha, beta=0.0) -> Tensor:
    """Affine map alpha * t + beta with constant alpha/beta (scalar or array)."""
    t = _as_tensor(t)
    # python scalars are weakly typed and preserve float32 operands
    alpha = float(alpha) if np.isscalar(alpha) else np.asarray(alpha)

    def backward_fn(g):
        return (_unbroadcast(g * alpha, t.shape),)

    return _node(alpha * t.data + beta, (t,), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product; operands of ndim >= 2, leading dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward_fn(g):
        return (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), backward_fn)


def transpose(t) -> Tensor:
    """Swap the last two axes."""
    t = _as_tensor(t)
    if t.ndim < 2:
        raise ShapeError("transpose needs ndim >= 2")

    def backward_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(t.data, -1, -2), (t,), backward_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward_fn)


def slice_axis(t, start: int, stop: int, axis: int = -1) -> Tensor:
    t = _as_tensor(t)
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _node(t.data[index], (t,), backward_fn)


def gather_rows(t, order: np.ndarray) -> Tensor:
    """Permute along axis -2 (token axis). `order` is (T,) or per-batch (B, T)."""
    t = _as_tensor(t)
    order = np.asarray(order)
    inverse = np.argsort(order, axis=-1, kind="stable")
    if order.ndim == 1:
        out = t.data[..., order, :]
    else:
        out = np.take_along_axis(t.data, order[..., :, None], axis=-2)

    def backward_fn(g):
        if order.ndim == 1:
            return (g[..., inverse, :],)
        return (np.take_along_axis(g, inverse[..., :, None], axis=-2),)

    return _node(out, (t,), backward_fn)


def tile_leading(t, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis (batch expansion)."""
    t = _as_tensor(t)

    def backward_fn(g):
        return (g.sum(axis=0),)

    return _node(np.broadcast_to(t.data, (n,) + t.shape).copy(), (t,), backward_fn)


def tsum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, t.shape).copy(),)

    return _node(t.data.sum(axis=axis, keepdims=keepdims), (t,), backward_fn)


def tmean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    n = t.data.size if axis is None else t.shape[axis]
    return scale(tsum(t, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    y = expit(t.data)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _node(y, (t,), backward_fn)


def gelu(t) -> Tensor:
    """Gaussian-error smooth nonlinearity 0.5 x (1 + erf(x / sqrt(2)))."""
    t = _as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (t,), backward_fn)


def softmax(t, axis: int = -1) -> Tensor:
    """Numerically stable softmax; NaN inputs propagate and flag the output."""
    t = _as_tensor(t)
    x = t.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    out = _node(y, (t,), backward_fn)
    if np.isnan(x).any():
        out.nan_input = True  # diagnostic flag; NaNs already propagated
    return out


_LN_EPS = 1e-30  # guards exactly-constant rows only; keeps variance == 1 to 1e-10


def layer_norm(t, gain, bias) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    t, gain, bias = _as_tensor(t), _as_tensor(gain), _as_tensor(bias)
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xh = xc * inv

    def backward_fn(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xh).mean(axis=-1, keepdims=True)
        return (inv * (gh - m1 - xh * m2),
                _unbroadcast(g * xh, gain.shape),
                _unbroadcast(g, bias.shape))

    return _node(xh * gain.data + bias.data, (t, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    The pass routes gradients through a private per-call table and adds each
    node's total into its persistent `grad` buffer exactly once, so calling
    backward twice on the same graph doubles every accumulated gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    pass_grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pass_grads.pop(id(node), None)
        if g is None:
            continue
        node.accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pass_grads:
                pass_grads[key] = pass_grads[key] + pg
            else:
                pass_grads[key] = pg


# ---------------------------------------------------------------------------
# parameters and checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors; iteration order is insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter '{k}'")
            if self._params[k].data.shape != v.shape:
                raise ShapeError(f"parameter '{k}' shape {v.shape} != "
                                 f"{self._params[k].data.shape}")
            self._params[k].data = np.array(v, dtype=np.float64)


_CKPT_MAGIC = b"HFT1"


def save_checkpoint(path, store: ParamStore, hyper: dict, meta: Optional[dict] = None) -> None:
    """Binary checkpoint: JSON header (names/shapes + hyperparameters), then
    little-endian float64 blobs in header order."""
    entries = [{"name": k, "shape": list(t.data.shape)} for k, t in store.items()]
    header = json.dumps({"hyper": hyper, "meta": meta or {}, "params": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        store = ParamStore()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            blob = fh.read(8 * n)
            store.add(entry["name"],
                      np.frombuffer(blob, dtype="<f8").reshape(shape).copy())
    return store, header["hyper"], header.get("meta", {})
