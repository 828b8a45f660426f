"""A small reverse-mode autodiff engine on top of numpy.

Only the operations the completion network needs are provided: affine
layers, rectifiers, per-point MLPs, max-pooling over points, concatenation,
gathers, and a few elementwise/reduction ops. Gradients are exact for the
piecewise-smooth functions involved (ties in max-pool go to the lowest index).

A graph node is recorded only when at least one input requires a gradient,
so frozen parameters cost nothing on the backward pass.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import StateError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError("seed gradient shape does not match tensor shape")

        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _dtype_of(*xs):
    return np.result_type(*[x.data for x in xs])


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0 and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(x, w) -> Tensor:
    """``x @ w`` with ``x`` of shape ``(..., D_in)`` and ``w`` of ``(D_in, D_out)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _result(x.data @ w.data, (x, w), backward)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map applied to the last axis: ``x @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1:]} does not match weight {weight.shape}")
    if bias is None:
        return matmul(x, weight)
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    out += bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        g2 = g.reshape(-1, weight.shape[1])
        gw = x.data.reshape(-1, weight.shape[0]).T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def shared_mlp(x, layers: Sequence[tuple], final_activation: bool = False) -> Tensor:
    """Apply the same dense+rectifier stack to every row of the last axis.

    ``layers`` is a sequence of ``(weight, bias)`` pairs. Hidden layers use a
    rectifier; the last layer is linear unless ``final_activation``.
    """
    if not layers:
        raise ValueError("shared_mlp needs at least one layer")
    h = as_tensor(x)
    for i, (w, b) in enumerate(layers):
        h = dense(h, w, b)
        if i < len(layers) - 1 or final_activation:
            h = relu(h)
    return h


def maxpool_points(x, axis: int = -2) -> Tensor:
    """Channel-wise max over the point axis (default: second to last)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] < 1:
        raise ValueError("maxpool over an empty point axis")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(np.squeeze(out, axis), (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, ts[0].shape)) if i != axis):
            raise ValueError(f"concat shape mismatch: {[t.shape for t in ts]} along axis {axis}")
    if len(ts) == 1:
        return ts[0]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), backward)


def gather_points(x, idx) -> Tensor:
    """Batched row gather: ``out[b, k] = x[b, idx[b, k]]`` for ``x`` of shape (B, N, D)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"gather_points: bad shapes {x.shape}, {idx.shape}")
    take = idx[:, :, None]
    out = np.take_along_axis(x.data, take, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        b = np.arange(x.shape[0])[:, None]
        np.add.at(gx, (b, idx), g)
        return (gx,)

    return _result(out, (x,), backward)


def repeat(x, repeats: int, axis: int) -> Tensor:
    """``np.repeat`` (each element repeated consecutively)."""
    x = as_tensor(x)
    axis = axis % x.ndim

    def backward(g):
        shape = list(x.shape)
        shape.insert(axis + 1, repeats)
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _result(np.repeat(x.data, repeats, axis=axis), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x, eps: float = 1e-12) -> Tensor:
    """Square root whose derivative is taken as ``1 / (2 sqrt(x + eps))``.

    The forward value is exact; ``eps`` only guards the derivative at 0.
    """
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        return (g / (2.0 * np.sqrt(x.data + eps)),)

    return _result(out, (x,), backward)


class ModelParams:
    """Named parameter tensors plus the set of frozen names.

    Frozen tensors have ``requires_grad`` off, so no graph is built through
    them and optimizers skip them.
    """

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=name not in self.frozen)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def freeze(self, prefix: str = ""):
        for n in self.names(prefix):
            self.frozen.add(n)
            self.tensors[n].requires_grad = False
            self.tensors[n].grad = None

    def unfreeze(self, prefix: str = ""):
        for n in self.names(prefix):
            self.frozen.discard(n)
            self.tensors[n].requires_grad = True

    def is_frozen(self, prefix: str) -> bool:
        names = self.names(prefix)
        return bool(names) and all(n in self.frozen for n in names)

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data.copy() for n in self.names(prefix)}

    def load(self, arrays: dict[str, np.ndarray], strict: bool = True):
        if strict and set(arrays) != set(self.tensors):
            missing = set(self.tensors) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for n, a in arrays.items():
            t = self.tensors[n]
            if t.shape != a.shape:
                raise ValueError(f"shape mismatch for {n}: {t.shape} vs {a.shape}")
            t.data = np.array(a, dtype=t.dtype, copy=True)

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            a = np.ascontiguousarray(self.tensors[n].data)
            h.update(n.encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
        return self


class Optimizer:
    lr: float

    def __init__(self):
        self.step_count = 0

    def step(self, params: ModelParams):
        """Update every trainable parameter from its gradient, then clear grads."""
        names = params.trainable()
        missing = [n for n in names if params[n].grad is None]
        if missing:
            raise StateError(f"no gradient for trainable parameter(s) {missing[:3]}; call backward() first")
        for n in names:
            t = params[n]
            self._update(n, t)
        params.zero_grad()
        self.step_count += 1

    def _update(self, name: str, t: Tensor):
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int):
        self.step_count = step_count


class SGD(Optimizer):
    """Plain gradient descent."""

    def __init__(self, lr: float = 1e-2):
        super().__init__()
        self.lr = lr

    def _update(self, name, t):
        t.data -= (self.lr * t.grad).astype(t.dtype)


class Adam(Optimizer):
    """Adam with bias correction."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__()
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params):
        self._t = self.step_count + 1
        super().step(params)

    def _update(self, name, t):
        g = t.grad.astype(t.dtype, copy=False)
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
        v = self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        step = self.lr * np.sqrt(1 - self.beta2 ** self._t) / (1 - self.beta1 ** self._t)
        t.data -= (step * m / (np.sqrt(v) + self.eps)).astype(t.dtype)

    def state_arrays(self):
        out = {}
        for n in sorted(self.m):
            out[f"adam.m/{n}"] = self.m[n]
            out[f"adam.v/{n}"] = self.v[n]
        return out

    def load_state(self, arrays, step_count):
        super().load_state(arrays, step_count)
        self.m = {k[len("adam.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}


def make_optimizer(kind: str, lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# Checkpoint container, version 1 (all integers little-endian):
#   8 bytes   magic b"PCCKPT\0\0"
#   u32       format version
#   u32       header length H
#   H bytes   UTF-8 JSON header, sorted keys, no whitespace:
#             {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
#              "frozen": [...], "meta": {...}}
#   payload   raw little-endian array bytes; offsets are relative to payload start
CKPT_MAGIC = b"PCCKPT\0\0"
CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, optimizer: Optional[Optimizer] = None, meta: Optional[dict] = None):
    arrays = {f"param/{n}": t.data for n, t in params.tensors.items()}
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = dict(meta or {})
    if optimizer is not None:
        meta["optimizer"] = {"kind": type(optimizer).__name__.lower(), "lr": optimizer.lr,
                             "step_count": optimizer.step_count}
    header = json.dumps({"arrays": entries, "frozen": sorted(params.frozen), "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Return ``(params, optimizer_arrays, meta)`` from a checkpoint file."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen])
    base = 16 + hlen
    params = ModelParams()
    frozen = set(header["frozen"])
    params.frozen = set(frozen)
    optim = {}
    for e in header["arrays"]:
        a = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=base + e["offset"]).reshape(e["shape"])
        a = a.astype(a.dtype.newbyteorder("="))
        name = e["name"]
        if name.startswith("param/"):
            params.add(name[len("param/"):], a)
        elif name.startswith("optim/"):
            optim[name[len("optim/"):]] = a.copy()
    return params, optim, header["meta"]


def gradient_check(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` recomputes the scalar output from the current values of
    ``inputs``; every entry of every input is perturbed.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
