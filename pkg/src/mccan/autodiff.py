"""Dense tensors with a reverse-mode autodiff tape.

Everything is numpy underneath. A ``Tensor`` produced by an op keeps a
reference to its parents and a closure that maps the output gradient to
parent gradients; ``backward`` walks that DAG once in reverse topological
order. Only leaf tensors (those not produced by an op) keep ``.grad``.
"""

from __future__ import annotations

import enum
import itertools
import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class Precision(enum.Enum):
    F32 = "float32"  # training
    F64 = "float64"  # gradient checks

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


class ShapeError(ValueError):
    """Raised when operand shapes disagree; ``dim`` names the offending axis."""

    def __init__(self, op: str, dim: str, message: str):
        self.op = op
        self.dim = dim
        super().__init__(f"{op}: dimension '{dim}': {message}")


class PrecisionError(TypeError):
    pass


LOG_CLAMP = 1e-12
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

_node_ids = itertools.count(1)


class _Stats:
    log_clamps = 0


def log_clamp_count() -> int:
    """Number of elements clamped by ``log`` since the last reset."""
    return _Stats.log_clamps


def reset_log_clamp_count() -> None:
    _Stats.log_clamps = 0


# Kink recorder: when active, ops with a non-differentiable point append the
# side of the kink each input element fell on. Gradient checks use it to
# skip finite-difference stencils that straddle a kink.
_kink_log: list | None = None


class record_kinks:
    def __enter__(self):
        global _kink_log
        self._prev = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._prev
        return False


def _note_kink(x: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.sign(x).astype(np.int8))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_node", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_node: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> Precision:
        return Precision(self.data.dtype.name)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", f"expected one element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

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
        return neg(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_precision(op: str, *ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise PrecisionError(f"{op}: mixed precision operands {sorted(d.name for d in dtypes)}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.tape_node = next(_node_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(op: str, a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, like=a)
    _check_precision(op, a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "broadcast", f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


# elementwise ops

def add(a, b) -> Tensor:
    a, b = _binary("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    _note_kink(a.data)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    _note_kink(a.data)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make(y, (a,), lambda g: (g * y * (1 - y),))


def log(a: Tensor) -> Tensor:
    x = a.data
    low = x < LOG_CLAMP
    n = int(low.sum())
    if n:
        _Stats.log_clamps += n
        x = np.where(low, LOG_CLAMP, x).astype(a.dtype)
    # clamped elements are constant, so they pass no gradient
    return _make(np.log(x), (a,), lambda g: (np.where(low, 0, g / x).astype(a.dtype),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _note_kink(a.data)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(a.dtype),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),))


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a python scalar without promoting precision."""
    k = a.dtype.type(k)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient sign(0) = 0."""
    a, b = _binary("l1_distance", a, b)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", "shape", f"{a.shape} vs {b.shape}")
    return mean(abs(sub(a, b)))


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError("upsample_nearest", "rank", f"expected NCHW, got {a.shape}")
    y = a.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = a.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(y, (a,), bw)


def instance_norm(a: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""
    if a.data.ndim != 4:
        raise ShapeError("instance_norm", "rank", f"expected NCHW, got {a.shape}")
    x = a.data
    m = x.mean(axis=(2, 3), keepdims=True)
    xc = x - m
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + a.dtype.type(eps))
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (a,), bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with a KCkk kernel (zero padding)."""
    _check_precision("conv2d", x, w)
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "input.rank", f"expected [N,C,H,W], got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError("conv2d", "kernel.rank", f"expected [K,C,kh,kw], got {w.shape}")
    if stride < 1:
        raise ShapeError("conv2d", "stride", f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError("conv2d", "padding", f"padding must be >= 0, got {padding}")
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError("conv2d", "C", f"input has {c} channels, kernel expects {c2}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp:
        raise ShapeError("conv2d", "H", f"kernel height {kh} exceeds padded height {hp}")
    if kw > wp:
        raise ShapeError("conv2d", "W", f"kernel width {kw} exceeds padded width {wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(k, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return gx, gw

    return _make(out, (x, w), bw)


# tape traversal

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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError("backward", "loss", f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# finite-difference checking

def numeric_grad(f: Callable[[], Tensor], t: Tensor, index: tuple, eps: float = 1e-4):
    """Central difference of scalar ``f()`` w.r.t. one element of ``t``.

    Returns ``(estimate, crossed_kink)``.
    """
    orig = t.data[index].copy()
    t.data[index] = orig + eps
    with record_kinks() as up:
        fp = f().item()
    t.data[index] = orig - eps
    with record_kinks() as down:
        fm = f().item()
    t.data[index] = orig
    crossed = len(up) != len(down) or any(not np.array_equal(u, d) for u, d in zip(up, down))
    return (fp - fm) / (2 * eps), crossed


def grad_check(f: Callable[[], Tensor], tensors: Sequence[Tensor], rng: np.random.Generator,
               samples: int | None = None, eps: float = 1e-4, rtol: float = 1e-4,
               atol: float = 1e-7) -> dict:
    """Compare analytic and central-difference gradients of a scalar ``f``.

    Checks every element, or ``samples`` random elements per tensor. Stencils
    that cross a kink of relu/leaky_relu/abs are skipped and counted.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise PrecisionError("grad_check requires F64 tensors")
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst, checked, skipped = 0.0, 0, 0
    for t, ga in zip(tensors, analytic):
        if samples is None or samples >= t.size:
            indices = list(np.ndindex(t.shape))
        else:
            flat = rng.choice(t.size, size=samples, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        for idx in indices:
            num, crossed = numeric_grad(f, t, idx, eps)
            if crossed:
                skipped += 1
                continue
            a = ga[idx]
            err = float(np.abs(a - num))
            checked += 1
            if err <= atol:
                continue
            worst = max(worst, err / max(np.abs(a), np.abs(num)))
    for t in tensors:
        t.grad = None
    return {"max_rel_error": worst, "checked": checked, "skipped": skipped, "ok": worst < rtol}


# serialization

def save_tensors(tensors: dict[str, np.ndarray], blob_path: str | Path) -> list[dict]:
    """Write arrays as one little-endian blob; return manifest entries."""
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    return entries


def load_tensors(entries: list[dict], blob_path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(blob_path).read_bytes()
    out = {}
    for e in entries:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=dt).astype(np.dtype(e["dtype"]))
        out[e["name"]] = arr.reshape(e["shape"])
    return out


def manifest_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
