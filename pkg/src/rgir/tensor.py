"""Dense float64 tensors with reverse-mode differentiation.

The op set is fixed: exactly what the generator, losses and degradation
approximations need. Non-differentiable forwards (clamp, rounding) are
handled either by the exact a.e. derivative (clamp_exact) or by a
per-node registered surrogate rule (custom_surrogate); nothing here is a
general-purpose autodiff system.

Gradients accumulate in float64 throughout. The graph is rebuilt on every
use; backward() visits each node exactly once in reverse topological
order.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


class TapeNode:
    __slots__ = ("op", "parents", "grad", "shape", "surrogate")

    def __init__(self, op: str, parents, shape, surrogate: str | None = None):
        # parents: sequence of (TapeNode, vjp) where vjp maps the output
        # cotangent to that parent's cotangent contribution
        self.op = op
        self.parents = parents
        self.shape = shape
        self.grad = None
        self.surrogate = surrogate


class Tensor:
    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: TapeNode | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray | None:
        return None if self.node is None else self.node.grad

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # operator sugar; constants are accepted on either side
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __repr__(self):
        tag = "leaf" if (self.node and self.node.op == "leaf") else (self.node.op if self.node else "const")
        return f"Tensor(shape={self.data.shape}, {tag})"


def constant(values) -> Tensor:
    """Tensor that never receives a gradient."""
    return Tensor(np.asarray(values, dtype=np.float64))


def leaf(values) -> Tensor:
    """Differentiable leaf; backward() accumulates into .grad."""
    data = np.asarray(values, dtype=np.float64)
    return Tensor(data, TapeNode("leaf", (), data.shape))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result(data: np.ndarray, op: str, pairs, surrogate: str | None = None) -> Tensor:
    recorded = [(t.node, vjp) for t, vjp in pairs if t.node is not None]
    if not recorded:
        return Tensor(data)
    return Tensor(data, TapeNode(op, tuple(recorded), data.shape, surrogate))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a cotangent back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _result(out, "add", [
        (a, lambda g, sa=a.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.shape: _unbroadcast(g, sb)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _result(out, "sub", [
        (a, lambda g, sa=a.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.shape: -_unbroadcast(g, sb)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _result(out, "mul", [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def scale(a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    return _result(a.data * c, "scale", [(a, lambda g: g * c)])


def div_scalar(a: Tensor, divisor: float) -> Tensor:
    """Exact scalar division (scale by 1/c multiplies, which differs by an
    ulp for non-power-of-two divisors; serialization contracts divide)."""
    c = float(divisor)
    return _result(a.data / c, "scale", [(a, lambda g: g / c)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: operands must be at least 1-D, got {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform") from None

    if ad.ndim == 1 and bd.ndim == 1:
        pairs = [(a, lambda g: g * bd), (b, lambda g: g * ad)]
    elif ad.ndim == 1:
        # (k,) @ (..., k, n)
        pairs = [
            (a, lambda g: _unbroadcast((bd @ g[..., :, None])[..., 0], ad.shape)),
            (b, lambda g: _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)),
        ]
    elif bd.ndim == 1:
        # (..., m, k) @ (k,)
        pairs = [
            (a, lambda g: _unbroadcast(g[..., :, None] * bd, ad.shape)),
            (b, lambda g: _unbroadcast((ad.swapaxes(-1, -2) @ g[..., :, None])[..., 0], bd.shape)),
        ]
    else:
        pairs = [
            (a, lambda g: _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)),
            (b, lambda g: _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)),
        ]
    return _result(out, "matmul", pairs)


# ---------------------------------------------------------------------------
# spatial ops (feature maps are (..., H, W); conv inputs are (C, H, W))


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Correlation with zero padding, stride 1; kernels 3x3 or 1x1."""
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected input (C,H,W) and weights (Co,Ci,k,k), got {xd.shape}, {wd.shape}")
    co, ci, kh, kw = wd.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if xd.shape[0] != ci:
        raise ShapeError(f"conv2d: input channels {xd.shape[0]} != weight channels {ci}")
    _, h, wi = xd.shape

    if kh == 1:
        xmat = xd.reshape(ci, h * wi)
        wmat = wd.reshape(co, ci)
        out = (wmat @ xmat).reshape(co, h, wi)
        return _result(out, "conv2d", [
            (x, lambda g: (wmat.T @ g.reshape(co, -1)).reshape(ci, h, wi)),
            (w, lambda g: (g.reshape(co, -1) @ xmat.T).reshape(wd.shape)),
        ])

    pad = 1
    xp = np.zeros((ci, h + 2 * pad, wi + 2 * pad), dtype=np.float64)
    xp[:, pad:-pad, pad:-pad] = xd
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (ci, h, wi, kh, kw)
    pat = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * wi, ci * kh * kw)
    wmat = wd.reshape(co, ci * kh * kw)
    out = np.ascontiguousarray((pat @ wmat.T).T).reshape(co, h, wi)

    def vjp_x(g):
        dpat = g.reshape(co, -1).T @ wmat  # (h*wi, ci*kh*kw)
        dpat = dpat.reshape(h, wi, ci, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + h, j:j + wi] += dpat[:, :, :, i, j].transpose(2, 0, 1)
        return dxp[:, pad:-pad, pad:-pad]

    def vjp_w(g):
        return (g.reshape(co, -1) @ pat).reshape(wd.shape)

    return _result(out, "conv2d", [(x, vjp_x), (w, vjp_w)])


def avg_pool2(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] % 2 or xd.shape[-2] % 2:
        raise ShapeError(f"avg_pool2: needs even trailing dims, got {xd.shape}")
    h2, w2 = xd.shape[-2] // 2, xd.shape[-1] // 2
    blocks = xd.reshape(xd.shape[:-2] + (h2, 2, w2, 2))
    # width pairs first, then height pairs (order shared with the separable
    # resampling path so 2x bilinear downsampling is bit-identical)
    out = blocks.mean(axis=-1).mean(axis=-2)

    def vjp(g):
        g4 = np.broadcast_to(
            g[..., :, None, :, None] * 0.25, g.shape[:-2] + (h2, 2, w2, 2)
        )
        return g4.reshape(xd.shape)

    return _result(out, "avg_pool2", [(x, vjp)])


def upsample2_nearest(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError(f"upsample2_nearest: needs spatial dims, got {xd.shape}")
    h, w = xd.shape[-2], xd.shape[-1]
    out = np.broadcast_to(
        xd[..., :, None, :, None], xd.shape[:-2] + (h, 2, w, 2)
    ).reshape(xd.shape[:-2] + (2 * h, 2 * w))

    def vjp(g):
        return g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1))

    return _result(np.ascontiguousarray(out), "upsample2_nearest", [(x, vjp)])


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    xd = x.data
    out = np.where(xd > 0, xd, alpha * xd)
    return _result(out, "leaky_relu", [(x, lambda g: g * np.where(xd > 0, 1.0, alpha))])


def l2_normalize(x: Tensor, axes: int | tuple[int, ...], eps: float = 1e-10) -> Tensor:
    """x / sqrt(sum(x^2 over axes) + eps), sum kept broadcastable."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axes, keepdims=True) + eps)
    out = xd / n

    def vjp(g):
        inner = np.sum(g * xd, axis=axes, keepdims=True)
        return g / n - xd * inner / (n * n * n)

    return _result(out, "channel_l2_normalize", [(x, vjp)])


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    return tuple(a % ndim for a in axes)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    ax = _normalize_axes(axes, x.data.ndim)
    out = np.sum(x.data, axis=ax)
    shape = x.data.shape

    def vjp(g):
        ge = np.expand_dims(g, ax) if g.ndim else g
        return np.broadcast_to(ge, shape).copy()

    return _result(np.asarray(out, dtype=np.float64), "reduce_sum", [(x, vjp)])


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    ax = _normalize_axes(axes, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in ax])) if ax else 1
    out = np.sum(x.data, axis=ax) / count
    shape = x.data.shape

    def vjp(g):
        ge = np.expand_dims(g, ax) if g.ndim else g
        return np.broadcast_to(ge / count, shape).copy()

    return _result(np.asarray(out, dtype=np.float64), "reduce_mean", [(x, vjp)])


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.abs(xd), "abs", [(x, lambda g: g * np.sign(xd))])


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, "square", [(x, lambda g: g * (2.0 * xd))])


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(xd)

    def vjp(g):
        return g * (0.5 / np.maximum(out, 1e-300))

    return _result(out, "sqrt", [(x, vjp)])


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, "sigmoid", [(x, lambda g: g * out * (1.0 - out))])


def clamp_exact(x: Tensor, lo: float, hi: float) -> Tensor:
    """Exact clamp with the true a.e. derivative (zero outside (lo, hi))."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = (xd > lo) & (xd < hi)
    return _result(out, "clamp_exact", [(x, lambda g: g * inside)])


def custom_surrogate(
    x: Tensor,
    forward_fn: Callable[[np.ndarray], np.ndarray],
    backward_fn: Callable[[np.ndarray], np.ndarray],
    tag: str = "surrogate",
) -> Tensor:
    """Exact forward with a hand-registered elementwise backward rule.

    forward_fn computes the (typically non-differentiable) forward values;
    backward_fn maps the forward *input* values to the surrogate derivative
    that replaces the true one in the chain rule.
    """
    xd = x.data
    out = np.asarray(forward_fn(xd), dtype=np.float64)
    if out.shape != xd.shape:
        raise ShapeError(f"custom_surrogate[{tag}]: forward changed shape {xd.shape} -> {out.shape}")
    return _result(out, "custom_surrogate", [(x, lambda g: g * backward_fn(xd))], surrogate=tag)


# ---------------------------------------------------------------------------
# structural ops (zero-flop relabelings; not part of the public op set)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, "reshape", [(x, lambda g: g.reshape(old))])


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, "transpose", [(x, lambda g: np.ascontiguousarray(g.transpose(inv)))])


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every recorded leaf's .grad.

    root must be a scalar produced under recording.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    if root.node is None:
        raise ValueError("backward: root was not recorded (no differentiable inputs)")

    order: list[TapeNode] = []
    seen: set[int] = set()
    stack: list[tuple[TapeNode, bool]] = [(root.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    root.node.grad = np.ones(root.data.shape, dtype=np.float64)

    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if contrib.shape != parent.shape:
                raise ShapeError(
                    f"backward[{node.op}]: gradient shape {contrib.shape} != value shape {parent.shape}"
                )
            if parent.grad is None:
                parent.grad = contrib.copy() if contrib.base is not None else contrib
            else:
                parent.grad = parent.grad + contrib


# ---------------------------------------------------------------------------
# kind-dispatched surface for tests and the gradient checker

OP_KINDS = (
    "add", "sub", "mul", "scale", "matmul", "conv2d", "avg_pool2",
    "upsample2_nearest", "leaky_relu", "channel_l2_normalize",
    "reduce_mean", "reduce_sum", "abs", "square", "sqrt", "sigmoid",
    "clamp_exact", "custom_surrogate",
)


def forward_op(kind: str, inputs: Iterable[Tensor], params: dict | None = None) -> Tensor:
    """Apply one op by kind name; raises ShapeError with a diagnostic on misuse."""
    params = params or {}
    inputs = list(inputs)

    def one():
        if len(inputs) != 1:
            raise ShapeError(f"{kind}: expected 1 input, got {len(inputs)}")
        return inputs[0]

    def two():
        if len(inputs) != 2:
            raise ShapeError(f"{kind}: expected 2 inputs, got {len(inputs)}")
        return inputs

    if kind == "add":
        return add(*two())
    if kind == "sub":
        return sub(*two())
    if kind == "mul":
        return mul(*two())
    if kind == "scale":
        return scale(one(), params["factor"])
    if kind == "matmul":
        return matmul(*two())
    if kind == "conv2d":
        return conv2d(*two())
    if kind == "avg_pool2":
        return avg_pool2(one())
    if kind == "upsample2_nearest":
        return upsample2_nearest(one())
    if kind == "leaky_relu":
        return leaky_relu(one(), params.get("alpha", 0.2))
    if kind == "channel_l2_normalize":
        return l2_normalize(one(), params.get("axes", 0), params.get("eps", 1e-10))
    if kind == "reduce_mean":
        return reduce_mean(one(), params.get("axes"))
    if kind == "reduce_sum":
        return reduce_sum(one(), params.get("axes"))
    if kind == "abs":
        return absolute(one())
    if kind == "square":
        return square(one())
    if kind == "sqrt":
        return sqrt(one())
    if kind == "sigmoid":
        return sigmoid(one())
    if kind == "clamp_exact":
        return clamp_exact(one(), params["lo"], params["hi"])
    if kind == "custom_surrogate":
        return custom_surrogate(
            one(), params["forward_fn"], params["backward_fn"], params.get("tag", "surrogate")
        )
    raise ShapeError(f"unknown op kind: {kind}")


# ---------------------------------------------------------------------------
# raw tensor dump, for debugging intermediate values

DUMP_MAGIC = b"RGTD"


def write_dump(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f8").tobytes())


def read_dump(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DUMP_MAGIC:
            raise ValueError(f"bad dump magic: {magic!r}")
        (ndim,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        payload = f.read()
    arr = np.frombuffer(payload, dtype="<f8")
    return arr.reshape(dims).copy()
