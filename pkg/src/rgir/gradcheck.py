"""Gradient verification: finite differences plus surrogate closed forms.

Every differentiable op's analytic backward is compared against central
finite differences (h = 1e-5, float64) on seeded random inputs sampled
away from non-smooth points. The clamp and rounding surrogates are
compared against their closed forms at random points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import degradations as D
from . import tensor as T
from .rng import Stream

FD_STEP = 1e-5
FD_TOL = 1e-5
SURROGATE_TOL = 1e-10


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def fd_gradients(fn, arrays: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences of a scalar function of several arrays."""
    grads = []
    for ai, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for k in range(base.size):
            for sign in (1.0, -1.0):
                bumped = [a.copy() for a in arrays]
                bumped[ai].reshape(-1)[k] += sign * h
                flat[k] += sign * fn(bumped)
        grads.append(g / (2.0 * h))
    return grads


def check_op(kind: str, arrays: list[np.ndarray], params: dict | None = None,
             cotangent: np.ndarray | None = None) -> float:
    """Max relative error between tape gradients and finite differences."""
    def scalarize(values: list[np.ndarray]) -> float:
        leaves = [T.leaf(v) for v in values]
        out = T.forward_op(kind, leaves, params)
        r = cotangent if cotangent is not None else np.ones(out.shape)
        return T.reduce_sum(T.mul(out, T.constant(r))).item()

    leaves = [T.leaf(a) for a in arrays]
    out = T.forward_op(kind, leaves, params)
    r = cotangent if cotangent is not None else np.ones(out.shape)
    T.backward(T.reduce_sum(T.mul(out, T.constant(r))))
    analytic = [lv.grad if lv.grad is not None else np.zeros_like(lv.data) for lv in leaves]
    numeric = fd_gradients(scalarize, [a.copy() for a in arrays])
    return max(_rel_err(a, n) for a, n in zip(analytic, numeric))


def _away_from(x: np.ndarray, point: float, margin: float) -> np.ndarray:
    # push values out of the margin around a kink, preserving sign
    shift = np.where(np.abs(x - point) < margin, np.sign(x - point + 1e-12) * margin, 0.0)
    return x + shift


def _cases(stream: Stream):
    """(label, op kind, input arrays, params) quadruples for the FD sweep."""
    def rand(*shape):
        return stream.normals(int(np.prod(shape))).reshape(shape)

    yield "add", "add", [rand(3, 4), rand(3, 4)], None
    yield "add (broadcast)", "add", [rand(3, 4), rand(4)], None
    yield "sub", "sub", [rand(3, 4), rand(3, 4)], None
    yield "mul", "mul", [rand(3, 4), rand(3, 4)], None
    yield "mul (broadcast)", "mul", [rand(3, 1, 2), rand(4, 2)], None
    yield "scale", "scale", [rand(3, 4)], {"factor": 1.37}
    yield "matmul", "matmul", [rand(3, 4), rand(4, 5)], None
    yield "matmul (vec-mat)", "matmul", [rand(4), rand(4, 3)], None
    yield "matmul (mat-vec)", "matmul", [rand(3, 4), rand(4)], None
    yield "matmul (batched)", "matmul", [rand(2, 3, 4), rand(4, 5)], None
    yield "matmul (left-2d batched)", "matmul", [rand(4, 4), rand(2, 4, 3)], None
    yield "conv2d (3x3)", "conv2d", [rand(3, 5, 5), rand(4, 3, 3, 3) * 0.5], None
    yield "conv2d (1x1)", "conv2d", [rand(3, 4, 4), rand(2, 3, 1, 1)], None
    yield "avg_pool2", "avg_pool2", [rand(2, 4, 6)], None
    yield "upsample2_nearest", "upsample2_nearest", [rand(2, 3, 3)], None
    yield "leaky_relu", "leaky_relu", [_away_from(rand(4, 5), 0.0, 0.05)], None
    yield "channel_l2_normalize", "channel_l2_normalize", [rand(4, 3, 3) + 0.1], {"axes": (0,)}
    yield ("channel_l2_normalize (multi-axis)", "channel_l2_normalize",
           [rand(3, 2, 3, 3)], {"axes": (1, 2, 3), "eps": 1e-8})
    yield "reduce_mean", "reduce_mean", [rand(3, 4, 2)], {"axes": (0, 2)}
    yield "reduce_mean (all)", "reduce_mean", [rand(3, 4)], None
    yield "reduce_sum", "reduce_sum", [rand(3, 4, 2)], {"axes": (1,)}
    yield "abs", "abs", [_away_from(rand(4, 5), 0.0, 0.05)], None
    yield "square", "square", [rand(3, 4)], None
    yield "sqrt", "sqrt", [np.abs(rand(3, 4)) + 0.1], None
    yield "sigmoid", "sigmoid", [rand(3, 4)], None


@dataclass
class GradCheckReport:
    op_errors: dict[str, float]
    clamp_surrogate_err: float
    round_surrogate_err: float

    @property
    def ok(self) -> bool:
        return (
            all(e < FD_TOL for e in self.op_errors.values())
            and self.clamp_surrogate_err < SURROGATE_TOL
            and self.round_surrogate_err < SURROGATE_TOL
        )

    def lines(self) -> list[str]:
        out = []
        for name, err in self.op_errors.items():
            flag = "ok" if err < FD_TOL else "FAIL"
            out.append(f"{name:36s} max rel err {err:.3e}  [{flag}]")
        for label, err in (
            ("clamp surrogate vs closed form", self.clamp_surrogate_err),
            ("rounding surrogate vs closed form", self.round_surrogate_err),
        ):
            flag = "ok" if err < SURROGATE_TOL else "FAIL"
            out.append(f"{label:36s} max abs err {err:.3e}  [{flag}]")
        return out


def _surrogate_grads(x: np.ndarray, forward, backward) -> np.ndarray:
    lv = T.leaf(x)
    y = T.custom_surrogate(lv, forward, backward)
    T.backward(T.reduce_sum(y))
    return lv.grad


def run_suite(seed: int = 20240) -> GradCheckReport:
    stream = Stream(seed)
    errors: dict[str, float] = {}
    for name, kind, arrays, params in _cases(stream):
        errors[name] = check_op(kind, arrays, params)

    # clamp surrogate (noise model): compare the tape gradient against the
    # smoothed-ramp derivative 2*s*(1-s), s = sigmoid(2*(x/255 - 0.5))
    xs = stream.uniforms(1000) * 350.0 - 50.0
    got = _surrogate_grads(xs, lambda v: np.clip(v, 0.0, 255.0),
                           D.clamp_surrogate_derivative)
    s = 1.0 / (1.0 + np.exp(-2.0 * (xs / 255.0 - 0.5)))
    clamp_err = float(np.max(np.abs(got - 2.0 * s * (1.0 - s))))

    # rounding surrogate (DCT quantization): (1-a) + 3a*(x - round(x))^2
    xr = stream.uniforms(1000) * 40.0 - 20.0
    got_r = _surrogate_grads(xr, D.round_half_away, D.round_surrogate_derivative)
    frac = xr - D.round_half_away(xr)
    a = D.ROUND_SURROGATE_ALPHA
    round_err = float(np.max(np.abs(got_r - ((1.0 - a) + 3.0 * a * frac * frac))))

    return GradCheckReport(errors, clamp_err, round_err)
