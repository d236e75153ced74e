"""Image degradation models and their differentiable approximations.

Each family provides a bit-exact forward model (the "true" path used to
build targets and to measure fidelity) and a differentiable approximation
used inside the restoration loop. Deartifacting and inpainting share one
code path for both (their approximations keep the forward exact and only
swap the backward rule); denoising substitutes a reparameterized Gaussian
for the Poisson count; downsampling substitutes average pooling.

Degradation order for compositions is fixed: downsample -> noise -> JPEG
-> mask, i.e. restoration composes the approximations in the reverse
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .rng import Stream, bernoulli_field, normal_field, poisson_field

KINDS = ("upsample", "denoise", "deartifact", "inpaint")
LEVEL_NAMES = ("XS", "S", "M", "L", "XL")

_LEVEL_TABLE = {
    "upsample": [{"factor": f} for f in (2, 4, 8, 16, 32)],
    "denoise": [
        {"k_p": kp, "k_b": kb}
        for kp, kb in zip((96, 48, 24, 12, 6), (0.04, 0.08, 0.16, 0.32, 0.64))
    ],
    "deartifact": [{"quality": q} for q in (18, 15, 12, 9, 6)],
    "inpaint": [{"strokes": k} for k in (1, 5, 9, 13, 17)],
}

RESAMPLE_FILTERS = ("bilinear", "bicubic", "lanczos3")

CLAMP_SURROGATE_TAG = "clamp_0_255"
ROUND_SURROGATE_TAG = "round_dct"
ROUND_SURROGATE_ALPHA = 0.8
NOISE_VAR_EPS = 1e-8


def level_params(kind: str, level: str) -> dict:
    if kind not in _LEVEL_TABLE:
        raise ValueError(f"unknown degradation kind {kind!r} (expected one of {KINDS})")
    if level not in LEVEL_NAMES:
        raise ValueError(f"unknown level {level!r} (expected one of {LEVEL_NAMES})")
    return dict(_LEVEL_TABLE[kind][LEVEL_NAMES.index(level)])


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    seed: int
    level: str | None = None
    params: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if (self.level is None) == (self.params is None):
            raise ValueError("exactly one of level or params must be given")
        if self.level is not None and self.level not in LEVEL_NAMES:
            raise ValueError(f"unknown level {self.level!r}")

    @staticmethod
    def of(kind: str, level: str | None = None, seed: int = 0, **params) -> "DegradationSpec":
        return DegradationSpec(
            kind, seed, level, tuple(sorted(params.items())) if params else None
        )

    def resolved(self) -> dict:
        if self.level is not None:
            return level_params(self.kind, self.level)
        return dict(self.params)


@dataclass(frozen=True)
class CompositionSpec:
    ops: tuple[DegradationSpec, ...]

    def __post_init__(self):
        order = [KINDS.index(op.kind) for op in self.ops]
        if any(b <= a for a, b in zip(order, order[1:])):
            raise ValueError(
                f"degradations must be a subsequence of {' -> '.join(KINDS)}, "
                f"got {[op.kind for op in self.ops]}"
            )

    @property
    def letters(self) -> str:
        return "".join({"upsample": "U", "denoise": "N", "deartifact": "A", "inpaint": "P"}[o.kind]
                       for o in self.ops)


def spec_to_json(comp: CompositionSpec) -> str:
    ops = []
    for op in comp.ops:
        entry: dict = {"kind": op.kind, "seed": op.seed}
        if op.level is not None:
            entry["level"] = op.level
        else:
            entry["params"] = dict(op.params)
        ops.append(entry)
    return json.dumps({"ops": ops})


def spec_from_json(text: str) -> CompositionSpec:
    payload = json.loads(text)
    ops = []
    for entry in payload["ops"]:
        ops.append(DegradationSpec.of(
            entry["kind"], entry.get("level"), entry.get("seed", 0),
            **entry.get("params", {}),
        ))
    return CompositionSpec(tuple(ops))


# ---------------------------------------------------------------------------
# upsampling task: true model downsamples with an interpolation kernel


def _kernel_tent(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


def _kernel_catmull_rom(t: np.ndarray) -> np.ndarray:
    a = -0.5
    at = np.abs(t)
    inner = (a + 2.0) * at**3 - (a + 3.0) * at**2 + 1.0
    outer = a * at**3 - 5.0 * a * at**2 + 8.0 * a * at - 4.0 * a
    return np.where(at <= 1.0, inner, np.where(at < 2.0, outer, 0.0))


def _kernel_lanczos3(t: np.ndarray) -> np.ndarray:
    at = np.abs(t)
    safe = np.where(at < 1e-12, 1.0, at)
    s = np.sinc(safe) * np.sinc(safe / 3.0)
    return np.where(at < 1e-12, 1.0, np.where(at < 3.0, s, 0.0))


_KERNELS = {
    "bilinear": (_kernel_tent, 1.0),
    "bicubic": (_kernel_catmull_rom, 2.0),
    "lanczos3": (_kernel_lanczos3, 3.0),
}


def _resample_matrix(n_in: int, factor: int, filter_name: str) -> np.ndarray:
    """(n_in/factor, n_in) row-normalized kernel weights, edge-clamped."""
    kernel, support = _KERNELS[filter_name]
    n_out = n_in // factor
    mat = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) * factor - 0.5
        lo = int(np.ceil(center - support))
        hi = int(np.floor(center + support))
        taps = np.arange(lo, hi + 1)
        w = kernel(taps - center)
        w = w / w.sum()
        np.add.at(mat[j], np.clip(taps, 0, n_in - 1), w)
    return mat


def downsample_true(img: np.ndarray, factor: int, filter_name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[0], img.shape[1]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image size {h}x{w}")
    if filter_name not in _KERNELS:
        raise ValueError(f"unknown filter {filter_name!r} (expected one of {RESAMPLE_FILTERS})")
    rows = _resample_matrix(h, factor, filter_name)
    cols = _resample_matrix(w, factor, filter_name)
    # separable: width pass first, then height (same reduction order as the
    # average-pooling approximation, making the tent/factor-2 case bit-equal)
    tmp = np.einsum("pj,ijc->ipc", cols, img)
    out = np.einsum("oi,ipc->opc", rows, tmp)
    return np.clip(out, 0.0, 1.0)


def downsample_approx_graph(x: T.Tensor, factor: int) -> T.Tensor:
    """Average pooling; repeated 2x pools for power-of-two factors."""
    if factor == 1:
        return x
    h, w = x.shape[-2], x.shape[-1]
    if h % factor or w % factor:
        raise T.ShapeError(f"factor {factor} does not divide image size {h}x{w}")
    if factor & (factor - 1) == 0:
        out = x
        for _ in range(int(np.log2(factor))):
            out = T.avg_pool2(out)
        return out
    lead = x.shape[:-2]
    out = T.reshape(x, lead + (h // factor, factor, w // factor, factor))
    nd = len(lead)
    return T.reduce_mean(out, axes=(nd + 1, nd + 3))


def downsample_approx(img: np.ndarray, factor: int) -> np.ndarray:
    chw = np.ascontiguousarray(np.asarray(img, dtype=np.float64).transpose(2, 0, 1))
    out = downsample_approx_graph(T.constant(chw), factor)
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# inpainting task


@dataclass(frozen=True)
class StrokeMask:
    mask: np.ndarray                      # (H, W), 1.0 where masked
    endpoints: tuple[tuple[float, float, float, float], ...]
    width: int


def _sample_outer_point(stream: Stream, r: int) -> tuple[float, float]:
    lo, hi = r / 3.0, 2.0 * r / 3.0
    while True:
        y = stream.uniform() * r
        x = stream.uniform() * r
        # reject only points whose BOTH coordinates fall in the central third
        if not (lo <= y < hi and lo <= x < hi):
            return y, x


def make_stroke_mask(resolution: int, k_strokes: int, seed: int) -> StrokeMask:
    """Union of k thick random strokes between outer-third endpoints."""
    if k_strokes < 0:
        raise ValueError("k_strokes must be >= 0")
    r = int(resolution)
    width = int(np.floor(0.08 * r + 0.5))
    stream = Stream(seed)
    yy, xx = np.meshgrid(np.arange(r, dtype=np.float64), np.arange(r, dtype=np.float64),
                         indexing="ij")
    mask = np.zeros((r, r), dtype=np.float64)
    endpoints = []
    for _ in range(k_strokes):
        y0, x0 = _sample_outer_point(stream, r)
        y1, x1 = _sample_outer_point(stream, r)
        endpoints.append((y0, x0, y1, x1))
        dy, dx = y1 - y0, x1 - x0
        den = dy * dy + dx * dx
        if den == 0.0:
            dist = np.hypot(yy - y0, xx - x0)
        else:
            s = np.clip(((yy - y0) * dy + (xx - x0) * dx) / den, 0.0, 1.0)
            dist = np.hypot(yy - (y0 + s * dy), xx - (x0 + s * dx))
        mask[dist <= width / 2.0] = 1.0
    return StrokeMask(mask, tuple(endpoints), width)


def inpaint_true(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != image shape {img.shape[:2]}")
    return img * (1.0 - mask)[:, :, None]


def inpaint_approx_graph(x: T.Tensor, mask: np.ndarray) -> T.Tensor:
    # identical forward; gradients vanish under the mask
    return T.mul(x, T.constant(1.0 - mask))


# ---------------------------------------------------------------------------
# denoising task


def noise_true(img: np.ndarray, k_p: float, k_b: float, seed: int) -> np.ndarray:
    """Poisson counts per channel, one Bernoulli kill per pixel, clamp, /255."""
    img = np.asarray(img, dtype=np.float64)
    stream = Stream(seed)
    counts = poisson_field(stream, k_p * img).astype(np.float64)
    kill = bernoulli_field(stream, k_b, img.shape[:2])
    keep = np.where(kill, 0.0, 1.0)[:, :, None]
    return np.clip(counts * keep, 0.0, 255.0) / 255.0


def clamp_surrogate_derivative(x: np.ndarray) -> np.ndarray:
    """d/dx of the smoothed 0..255 ramp: sigmoid argument 2*(x/255 - 0.5)."""
    s = 1.0 / (1.0 + np.exp(-2.0 * (np.asarray(x, dtype=np.float64) / 255.0 - 0.5)))
    return 2.0 * s * (1.0 - s)


def noise_approx_graph(x: T.Tensor, k_p: float, eps: np.ndarray) -> T.Tensor:
    """Gaussian substitute for the Poisson stage; Bernoulli stage omitted.

    eps is the standard-normal field for this evaluation; gradients flow
    through both the mean and the standard deviation.
    """
    lam = T.scale(x, float(k_p))
    std = T.sqrt(T.add(lam, T.constant(NOISE_VAR_EPS)))
    pre = T.add(T.sub(lam, T.constant(0.5)), T.mul(std, T.constant(eps)))
    clamped = T.custom_surrogate(
        pre,
        lambda v: np.clip(v, 0.0, 255.0),
        clamp_surrogate_derivative,
        tag=CLAMP_SURROGATE_TAG,
    )
    return T.div_scalar(clamped, 255.0)


def noise_approx(img: np.ndarray, k_p: float, seed: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    eps = normal_field(Stream(seed), chw.shape)
    out = noise_approx_graph(T.constant(chw), k_p, eps)
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# deartifacting task (JPEG lossy chain)

ANNEX_K_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

ANNEX_K_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class QuantTables:
    luma: np.ndarray
    chroma: np.ndarray


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quant_tables(quality: int) -> QuantTables:
    """Annex-K base tables under the conventional quality scaling."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    def scaled(base):
        return np.clip(round_half_away(base * scale / 100.0), 1.0, 255.0)
    return QuantTables(scaled(ANNEX_K_LUMA), scaled(ANNEX_K_CHROMA))


def dct_matrix() -> np.ndarray:
    """Orthonormal 8x8 type-II DCT basis (rows indexed by frequency)."""
    n = np.arange(8, dtype=np.float64)
    k = n[:, None]
    d = np.cos((2.0 * n[None, :] + 1.0) * k * np.pi / 16.0)
    alpha = np.full(8, np.sqrt(2.0 / 8.0))
    alpha[0] = np.sqrt(1.0 / 8.0)
    return alpha[:, None] * d


def round_surrogate_derivative(x: np.ndarray) -> np.ndarray:
    """Straight-through/cubic interpolated derivative of rounding."""
    frac = np.asarray(x, dtype=np.float64) - round_half_away(x)
    a = ROUND_SURROGATE_ALPHA
    return (1.0 - a) + 3.0 * a * frac * frac


def _ycbcr_matrices() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    kr, kg, kb = 0.299, 0.587, 0.114
    fwd = np.array([
        [kr, kg, kb],
        [-kr / (2 * (1 - kb)), -kg / (2 * (1 - kb)), 0.5],
        [0.5, -kg / (2 * (1 - kr)), -kb / (2 * (1 - kr))],
    ])
    inv = np.array([
        [1.0, 0.0, 2 * (1 - kr)],
        [1.0, -kb * 2 * (1 - kb) / kg, -kr * 2 * (1 - kr) / kg],
        [1.0, 2 * (1 - kb), 0.0],
    ])
    offset = np.array([0.0, 128.0, 128.0])
    return fwd, inv, offset


_YCBCR_FWD, _YCBCR_INV, _YCBCR_OFFSET = _ycbcr_matrices()


def _edge_pad_matrix(n: int, n_pad: int) -> np.ndarray:
    sel = np.zeros((n_pad, n))
    sel[np.arange(n_pad), np.clip(np.arange(n_pad), 0, n - 1)] = 1.0
    return sel


def _to_blocks(x: T.Tensor) -> T.Tensor:
    h, w = x.shape
    t = T.reshape(x, (h // 8, 8, w // 8, 8))
    t = T.transpose(t, (0, 2, 1, 3))
    return T.reshape(t, ((h // 8) * (w // 8), 8, 8))


def _from_blocks(x: T.Tensor, h: int, w: int) -> T.Tensor:
    t = T.reshape(x, (h // 8, w // 8, 8, 8))
    t = T.transpose(t, (0, 2, 1, 3))
    return T.reshape(t, (h, w))


def _jpeg_plane(plane: T.Tensor, table: np.ndarray) -> T.Tensor:
    h, w = plane.shape
    d = dct_matrix()
    blocks = _to_blocks(plane)
    shifted = T.sub(blocks, T.constant(128.0))
    coefs = T.matmul(T.matmul(T.constant(d), shifted), T.constant(d.T))
    scaled = T.mul(coefs, T.constant(1.0 / table))
    quantized = T.custom_surrogate(
        scaled, round_half_away, round_surrogate_derivative, tag=ROUND_SURROGATE_TAG
    )
    deq = T.mul(quantized, T.constant(table))
    back = T.matmul(T.matmul(T.constant(d.T), deq), T.constant(d))
    return _from_blocks(T.add(back, T.constant(128.0)), h, w)


def _halve_width(plane: T.Tensor) -> T.Tensor:
    h, w = plane.shape
    return T.reduce_mean(T.reshape(plane, (h, w // 2, 2)), axes=(2,))


def _double_width(plane: T.Tensor) -> T.Tensor:
    h, w = plane.shape
    col = T.reshape(plane, (h * w, 1))
    wide = T.matmul(col, T.constant(np.ones((1, 2))))
    return T.reshape(wide, (h, 2 * w))


def _take_channel(stacked: T.Tensor, c: int, h: int, w: int) -> T.Tensor:
    sel = np.zeros((1, 3))
    sel[0, c] = 1.0
    return T.reshape(T.matmul(T.constant(sel), stacked), (h, w))


def _put_channel(plane: T.Tensor, c: int) -> T.Tensor:
    h, w = plane.shape
    sel = np.zeros((3, 1))
    sel[c, 0] = 1.0
    return T.matmul(T.constant(sel), T.reshape(plane, (1, h * w)))


def jpeg_graph(x: T.Tensor, quality: int) -> T.Tensor:
    """Lossy JPEG chain and its inverse on a (3, H, W) tensor in [0, 1].

    The forward pass is exact; the only surrogate-backed node is DCT
    coefficient rounding.
    """
    tables = quant_tables(quality)
    _, h, w = x.shape
    hp = ((h + 15) // 16) * 16
    wp = ((w + 15) // 16) * 16
    padded = x
    if hp != h:
        padded = T.matmul(T.constant(_edge_pad_matrix(h, hp)), padded)
    if wp != w:
        padded = T.matmul(padded, T.constant(_edge_pad_matrix(w, wp).T))

    flat = T.reshape(T.scale(padded, 255.0), (3, hp * wp))
    ycbcr = T.add(T.matmul(T.constant(_YCBCR_FWD), flat),
                  T.constant(_YCBCR_OFFSET[:, None]))

    luma = _jpeg_plane(_take_channel(ycbcr, 0, hp, wp), tables.luma)
    chroma_planes = []
    for c in (1, 2):
        sub = _halve_width(_take_channel(ycbcr, c, hp, wp))
        chroma_planes.append(_double_width(_jpeg_plane(sub, tables.chroma)))

    stacked = T.add(
        T.add(_put_channel(luma, 0), _put_channel(chroma_planes[0], 1)),
        _put_channel(chroma_planes[1], 2),
    )
    rgb = T.matmul(T.constant(_YCBCR_INV),
                   T.sub(stacked, T.constant(_YCBCR_OFFSET[:, None])))
    out = T.clamp_exact(T.div_scalar(T.reshape(rgb, (3, hp, wp)), 255.0), 0.0, 1.0)
    if hp != h:
        out = T.matmul(T.constant(np.eye(h, hp)), out)
    if wp != w:
        out = T.matmul(out, T.constant(np.eye(wp, w)))
    return out


def jpeg_true(img: np.ndarray, quality: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    out = jpeg_graph(T.constant(chw), quality)
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


# the approximation shares the exact forward; only backward differs, so the
# numpy-level entry point is the same computation
jpeg_approx = jpeg_true


# ---------------------------------------------------------------------------
# composition


def apply_true(op: DegradationSpec, img: np.ndarray) -> np.ndarray:
    p = op.resolved()
    if op.kind == "upsample":
        name = RESAMPLE_FILTERS[Stream(op.seed).index(len(RESAMPLE_FILTERS))]
        return downsample_true(img, int(p["factor"]), name)
    if op.kind == "denoise":
        return noise_true(img, p["k_p"], p["k_b"], op.seed)
    if op.kind == "deartifact":
        return jpeg_true(img, int(p["quality"]))
    if op.kind == "inpaint":
        mask = make_stroke_mask(img.shape[0], int(p["strokes"]), op.seed)
        return inpaint_true(img, mask.mask)
    raise ValueError(f"unknown kind {op.kind}")


def apply_approx_graph(op: DegradationSpec, x: T.Tensor, stream: Stream | None = None) -> T.Tensor:
    p = op.resolved()
    if op.kind == "upsample":
        return downsample_approx_graph(x, int(p["factor"]))
    if op.kind == "denoise":
        eps = normal_field(stream if stream is not None else Stream(op.seed), x.shape)
        return noise_approx_graph(x, p["k_p"], eps)
    if op.kind == "deartifact":
        return jpeg_graph(x, int(p["quality"]))
    if op.kind == "inpaint":
        mask = make_stroke_mask(x.shape[-1], int(p["strokes"]), op.seed)
        return inpaint_approx_graph(x, mask.mask)
    raise ValueError(f"unknown kind {op.kind}")


def compose_graph(comp: CompositionSpec, x: T.Tensor, stream: Stream | None = None) -> T.Tensor:
    for op in comp.ops:
        x = apply_approx_graph(op, x, stream)
    return x


def compose(comp: CompositionSpec, img: np.ndarray, mode: str = "true") -> np.ndarray:
    if mode not in ("true", "approx"):
        raise ValueError(f"mode must be 'true' or 'approx', got {mode!r}")
    img = np.asarray(img, dtype=np.float64)
    if mode == "true":
        for op in comp.ops:
            img = apply_true(op, img)
        return img
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    out = compose_graph(comp, T.constant(chw))
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


def inpaint_masks(comp: CompositionSpec, resolution: int) -> list[np.ndarray]:
    """Masks of the inpaint stages at the resolutions they apply to."""
    masks = []
    res = resolution
    for op in comp.ops:
        p = op.resolved()
        if op.kind == "upsample":
            res //= int(p["factor"])
        elif op.kind == "inpaint":
            masks.append(make_stroke_mask(res, int(p["strokes"]), op.seed).mask)
    return masks


def degraded_resolution(comp: CompositionSpec, resolution: int) -> int:
    res = resolution
    for op in comp.ops:
        if op.kind == "upsample":
            res //= int(op.resolved()["factor"])
    return res
