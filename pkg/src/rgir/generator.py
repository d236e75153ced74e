"""Style-modulated convolutional generator with three latent granularities.

A single synthesis path consumes one style code per (layer, filter); the
coarser latents (one global code, or one code per layer) are expanded to
that representation by pure replication, so the three variants agree
bit-exactly on identical underlying codes.

Weights are generated from a seed (xoshiro256** + Box-Muller, He-scaled
Gaussians) in a fixed documented order, making every checkpoint
reproducible across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Stream

DEMOD_EPS = 1e-8

# sampling seed used when estimating the latent-space mean; fixed so every
# run starting from "the mean latent" starts from the same point
MEAN_LATENT_SEED = 0
MEAN_LATENT_SAMPLES = 10000


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 64
    channels: int = 32
    base_size: int = 4
    resolution: int = 64
    num_layers: int = 8          # style-modulated 3x3 convs, two per resolution
    mapping_depth: int = 2
    demodulate: bool = True

    def __post_init__(self):
        if self.num_layers % 2 or self.num_layers < 2:
            raise ValueError(f"num_layers must be even and >= 2, got {self.num_layers}")
        if self.resolution != self.base_size * 2 ** (self.num_layers // 2):
            raise ValueError(
                f"resolution {self.resolution} != {self.base_size} * 2^({self.num_layers}//2)"
            )
        for name in ("latent_dim", "channels", "resolution"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")

    @property
    def num_blocks(self) -> int:
        return self.num_layers // 2

    @property
    def num_style_rows(self) -> int:
        # conv layers first, then one RGB head per resolution
        return self.num_layers + self.num_blocks

    def filters_per_row(self) -> list[int]:
        return [self.channels] * self.num_layers + [3] * self.num_blocks


@dataclass
class GeneratorWeights:
    config: GeneratorConfig
    const: np.ndarray                      # (C, base, base)
    conv_filters: list[np.ndarray]         # num_layers x (C, C, 3, 3)
    conv_affine_w: list[np.ndarray]        # num_layers x (d, C)
    conv_affine_b: list[np.ndarray]        # num_layers x (C,)
    rgb_filters: list[np.ndarray]          # num_blocks x (3, C, 1, 1)
    rgb_affine_w: list[np.ndarray]         # num_blocks x (d, C)
    rgb_affine_b: list[np.ndarray]         # num_blocks x (C,)
    mapping_w: list[np.ndarray]            # mapping_depth x (d, d)
    mapping_b: list[np.ndarray]            # mapping_depth x (d,)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("const", self.const)]
        for i in range(self.config.num_layers):
            out += [
                (f"conv{i}.filters", self.conv_filters[i]),
                (f"conv{i}.affine.weight", self.conv_affine_w[i]),
                (f"conv{i}.affine.bias", self.conv_affine_b[i]),
            ]
        for i in range(self.config.num_blocks):
            out += [
                (f"rgb{i}.filters", self.rgb_filters[i]),
                (f"rgb{i}.affine.weight", self.rgb_affine_w[i]),
                (f"rgb{i}.affine.bias", self.rgb_affine_b[i]),
            ]
        for i in range(self.config.mapping_depth):
            out += [
                (f"mapping{i}.weight", self.mapping_w[i]),
                (f"mapping{i}.bias", self.mapping_b[i]),
            ]
        return out


def generate_weights(config: GeneratorConfig, seed: int) -> GeneratorWeights:
    """Seeded weight synthesis; draw order is part of the format."""
    stream = Stream(seed)
    d, c = config.latent_dim, config.channels

    def gaussian(shape, std):
        n = int(np.prod(shape))
        return (stream.normals(n) * std).reshape(shape)

    const = gaussian((c, config.base_size, config.base_size), 1.0)
    conv_filters, conv_aw, conv_ab = [], [], []
    for _ in range(config.num_layers):
        conv_filters.append(gaussian((c, c, 3, 3), np.sqrt(2.0 / (c * 9))))
        # wide style spread for conv layers: demodulation cancels the style
        # magnitude, so this buys sample diversity without range blowup
        conv_aw.append(gaussian((d, c), np.sqrt(4.0 / d)))
        conv_ab.append(np.ones(c))
    rgb_filters, rgb_aw, rgb_ab = [], [], []
    for _ in range(config.num_blocks):
        rgb_filters.append(gaussian((3, c, 1, 1), np.sqrt(1.0 / c)))
        rgb_aw.append(gaussian((d, c), np.sqrt(1.0 / d)))
        rgb_ab.append(np.ones(c))
    mapping_w, mapping_b = [], []
    for _ in range(config.mapping_depth):
        mapping_w.append(gaussian((d, d), np.sqrt(2.0 / d)))
        mapping_b.append(np.zeros(d))
    return GeneratorWeights(
        config, const, conv_filters, conv_aw, conv_ab,
        rgb_filters, rgb_aw, rgb_ab, mapping_w, mapping_b,
    )


# ---------------------------------------------------------------------------
# latent codes


@dataclass(frozen=True)
class LatentGlobal:
    values: np.ndarray  # (d,)


@dataclass(frozen=True)
class LatentLayerwise:
    values: np.ndarray  # (num_style_rows, d)


@dataclass(frozen=True)
class LatentFilterwise:
    codes: tuple[np.ndarray, ...]  # per row: (filters_in_row, d)


def expand_to_layerwise(w: LatentGlobal, config: GeneratorConfig) -> LatentLayerwise:
    return LatentLayerwise(np.repeat(w.values[None, :], config.num_style_rows, axis=0))


def expand_to_filterwise(wp: LatentLayerwise, config: GeneratorConfig) -> LatentFilterwise:
    counts = config.filters_per_row()
    if wp.values.shape[0] != len(counts):
        raise ValueError(f"expected {len(counts)} rows, got {wp.values.shape[0]}")
    return LatentFilterwise(tuple(
        np.repeat(wp.values[i][None, :], counts[i], axis=0) for i in range(len(counts))
    ))


def as_filterwise(latent, config: GeneratorConfig) -> LatentFilterwise:
    if isinstance(latent, LatentGlobal):
        latent = expand_to_layerwise(latent, config)
    if isinstance(latent, LatentLayerwise):
        latent = expand_to_filterwise(latent, config)
    if not isinstance(latent, LatentFilterwise):
        raise TypeError(f"not a latent: {type(latent).__name__}")
    return latent


def map_latent(z: np.ndarray, weights: GeneratorWeights) -> LatentGlobal:
    """Mapping network: stack of affine layers with leaky_relu(0.2)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (weights.config.latent_dim,):
        raise ValueError(f"z must have shape ({weights.config.latent_dim},), got {z.shape}")
    h = z
    for wm, bm in zip(weights.mapping_w, weights.mapping_b):
        h = h @ wm + bm
        h = np.where(h > 0, h, 0.2 * h)
    return LatentGlobal(h)


def mean_latent(
    weights: GeneratorWeights,
    n_samples: int = MEAN_LATENT_SAMPLES,
    seed: int = MEAN_LATENT_SEED,
) -> LatentGlobal:
    """Empirical mean of map_latent over standard-normal draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    stream = Stream(seed)
    d = weights.config.latent_dim
    acc = np.zeros(d)
    for _ in range(n_samples):
        acc += map_latent(stream.normals(d), weights).values
    return LatentGlobal(acc / n_samples)


# ---------------------------------------------------------------------------
# synthesis


def _affine(codes: T.Tensor, w: np.ndarray, b: np.ndarray) -> T.Tensor:
    return T.add(T.matmul(codes, T.constant(w)), T.constant(b))


def _mod_conv(x: T.Tensor, filters: np.ndarray, styles: T.Tensor, demodulate: bool) -> T.Tensor:
    n_out, n_in = filters.shape[0], filters.shape[1]
    s4 = T.reshape(styles, (n_out, n_in, 1, 1))
    wmod = T.mul(T.constant(filters), s4)
    if demodulate:
        wmod = T.l2_normalize(wmod, axes=(1, 2, 3), eps=DEMOD_EPS)
    return T.conv2d(x, wmod)


def modulated_conv(
    feature_map: np.ndarray,
    filters: np.ndarray,
    styles: np.ndarray,
    demodulate: bool = False,
) -> np.ndarray:
    """Standalone modulated convolution on plain arrays.

    styles may be one vector per input channel (shared by all filters) or
    one per (filter, input channel); the shared form is replicated to the
    per-filter form before the single conv path runs.
    """
    filters = np.asarray(filters, dtype=np.float64)
    styles = np.asarray(styles, dtype=np.float64)
    if styles.ndim == 1:
        styles = np.repeat(styles[None, :], filters.shape[0], axis=0)
    if styles.shape != (filters.shape[0], filters.shape[1]):
        raise T.ShapeError(
            f"modulated_conv: styles {styles.shape} do not match filters {filters.shape}"
        )
    out = _mod_conv(
        T.constant(feature_map), filters, T.constant(styles), demodulate
    )
    return out.data


def latent_graph_rows(latent, weights: GeneratorWeights):
    """Leaf tensors plus per-row (filters, d) code matrices for the graph.

    Coarse latents are expanded in-graph by multiplying with a constant
    ones column, which replicates rows exactly (each output element is a
    single 1.0 * x product) while routing gradients back to the shared
    code.
    """
    cfg = weights.config
    counts = cfg.filters_per_row()
    if isinstance(latent, LatentGlobal):
        w = T.leaf(latent.values[None, :])
        rows = [T.matmul(T.constant(np.ones((nf, 1))), w) for nf in counts]
        return [w], rows
    if isinstance(latent, LatentLayerwise):
        leaves = [T.leaf(latent.values[i][None, :]) for i in range(len(counts))]
        rows = [T.matmul(T.constant(np.ones((nf, 1))), lv) for nf, lv in zip(counts, leaves)]
        return leaves, rows
    if isinstance(latent, LatentFilterwise):
        leaves = [T.leaf(mat) for mat in latent.codes]
        return leaves, list(leaves)
    raise TypeError(f"not a latent: {type(latent).__name__}")


def synthesize_graph(rows: list[T.Tensor], weights: GeneratorWeights) -> T.Tensor:
    """Shared synthesis path over per-row style-code matrices -> (3, R, R)."""
    cfg = weights.config
    counts = cfg.filters_per_row()
    if len(rows) != len(counts):
        raise T.ShapeError(f"expected {len(counts)} code rows, got {len(rows)}")
    for i, (row, nf) in enumerate(zip(rows, counts)):
        if row.shape != (nf, cfg.latent_dim):
            raise T.ShapeError(
                f"code row {i}: expected {(nf, cfg.latent_dim)}, got {row.shape}"
            )

    x = T.constant(weights.const)
    rgb = None
    for b in range(cfg.num_blocks):
        x = T.upsample2_nearest(x)
        for j in range(2):
            li = 2 * b + j
            styles = _affine(rows[li], weights.conv_affine_w[li], weights.conv_affine_b[li])
            x = T.leaky_relu(_mod_conv(x, weights.conv_filters[li], styles, cfg.demodulate))
        ri = cfg.num_layers + b
        styles = _affine(rows[ri], weights.rgb_affine_w[b], weights.rgb_affine_b[b])
        y = _mod_conv(x, weights.rgb_filters[b], styles, demodulate=False)
        rgb = y if rgb is None else T.add(T.upsample2_nearest(rgb), y)
    # sigmoid(2y) == 0.5*(tanh(y)+1): maps summed RGB skips into [0, 1]
    return T.sigmoid(T.scale(rgb, 2.0))


def synthesize(latent, weights: GeneratorWeights) -> np.ndarray:
    """Generate an image (R, R, 3) in [0, 1] from any latent granularity."""
    fw = as_filterwise(latent, weights.config)
    rows = [T.constant(mat) for mat in fw.codes]
    out = synthesize_graph(rows, weights)
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"RGIR"
CKPT_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_CONFIG_KEY = "config"


def save_weights(path, weights: GeneratorWeights, dtype_code: int = 0) -> None:
    if dtype_code not in _DTYPES:
        raise ValueError(f"unknown dtype code {dtype_code}")
    cfg = weights.config
    config_arr = np.array(
        [cfg.latent_dim, cfg.channels, cfg.base_size, cfg.resolution,
         cfg.num_layers, cfg.mapping_depth, int(cfg.demodulate)],
        dtype=np.float64,
    )
    arrays = [(_CONFIG_KEY, config_arr)] + weights.named_arrays()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", dtype_code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.asarray(arr, dtype=_DTYPES[dtype_code]).tobytes())


def load_weights(path) -> GeneratorWeights:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a generator checkpoint (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            if code not in _DTYPES:
                raise ValueError(f"unknown dtype code {code} for {name}")
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            dt = np.dtype(_DTYPES[code])
            payload = f.read(dt.itemsize * int(np.prod(dims)) if ndim else dt.itemsize)
            arrays[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float64)

    if _CONFIG_KEY not in arrays:
        raise ValueError("checkpoint missing config record")
    c = arrays[_CONFIG_KEY]
    cfg = GeneratorConfig(
        latent_dim=int(c[0]), channels=int(c[1]), base_size=int(c[2]),
        resolution=int(c[3]), num_layers=int(c[4]), mapping_depth=int(c[5]),
        demodulate=bool(c[6]),
    )
    def take(name):
        if name not in arrays:
            raise ValueError(f"checkpoint missing array {name}")
        return arrays[name]

    return GeneratorWeights(
        config=cfg,
        const=take("const"),
        conv_filters=[take(f"conv{i}.filters") for i in range(cfg.num_layers)],
        conv_affine_w=[take(f"conv{i}.affine.weight") for i in range(cfg.num_layers)],
        conv_affine_b=[take(f"conv{i}.affine.bias") for i in range(cfg.num_layers)],
        rgb_filters=[take(f"rgb{i}.filters") for i in range(cfg.num_blocks)],
        rgb_affine_w=[take(f"rgb{i}.affine.weight") for i in range(cfg.num_blocks)],
        rgb_affine_b=[take(f"rgb{i}.affine.bias") for i in range(cfg.num_blocks)],
        mapping_w=[take(f"mapping{i}.weight") for i in range(cfg.mapping_depth)],
        mapping_b=[take(f"mapping{i}.bias") for i in range(cfg.mapping_depth)],
    )
