"""Perceptual distance, the multiresolution restoration loss, and metrics.

The perceptual distance is an LPIPS-style construction over a fixed bank
of seeded random convolution features: per stage, channel-unit-normalized
feature differences are squared and averaged, and stages are summed. The
bank's seed is part of the benchmark definition; no pretrained network is
involved anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import degradations as D
from . import tensor as T
from .rng import Stream, normal_field

# published seed of the shared feature bank
FEATURE_SEED = 901
_STAGE_CHANNELS = (3, 16, 32, 64)

L1_WEIGHT = 0.1
_SMALLEST_SCALE = 16  # smallest pooled resolution entering the perceptual term


@dataclass(frozen=True)
class FeatureExtractor:
    """Three fixed conv stages (conv3x3 -> leaky_relu -> avg_pool2).

    Filters are He-scaled Gaussians with the per-filter mean removed;
    zero-sum filters respond to local contrast rather than brightness,
    which raw Gaussian filters would let dominate every feature.
    """

    filters: tuple[np.ndarray, ...]

    @staticmethod
    def build(seed: int = FEATURE_SEED) -> "FeatureExtractor":
        stream = Stream(seed)
        banks = []
        for cin, cout in zip(_STAGE_CHANNELS[:-1], _STAGE_CHANNELS[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            bank = (stream.normals(cout * cin * 9) * std).reshape(cout, cin, 3, 3)
            banks.append(bank - bank.mean(axis=(1, 2, 3), keepdims=True))
        return FeatureExtractor(tuple(banks))

    def stages(self, x: T.Tensor) -> list[T.Tensor]:
        """Per-stage feature maps for a (3, H, W) tensor.

        Pooling is skipped once a spatial dim can no longer be halved, so
        degraded inputs smaller than the nominal 16 px floor still embed.
        """
        feats = []
        h = x
        for bank in self.filters:
            h = T.leaky_relu(T.conv2d(h, T.constant(bank)))
            if h.shape[-1] % 2 == 0 and h.shape[-2] % 2 == 0 and min(h.shape[-2:]) >= 2:
                h = T.avg_pool2(h)
            feats.append(h)
        return feats


@lru_cache(maxsize=4)
def default_extractor(seed: int = FEATURE_SEED) -> FeatureExtractor:
    return FeatureExtractor.build(seed)


def _chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise T.ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def perceptual_distance_graph(x: T.Tensor, y: T.Tensor,
                              extractor: FeatureExtractor | None = None) -> T.Tensor:
    if x.shape != y.shape:
        raise T.ShapeError(f"perceptual_distance: shapes differ, {x.shape} vs {y.shape}")
    fe = extractor or default_extractor()
    total = None
    for fx, fy in zip(fe.stages(x), fe.stages(y)):
        nx = T.l2_normalize(fx, axes=0)
        ny = T.l2_normalize(fy, axes=0)
        term = T.reduce_mean(T.square(T.sub(nx, ny)))
        total = term if total is None else T.add(total, term)
    return total


def perceptual_distance(x: np.ndarray, y: np.ndarray,
                        extractor: FeatureExtractor | None = None) -> float:
    return perceptual_distance_graph(
        T.constant(_chw(x)), T.constant(_chw(y)), extractor
    ).item()


def num_scales(resolution: int) -> int:
    """Scale count of the multiresolution sum: smallest scale is 16 px."""
    return max(0, int(np.log2(resolution)) - int(np.log2(_SMALLEST_SCALE)))


def _objective_graph(x: T.Tensor, y: T.Tensor, extractor: FeatureExtractor | None) -> T.Tensor:
    """L1 term plus perceptual terms at every valid pooled scale.

    Identical to full_loss for inputs of resolution >= 32; for smaller
    degraded targets the scale sum is empty and the L1 term remains.
    """
    total = T.scale(T.reduce_mean(T.absolute(T.sub(x, y))), L1_WEIGHT)
    px, py = x, y
    for _ in range(num_scales(x.shape[-1])):
        px = T.avg_pool2(px)
        py = T.avg_pool2(py)
        total = T.add(total, perceptual_distance_graph(px, py, extractor))
    return total


def restoration_objective_graph(x: T.Tensor, y: T.Tensor,
                                extractor: FeatureExtractor | None = None) -> T.Tensor:
    _validate_pair(x, y, require_large=False)
    return _objective_graph(x, y, extractor)


def multires_loss_graph(x: T.Tensor, y: T.Tensor,
                        extractor: FeatureExtractor | None = None) -> T.Tensor:
    _validate_pair(x, y, require_large=True)
    total = None
    px, py = x, y
    for _ in range(num_scales(x.shape[-1])):
        px = T.avg_pool2(px)
        py = T.avg_pool2(py)
        term = perceptual_distance_graph(px, py, extractor)
        total = term if total is None else T.add(total, term)
    return total


def full_loss_graph(x: T.Tensor, y: T.Tensor,
                    extractor: FeatureExtractor | None = None) -> T.Tensor:
    _validate_pair(x, y, require_large=True)
    return _objective_graph(x, y, extractor)


def _validate_pair(x: T.Tensor, y: T.Tensor, require_large: bool) -> None:
    if x.shape != y.shape:
        raise T.ShapeError(f"loss inputs differ in shape: {x.shape} vs {y.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h != w:
        raise T.ShapeError(f"loss inputs must be square, got {h}x{w}")
    if require_large and w < 32:
        raise T.ShapeError(f"resolution {w} < 32: no multiresolution scale fits")


def multires_loss(x: np.ndarray, y: np.ndarray,
                  extractor: FeatureExtractor | None = None) -> float:
    return multires_loss_graph(T.constant(_chw(x)), T.constant(_chw(y)), extractor).item()


def full_loss(x: np.ndarray, y: np.ndarray,
              extractor: FeatureExtractor | None = None) -> float:
    return full_loss_graph(T.constant(_chw(x)), T.constant(_chw(y)), extractor).item()


# ---------------------------------------------------------------------------
# masked-region noise hook for inpainting objectives


def masked_noise_field(mask: np.ndarray, stream: Stream) -> np.ndarray:
    """N(0.5, 1) noise restricted to the mask, as a (3, H, W) additive field.

    Generated once per restoration run and added to both the re-degraded
    prediction and the target inside every objective evaluation, so the
    masked region contributes no gradient signal toward black.
    """
    field = 0.5 + normal_field(stream, (3,) + mask.shape)
    return field * mask[None, :, :]


# ---------------------------------------------------------------------------
# metrics


def accuracy(pred: np.ndarray, ground_truth: np.ndarray,
             extractor: FeatureExtractor | None = None) -> float:
    return perceptual_distance(pred, ground_truth, extractor)


def fidelity(pred: np.ndarray, target: np.ndarray, comp: D.CompositionSpec,
             extractor: FeatureExtractor | None = None) -> float:
    """Distance between the re-degraded prediction and the target.

    Re-degradation uses the true models with the spec's own seeds, so a
    prediction equal to the clean source reproduces the target exactly.
    """
    return perceptual_distance(D.compose(comp, pred, mode="true"), target, extractor)


def _crop_features(images, crops_per_image: int, crop_size: int, seed: int,
                   extractor: FeatureExtractor) -> np.ndarray:
    stream = Stream(seed)
    feats = []
    for img in images:
        chw = _chw(img)
        h, w = chw.shape[1], chw.shape[2]
        if crop_size > h or crop_size > w:
            raise ValueError(f"crop size {crop_size} exceeds image size {h}x{w}")
        for _ in range(crops_per_image):
            top = stream.index(h - crop_size + 1)
            left = stream.index(w - crop_size + 1)
            crop = chw[:, top:top + crop_size, left:left + crop_size]
            final = extractor.stages(T.constant(crop))[-1]
            feats.append(final.data.mean(axis=(1, 2)))
    return np.asarray(feats)


def _frechet(mu1, sigma1, mu2, sigma2) -> float:
    """Gaussian Frechet distance via symmetric eigendecompositions."""
    evals, evecs = np.linalg.eigh(sigma1)
    root1 = (evecs * np.sqrt(np.maximum(evals, 0.0))) @ evecs.T
    inner = root1 @ sigma2 @ root1
    inner_evals = np.linalg.eigvalsh(inner)
    tr_sqrt = np.sqrt(np.maximum(inner_evals, 0.0)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_sqrt)


def patch_fid(set_a, set_b, crops_per_image: int = 100, crop_size: int = 32,
              seed: int = 0, extractor: FeatureExtractor | None = None) -> float:
    """Frechet distance between feature statistics of random crops."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("patch_fid: both image sets must be non-empty")
    fe = extractor or default_extractor()
    fa = _crop_features(set_a, crops_per_image, crop_size, seed, fe)
    fb = _crop_features(set_b, crops_per_image, crop_size, seed, fe)
    reg = 1e-6 * np.eye(fa.shape[1])
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    sig_a = (np.cov(fa, rowvar=False) if fa.shape[0] > 1 else np.zeros_like(reg)) + reg
    sig_b = (np.cov(fb, rowvar=False) if fb.shape[0] > 1 else np.zeros_like(reg)) + reg
    return _frechet(mu_a, sig_a, mu_b, sig_b)


@dataclass
class MetricsReport:
    accuracy: list[float]
    fidelity: list[float]
    patch_fid: float

    @staticmethod
    def _agg(values):
        arr = np.asarray([v for v in values if np.isfinite(v)])
        if arr.size == 0:
            return float("nan"), float("nan")
        return float(arr.mean()), float(arr.std())

    @property
    def accuracy_mean_std(self) -> tuple[float, float]:
        return self._agg(self.accuracy)

    @property
    def fidelity_mean_std(self) -> tuple[float, float]:
        return self._agg(self.fidelity)
