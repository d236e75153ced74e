"""Normalized gradient descent and the 3-phase progressive restoration.

Phase I optimizes one global latent code starting from the latent-space
mean; phase II expands to one code per layer, phase III to one code per
filter, each initialized from the previous phase's result. Every step
normalizes the gradient of each code to unit length before applying the
phase's fixed learning rate, which makes the update invariant to positive
rescalings of the objective. There are no regularization terms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import degradations as D
from . import generator as G
from . import perceptual as P
from . import tensor as T
from .rng import Stream

DEFAULT_PHASES = ((0.08, 150), (0.02, 150), (0.005, 150))


@dataclass(frozen=True)
class PhaseSchedule:
    """Per-phase (learning rate, step count), shared by all tasks and levels."""

    phases: tuple[tuple[float, int], ...] = DEFAULT_PHASES

    def __post_init__(self):
        if len(self.phases) != 3:
            raise ValueError(f"expected 3 phases, got {len(self.phases)}")
        rates = [r for r, _ in self.phases]
        if any(b >= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"rates must strictly decrease across phases, got {rates}")
        # steps are positive in normal operation; zero is allowed so that
        # initialization pass-throughs can be exercised
        if any(s < 0 for _, s in self.phases):
            raise ValueError("step counts must be >= 0")

    @property
    def total_steps(self) -> int:
        return sum(s for _, s in self.phases)


def ngd_step(latent: np.ndarray, gradient: np.ndarray, rate: float) -> np.ndarray:
    """One normalized-gradient-descent update.

    1-D latents are a single code; 2-D latents are one code per row, each
    normalized by its own gradient norm. Codes with zero gradient stay
    put.
    """
    latent = np.asarray(latent, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != latent.shape:
        raise T.ShapeError(f"ngd_step: gradient {gradient.shape} != latent {latent.shape}")
    if not np.all(np.isfinite(gradient)):
        raise RuntimeError("ngd_step: non-finite gradient, aborting run")
    if latent.ndim == 1:
        norm = float(np.linalg.norm(gradient))
        return latent if norm == 0.0 else latent - rate * gradient / norm
    norms = np.linalg.norm(gradient, axis=-1, keepdims=True)
    direction = np.divide(gradient, norms, out=np.zeros_like(gradient), where=norms != 0.0)
    return latent - rate * direction


@dataclass
class InversionRun:
    target: np.ndarray
    comp: D.CompositionSpec
    seed: int
    schedule: PhaseSchedule
    losses: list[float] = field(default_factory=list)
    phase_losses: tuple[list[float], ...] = ()
    image_global: np.ndarray | None = None
    image_layerwise: np.ndarray | None = None
    image_filterwise: np.ndarray | None = None
    latent_global: G.LatentGlobal | None = None
    latent_layerwise: G.LatentLayerwise | None = None
    latent_filterwise: G.LatentFilterwise | None = None
    elapsed: float = 0.0

    @property
    def restored(self) -> np.ndarray:
        return self.image_filterwise



def run_phase(
    latent,
    comp: D.CompositionSpec,
    target: np.ndarray,
    weights: G.GeneratorWeights,
    rate: float,
    steps: int,
    stream: Stream,
    noise_hook: np.ndarray | None = None,
    extractor: P.FeatureExtractor | None = None,
):
    """Optimize one latent granularity for a fixed number of NGD steps.

    Returns (final latent, image synthesized from it, per-step losses).
    The differentiable degradation redraws its stochastic parts from the
    stream at every step; noise_hook is the fixed masked-region noise
    field added to both sides of the objective when the spec inpaints.
    """
    target_chw = np.ascontiguousarray(np.asarray(target, dtype=np.float64).transpose(2, 0, 1))
    if noise_hook is not None:
        target_chw = target_chw + noise_hook
    losses: list[float] = []
    for step in range(steps):
        leaves, rows = G.latent_graph_rows(latent, weights)
        x = G.synthesize_graph(rows, weights)
        degraded = D.compose_graph(comp, x, stream)
        if noise_hook is not None:
            degraded = T.add(degraded, T.constant(noise_hook))
        loss = P.restoration_objective_graph(degraded, T.constant(target_chw), extractor)
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss at step {step}")
        losses.append(value)
        T.backward(loss)
        new_values = []
        for lv in leaves:
            grad = lv.grad if lv.grad is not None else np.zeros_like(lv.data)
            new_values.append(ngd_step(lv.data, grad, rate))
        latent = _apply_values(latent, new_values)
    image = G.synthesize(latent, weights)
    return latent, image, losses


def _apply_values(latent, values):
    if isinstance(latent, G.LatentGlobal):
        return G.LatentGlobal(values[0][0])
    if isinstance(latent, G.LatentLayerwise):
        return G.LatentLayerwise(np.stack([v[0] for v in values]))
    return G.LatentFilterwise(tuple(values))


def invert(
    target: np.ndarray,
    comp: D.CompositionSpec,
    weights: G.GeneratorWeights,
    seed: int,
    schedule: PhaseSchedule | None = None,
    init: G.LatentGlobal | None = None,
    extractor: P.FeatureExtractor | None = None,
) -> InversionRun:
    """Three-phase restoration of a degraded target image."""
    schedule = schedule or PhaseSchedule()
    target = np.asarray(target, dtype=np.float64)
    expected = D.degraded_resolution(comp, weights.config.resolution)
    if target.shape != (expected, expected, 3):
        raise ValueError(
            f"target shape {target.shape} does not match the degraded "
            f"generator output ({expected}, {expected}, 3)"
        )

    t0 = time.perf_counter()
    stream = Stream(seed)
    noise_hook = None
    masks = D.inpaint_masks(comp, weights.config.resolution)
    if masks:
        noise_hook = P.masked_noise_field(masks[0], stream)

    run = InversionRun(target=target, comp=comp, seed=seed, schedule=schedule)
    w0 = init if init is not None else G.mean_latent(weights)

    (r1, s1), (r2, s2), (r3, s3) = schedule.phases
    latent, run.image_global, l1 = run_phase(
        G.LatentGlobal(w0.values.copy()), comp, target, weights, r1, s1,
        stream, noise_hook, extractor)
    run.latent_global = latent

    latent2 = G.expand_to_layerwise(latent, weights.config)
    latent2, run.image_layerwise, l2 = run_phase(
        latent2, comp, target, weights, r2, s2, stream, noise_hook, extractor)
    run.latent_layerwise = latent2

    latent3 = G.expand_to_filterwise(latent2, weights.config)
    latent3, run.image_filterwise, l3 = run_phase(
        latent3, comp, target, weights, r3, s3, stream, noise_hook, extractor)
    run.latent_filterwise = latent3

    run.phase_losses = (l1, l2, l3)
    run.losses = l1 + l2 + l3
    run.elapsed = time.perf_counter() - t0
    return run
