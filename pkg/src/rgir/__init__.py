"""Unsupervised image restoration by progressive inversion of a seeded
style-modulated generator, with differentiable degradation models and a
benchmark harness."""

from .degradations import (
    CompositionSpec,
    DegradationSpec,
    compose,
    level_params,
    make_stroke_mask,
    spec_from_json,
    spec_to_json,
)
from .generator import (
    GeneratorConfig,
    GeneratorWeights,
    LatentFilterwise,
    LatentGlobal,
    LatentLayerwise,
    expand_to_filterwise,
    expand_to_layerwise,
    generate_weights,
    load_weights,
    map_latent,
    mean_latent,
    save_weights,
    synthesize,
)
from .inversion import InversionRun, PhaseSchedule, invert, ngd_step, run_phase
from .perceptual import (
    FeatureExtractor,
    accuracy,
    fidelity,
    full_loss,
    multires_loss,
    patch_fid,
    perceptual_distance,
)
from .bench import BenchmarkPlan, PlanCell, enumerate_compositions, make_dataset, run_benchmark
from .rng import Stream

__version__ = "0.1.0"

__all__ = [
    "BenchmarkPlan",
    "CompositionSpec",
    "DegradationSpec",
    "FeatureExtractor",
    "GeneratorConfig",
    "GeneratorWeights",
    "InversionRun",
    "LatentFilterwise",
    "LatentGlobal",
    "LatentLayerwise",
    "PhaseSchedule",
    "PlanCell",
    "Stream",
    "accuracy",
    "compose",
    "enumerate_compositions",
    "expand_to_filterwise",
    "expand_to_layerwise",
    "fidelity",
    "full_loss",
    "generate_weights",
    "invert",
    "level_params",
    "load_weights",
    "make_dataset",
    "make_stroke_mask",
    "map_latent",
    "mean_latent",
    "multires_loss",
    "ngd_step",
    "patch_fid",
    "perceptual_distance",
    "run_benchmark",
    "run_phase",
    "save_weights",
    "spec_from_json",
    "spec_to_json",
    "synthesize",
]
