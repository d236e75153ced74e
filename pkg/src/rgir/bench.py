"""Benchmark harness: synthesizes restoration tasks and aggregates metrics.

Clean images are generator samples, so every target has an in-range
solution. Cells are (task-or-composition, level) pairs; all per-run seeds
derive from (base seed, cell ordinal, image index), making reports
byte-identical across reruns. One PhaseSchedule value drives every cell;
the harness asserts this and exposes no per-task overrides.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import degradations as D
from . import generator as G
from . import perceptual as P
from .inversion import InversionRun, PhaseSchedule, invert
from .ppm import write_ppm
from .rng import MASK64, Stream, splitmix64

WORKERS_ENV = "RGIR_WORKERS"

_LETTER = {"upsample": "U", "denoise": "N", "deartifact": "A", "inpaint": "P"}


def derive_seed(base: int, *parts: int) -> int:
    s = base & MASK64
    for p in parts:
        _, s = splitmix64((s ^ (p & MASK64)) & MASK64)
    return s


@dataclass(frozen=True)
class PlanCell:
    tasks: tuple[str, ...]
    levels: tuple[str, ...]
    images: int

    def __post_init__(self):
        for t in self.tasks:
            if t not in D.KINDS:
                raise ValueError(f"unknown task {t!r}")
        order = [D.KINDS.index(t) for t in self.tasks]
        if any(b <= a for a, b in zip(order, order[1:])):
            raise ValueError(f"tasks must follow the canonical order {D.KINDS}")
        if len(self.tasks) > 1 and self.levels != ("M",):
            raise ValueError("compositions run at level M only")
        for lv in self.levels:
            if lv not in D.LEVEL_NAMES:
                raise ValueError(f"unknown level {lv!r}")
        if self.images < 1:
            raise ValueError("images must be >= 1")

    @property
    def name(self) -> str:
        if len(self.tasks) == 1:
            return self.tasks[0]
        return "".join(_LETTER[t] for t in self.tasks)


@dataclass(frozen=True)
class BenchmarkPlan:
    cells: tuple[PlanCell, ...]
    base_seed: int = 0

    @staticmethod
    def from_json(payload: dict) -> "BenchmarkPlan":
        cells = tuple(
            PlanCell(tuple(c["tasks"]), tuple(c["levels"]), int(c.get("images", 20)))
            for c in payload["cells"]
        )
        return BenchmarkPlan(cells, int(payload.get("base_seed", 0)))


def default_plan(images: int = 20, full_levels: bool = False) -> BenchmarkPlan:
    levels = D.LEVEL_NAMES if full_levels else ("XS", "M", "XL")
    cells = [PlanCell((k,), tuple(levels), images) for k in D.KINDS]
    return BenchmarkPlan(tuple(cells))


def make_dataset(weights: G.GeneratorWeights, n: int, seed: int):
    """n clean generator samples plus the latents that produced them."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stream = Stream(seed)
    images, latents = [], []
    for _ in range(n):
        z = stream.normals(weights.config.latent_dim)
        w = G.map_latent(z, weights)
        latents.append(w)
        images.append(G.synthesize(w, weights))
    return images, latents


def enumerate_compositions(level: str = "M") -> list[D.CompositionSpec]:
    """All non-empty subsequences of the canonical chain at one level.

    4 singletons, 6 pairs, 4 triples and the full quadruple; seeds are
    placeholders for the harness to rewrite per run.
    """
    out = []
    n = len(D.KINDS)
    for size in range(1, n + 1):
        for bits in range(1 << n):
            kinds = [D.KINDS[i] for i in range(n) if bits >> i & 1]
            if len(kinds) != size:
                continue
            out.append(D.CompositionSpec(tuple(
                D.DegradationSpec.of(k, level=level, seed=0) for k in kinds
            )))
    return out


def _with_seeds(comp: D.CompositionSpec, base: int, cell: int, image: int) -> D.CompositionSpec:
    return D.CompositionSpec(tuple(
        D.DegradationSpec(op.kind, derive_seed(base, 101, cell, image, j), op.level, op.params)
        for j, op in enumerate(comp.ops)
    ))


# ---------------------------------------------------------------------------
# worker plumbing (module-level so spawned processes can import it)

_CTX: dict = {}


def _init_worker(weights, schedule, mean_values, extractor_seed):
    _CTX["weights"] = weights
    _CTX["schedule"] = schedule
    _CTX["mean"] = G.LatentGlobal(mean_values)
    _CTX["extractor"] = P.default_extractor(extractor_seed)


def _run_single(payload):
    idx, comp, clean, run_seed = payload
    weights = _CTX["weights"]
    extractor = _CTX["extractor"]
    try:
        target = D.compose(comp, clean, mode="true")
        run: InversionRun = invert(
            target, comp, weights, run_seed,
            schedule=_CTX["schedule"], init=_CTX["mean"], extractor=extractor,
        )
        init_img = G.synthesize(_CTX["mean"], weights)
        row = {
            "accuracy": P.accuracy(run.restored, clean, extractor),
            "fidelity": P.fidelity(run.restored, target, comp, extractor),
            "init_accuracy": P.accuracy(init_img, clean, extractor),
            "init_fidelity": P.fidelity(init_img, target, comp, extractor),
            "elapsed": run.elapsed,
        }
        return idx, row, target, run.restored, None
    except Exception as exc:  # individual failures recorded, cell continues
        return idx, None, None, None, f"{type(exc).__name__}: {exc}"


def _invert_job(payload):
    idx, target, comp, run_seed = payload
    run = invert(
        target, comp, _CTX["weights"], run_seed,
        schedule=_CTX["schedule"], init=_CTX["mean"], extractor=_CTX["extractor"],
    )
    return idx, run


def invert_jobs(
    jobs,
    weights: G.GeneratorWeights,
    schedule: PhaseSchedule | None = None,
    init: G.LatentGlobal | None = None,
    workers: int | None = None,
    extractor_seed: int = P.FEATURE_SEED,
) -> list[InversionRun]:
    """Run independent (target, comp, seed) inversions, optionally in
    parallel worker processes; result order matches the job order."""
    schedule = schedule or PhaseSchedule()
    if init is None:
        init = G.mean_latent(weights)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, os.cpu_count() or 1))
    workers = max(1, workers)
    payloads = [(i, t, c, s) for i, (t, c, s) in enumerate(jobs)]
    results: dict[int, InversionRun] = {}
    if workers > 1 and len(payloads) > 1:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = get_context("spawn")
        with ctx.Pool(workers, initializer=_init_worker,
                      initargs=(weights, schedule, init.values, extractor_seed)) as pool:
            for idx, run in pool.imap_unordered(_invert_job, payloads):
                results[idx] = run
    else:
        _init_worker(weights, schedule, init.values, extractor_seed)
        for payload in payloads:
            idx, run = _invert_job(payload)
            results[idx] = run
    return [results[i] for i in range(len(payloads))]


@dataclass
class BenchmarkReport:
    plan: BenchmarkPlan
    schedule: PhaseSchedule
    out_dir: Path
    sample_rows: list[dict] = field(default_factory=list)
    summary_rows: list[dict] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    cell_schedules: list[PhaseSchedule] = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[h]) for h in header))
    path.write_text("\n".join(lines) + "\n")


def run_benchmark(
    plan: BenchmarkPlan,
    weights: G.GeneratorWeights,
    out_dir,
    schedule: PhaseSchedule | None = None,
    workers: int | None = None,
    extractor_seed: int = P.FEATURE_SEED,
) -> BenchmarkReport:
    schedule = schedule or PhaseSchedule()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)

    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, os.cpu_count() or 1))
    workers = max(1, workers)

    n_images = max(c.images for c in plan.cells)
    clean_images, _ = make_dataset(weights, n_images, derive_seed(plan.base_seed, 1))
    mean_lat = G.mean_latent(weights)
    init_img = G.synthesize(mean_lat, weights)
    extractor = P.default_extractor(extractor_seed)

    # expand cells into concrete runs
    runs = []
    cell_infos = []
    ordinal = 0
    for cell in plan.cells:
        for level in cell.levels:
            base_comp = D.CompositionSpec(tuple(
                D.DegradationSpec.of(k, level=level, seed=0) for k in cell.tasks
            ))
            info = {"cell": cell, "level": level, "ordinal": ordinal, "runs": []}
            for i in range(cell.images):
                comp = _with_seeds(base_comp, plan.base_seed, ordinal, i)
                run_seed = derive_seed(plan.base_seed, 202, ordinal, i)
                info["runs"].append(len(runs))
                runs.append((len(runs), comp, clean_images[i], run_seed))
            cell_infos.append(info)
            ordinal += 1

    results: dict[int, tuple] = {}
    if workers > 1 and len(runs) > 1:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = get_context("spawn")
        with ctx.Pool(
            workers, initializer=_init_worker,
            initargs=(weights, schedule, mean_lat.values, extractor_seed),
        ) as pool:
            for idx, row, target, restored, err in pool.imap_unordered(_run_single, runs):
                results[idx] = (row, target, restored, err)
    else:
        _init_worker(weights, schedule, mean_lat.values, extractor_seed)
        for payload in runs:
            idx, row, target, restored, err = _run_single(payload)
            results[idx] = (row, target, restored, err)

    report = BenchmarkReport(plan=plan, schedule=schedule, out_dir=out_dir)
    sample_rows, baseline_rows, summary_rows = [], [], []
    for info in cell_infos:
        cell, level = info["cell"], info["level"]
        # single-hyperparameter contract: every cell consumes the one schedule
        assert schedule is report.schedule, "phase schedule must be shared across cells"
        report.cell_schedules.append(schedule)
        cell_dir = out_dir / "images" / f"{cell.name}_{level}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        restored_set = []
        acc, fid = [], []
        for j, ridx in enumerate(info["runs"]):
            row, target, restored, err = results[ridx]
            run_id = f"{cell.name}-{level}-{j:03d}"
            if err is not None:
                report.failures.append((run_id, err))
                continue
            write_ppm(cell_dir / f"{j:03d}_clean.ppm", clean_images[j])
            write_ppm(cell_dir / f"{j:03d}_target.ppm", target)
            write_ppm(cell_dir / f"{j:03d}_restored.ppm", restored)
            restored_set.append(restored)
            acc.append(row["accuracy"])
            fid.append(row["fidelity"])
            sample_rows.append({
                "run_id": run_id, "task": cell.name, "level": level, "image_id": j,
                "accuracy": row["accuracy"], "fidelity": row["fidelity"],
            })
            baseline_rows.append({
                "run_id": run_id, "task": cell.name, "level": level, "image_id": j,
                "init_accuracy": row["init_accuracy"],
                "init_fidelity": row["init_fidelity"],
            })
        pfid = float("nan")
        if restored_set:
            # desk default: 100 crops of 32px at resolution 64; scaled down
            # proportionally for smaller generators
            crop = min(32, weights.config.resolution // 2)
            pfid = P.patch_fid(
                restored_set, clean_images, crops_per_image=100, crop_size=crop,
                seed=derive_seed(plan.base_seed, 303, info["ordinal"]), extractor=extractor,
            )
        rep = P.MetricsReport(acc, fid, pfid)
        am, asd = rep.accuracy_mean_std
        fm, fsd = rep.fidelity_mean_std
        summary_rows.append({
            "task": cell.name, "level": level, "images": len(acc),
            "accuracy_mean": am, "accuracy_std": asd,
            "fidelity_mean": fm, "fidelity_std": fsd,
            "patch_fid": pfid,
        })

    report.sample_rows = sample_rows
    report.summary_rows = summary_rows
    _write_csv(out_dir / "samples.csv",
               ["run_id", "task", "level", "image_id", "accuracy", "fidelity"], sample_rows)
    _write_csv(out_dir / "baselines.csv",
               ["run_id", "task", "level", "image_id", "init_accuracy", "init_fidelity"],
               baseline_rows)
    _write_csv(out_dir / "summary.csv",
               ["task", "level", "images", "accuracy_mean", "accuracy_std",
                "fidelity_mean", "fidelity_std", "patch_fid"], summary_rows)
    _write_csv(out_dir / "failures.csv", ["run_id", "error"],
               [{"run_id": r, "error": e} for r, e in report.failures])
    return report
