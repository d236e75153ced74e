"""Command-line entry points.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import degradations as D
from . import generator as G
from . import gradcheck as GC
from . import tensor as T
from .inversion import invert
from .ppm import read_ppm, write_ppm
from .rng import Stream


def _read_spec(arg: str) -> D.CompositionSpec:
    text = Path(arg[1:]).read_text() if arg.startswith("@") else arg
    return D.spec_from_json(text)


def _cmd_gen_weights(args) -> int:
    config = G.GeneratorConfig(
        latent_dim=args.latent_dim, channels=args.channels,
        resolution=args.resolution,
        num_layers=2 * int(np.log2(args.resolution // 4)),
    )
    weights = G.generate_weights(config, args.seed)
    G.save_weights(args.out, weights)
    print(f"wrote {args.out} (resolution {config.resolution}, seed {args.seed})")
    return 0


def _cmd_sample(args) -> int:
    weights = G.load_weights(args.ckpt)
    z = Stream(args.seed).normals(weights.config.latent_dim)
    img = G.synthesize(G.map_latent(z, weights), weights)
    write_ppm(args.out, img)
    print(f"wrote {args.out}")
    return 0


def _cmd_degrade(args) -> int:
    comp = _read_spec(args.spec)
    img = read_ppm(args.input)
    out = D.compose(comp, img, mode=args.mode)
    write_ppm(args.out, out)
    print(f"wrote {args.out} ({out.shape[1]}x{out.shape[0]})")
    return 0


def _cmd_restore(args) -> int:
    weights = G.load_weights(args.ckpt)
    comp = _read_spec(args.spec)
    target = read_ppm(args.target)
    run = invert(target, comp, weights, args.seed)
    write_ppm(args.out, run.restored)
    if args.trace:
        lines = ["step,phase,loss"]
        step = 0
        for phase, losses in enumerate(run.phase_losses, start=1):
            for v in losses:
                lines.append(f"{step},{phase},{v:.12g}")
                step += 1
        Path(args.trace).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out} (final loss {run.losses[-1] if run.losses else float('nan'):.6g})")
    return 0


def _cmd_benchmark(args) -> int:
    weights = G.load_weights(args.ckpt)
    plan = B.BenchmarkPlan.from_json(json.loads(Path(args.plan).read_text()))
    report = B.run_benchmark(plan, weights, args.out)
    n_fail = len(report.failures)
    print(f"benchmark complete: {len(report.sample_rows)} runs, {n_fail} failures -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = GC.run_suite()
    for line in report.lines():
        print(line)
    if not report.ok:
        print("gradient check FAILED")
        return 2
    print("all gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgir", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-weights", help="generate a seeded generator checkpoint")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--channels", type=int, default=32)
    g.add_argument("--latent-dim", type=int, default=64)
    g.set_defaults(fn=_cmd_gen_weights)

    s = sub.add_parser("sample", help="sample one generator image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sample)

    d = sub.add_parser("degrade", help="apply a degradation spec to an image")
    d.add_argument("--input", required=True)
    d.add_argument("--spec", required=True, help="JSON text or @file")
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=("true", "approx"), default="true")
    d.set_defaults(fn=_cmd_degrade)

    r = sub.add_parser("restore", help="restore a degraded target by inversion")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--spec", required=True, help="JSON text or @file")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", default=None, help="write per-step loss CSV here")
    r.set_defaults(fn=_cmd_restore)

    b = sub.add_parser("benchmark", help="run a benchmark plan")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--plan", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=_cmd_benchmark)

    c = sub.add_parser("gradcheck", help="finite-difference and surrogate checks")
    c.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except (ValueError, T.ShapeError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
