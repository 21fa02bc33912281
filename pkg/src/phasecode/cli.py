"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import ExitStack
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as pio
from .camera import CameraError, render_acquisition
from .engine import EngineConfigError, NumericalAbort, solve, solve_deblur
from .generators import GeneratorError
from .objectives import evaluate, interior_mask
from .optics import OpticsError, psi_to_depth
from .scenes import SceneSpec, SceneSpecError, make_synthetic, suite_specs
from . import sweeps

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ERRORS = (OpticsError, GeneratorError, EngineConfigError, SceneSpecError, CameraError, ValueError)

log = logging.getLogger("phasecode")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [optics], [generator], [engine] sections")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel solves for sweeps")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS for bit-reproducible results")
    common.add_argument("--strict-edge-mask", action="store_true",
                        help="exclude S/2 px around depth edges from depth metrics")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="phasecode", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], help="write layered synthetic scenes")
    s.add_argument("--suite", action="store_true", help="write the default 5-scene suite")
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--psi-range", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--depth-range", type=float, nargs=2, metavar=("NEAR", "FAR"), help="meters")
    s.add_argument("--psi-values", type=float, nargs="+")
    s.add_argument("--texture", default="noise", choices=("checker", "noise", "image"))
    s.add_argument("--image", help="source image for --texture image")

    s = sub.add_parser("simulate", parents=[common], help="render a coded capture of a scene")
    s.add_argument("scene", help="scene directory")
    s.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise std")
    s.add_argument("--planes", type=int, default=57, help="acquisition bank planes")

    s = sub.add_parser("reconstruct", parents=[common], help="recover image and depth from a capture")
    s.add_argument("coded", help="capture directory or PNG")
    s.add_argument("--gt", help="ground-truth scene directory for metrics")
    s.add_argument("--mode", choices=("full", "deblur"), help="override engine mode")
    s.add_argument("--iterations", type=int, help="override engine iterations")

    s = sub.add_parser("evaluate", parents=[common], help="score a reconstruction against ground truth")
    s.add_argument("result", help="reconstruction directory")
    s.add_argument("gt", help="ground-truth scene directory")

    s = sub.add_parser("psf-dump", parents=[common], help="write the PSF bank and per-kernel images")
    s.add_argument("--planes", type=int, default=15)

    s = sub.add_parser("ablate", parents=[common], help="run an ablation sweep over the scene suite")
    s.add_argument("kind", choices=sweeps.ABLATIONS)
    s.add_argument("--scenes", type=int, default=5, help="number of suite scenes to use")
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--iterations", type=int, help="override engine iterations")
    s.add_argument("--cache", help="result cache directory")
    return p


def _resolve(args) -> pio.RunConfig:
    cfg = pio.load_config(args.config)
    eng = cfg.engine
    if args.seed is not None:
        eng = replace(eng, seed=args.seed)
        cfg = replace(cfg, generator=replace(cfg.generator, seed=args.seed))
    if getattr(args, "mode", None):
        eng = replace(eng, mode=args.mode)
    if getattr(args, "iterations", None):
        eng = replace(eng, iterations=args.iterations, t_switch=min(eng.t_switch, args.iterations))
    return replace(cfg, engine=eng)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_make_synthetic(args, cfg: pio.RunConfig) -> int:
    out = _out(args, "scenes")
    seed = args.seed if args.seed is not None else 0
    if args.suite:
        specs = suite_specs(args.height, args.width)
    else:
        extra = {}
        if args.psi_range:
            extra["psi_range"] = tuple(args.psi_range)
        if args.depth_range:
            extra["depth_range"] = tuple(args.depth_range)
        if args.psi_values:
            extra["psi_values"] = tuple(args.psi_values)
        specs = [SceneSpec(height=args.height, width=args.width, layers=args.layers, texture=args.texture,
                           image_path=args.image, seed=seed, **extra)]
    written = {}
    for spec in specs:
        d = out / f"scene_{spec.seed:03d}" if len(specs) > 1 else out
        pio.save_scene(d, make_synthetic(spec, cfg.optics))
        written[str(spec.seed)] = str(d)
    pio.RunManifest("make-synthetic", {"optics": cfg.optics.to_dict(), "scenes": [s.to_dict() for s in specs]},
                    {}, written, seed).write(out)
    return EXIT_OK


def cmd_simulate(args, cfg: pio.RunConfig) -> int:
    scene = pio.load_scene(args.scene)
    out = _out(args, "coded")
    seed = args.seed if args.seed is not None else cfg.engine.seed
    bank = pio.cached_bank(cfg.optics, args.planes)
    y = render_acquisition(scene, cfg.optics, bank, noise_sigma=args.sigma, seed=seed)
    pio.save_coded(out, y)
    pio.RunManifest("simulate", {"optics": cfg.optics.to_dict(), "planes": args.planes, "sigma": args.sigma},
                    {"scene": args.scene}, {"coded": str(out / "coded.png")}, seed).write(out)
    return EXIT_OK


def _metrics_json(metrics: dict, cfg: pio.RunConfig, loss_history, wall: float) -> dict:
    out = dict(metrics)
    out.update({"loss_history": [float(v) for v in loss_history], "config_digest": cfg.digest,
                "seed": cfg.engine.seed, "wall_time_s": wall})
    return out


def cmd_reconstruct(args, cfg: pio.RunConfig) -> int:
    y = pio.load_coded(args.coded)
    gt = pio.load_scene(args.gt) if args.gt else None
    out = _out(args, "result")
    bank = pio.cached_bank(cfg.optics, cfg.engine.planes)
    mask = interior_mask(gt.psi_map, cfg.optics, args.strict_edge_mask) if gt is not None else None
    run = solve_deblur if cfg.engine.mode == "deblur" else solve
    try:
        res = run(y, bank, cfg.generator, cfg.engine, gt=gt, metric_mask=mask)
    except NumericalAbort as exc:
        if exc.snapshot is not None:
            pio.write_png16(out / "abort_image.png", exc.snapshot["image"])
            pio.write_map_f32(out / "abort_psi.f32", exc.snapshot["psi_map"])
        raise
    cfg_o = cfg.optics
    pio.write_png16(out / "image.png", res.image)
    pio.write_map_f32(out / "psi.f32", res.psi_map)
    pio.write_png16(out / "psi_vis.png", (res.psi_map - cfg_o.psi_min) / (cfg_o.psi_max - cfg_o.psi_min))
    pio.write_map_f32(out / "depth.f32", res.depth_map_m)
    z_lo, z_hi = psi_to_depth(cfg_o.psi_max, cfg_o), psi_to_depth(cfg_o.psi_min, cfg_o)
    pio.write_png16(out / "depth_vis.png", (res.depth_map_m - z_lo) / (z_hi - z_lo))
    pio.write_png16(out / "rendered.png", res.rendered.data)
    pio.save_checkpoint(out / "generator.ckpt", res.generator)
    pio.write_json(out / "metrics.json", _metrics_json(res.metrics, cfg, res.loss_history["total"], res.wall_time_s))
    pio.RunManifest("reconstruct", cfg.to_dict(), {"coded": args.coded, "gt": args.gt},
                    {"image": "image.png", "psi": "psi.f32", "depth": "depth.f32", "metrics": "metrics.json",
                     "checkpoint": "generator.ckpt"},
                    cfg.engine.seed).write(out)
    log.info("reconstruction written to %s %s", out, res.metrics)
    return EXIT_OK


def cmd_evaluate(args, cfg: pio.RunConfig) -> int:
    rdir = Path(args.result)
    gt = pio.load_scene(args.gt)
    image = pio.read_png16(rdir / "image.png")
    psi = pio.read_map_f32(rdir / "psi.f32")
    mask = interior_mask(gt.psi_map, cfg.optics, args.strict_edge_mask)
    metrics = evaluate(image, psi, gt.image, gt.psi_map, cfg.optics, mask)
    out = Path(args.out) if args.out else rdir
    out.mkdir(parents=True, exist_ok=True)
    pio.write_json(out / "evaluation.json", dict(metrics, config_digest=cfg.digest))
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_psf_dump(args, cfg: pio.RunConfig) -> int:
    out = _out(args, "psf")
    bank = pio.cached_bank(cfg.optics, args.planes)
    pio.save_bank(out / "bank.bin", bank)
    for k, psi in enumerate(bank.psi_grid):
        for c, name in enumerate("rgb"):
            kern = bank.kernels[k, c]
            pio.write_png16(out / f"psf_{k:02d}_{name}_psi{psi:+.2f}.png", kern / kern.max())
    pio.RunManifest("psf-dump", {"optics": cfg.optics.to_dict(), "planes": args.planes}, {},
                    {"bank": "bank.bin"}, 0).write(out)
    return EXIT_OK


def cmd_ablate(args, cfg: pio.RunConfig) -> int:
    out = _out(args, f"ablate_{args.kind}")
    specs = suite_specs(args.height, args.width)[: args.scenes]
    cases = sweeps.ablation_cases(args.kind, cfg.optics, cfg.generator, cfg.engine, specs, args.strict_edge_mask)
    results = sweeps.run_cases(cases, jobs=args.jobs, cache=Path(args.cache) if args.cache else None)
    rows = sweeps.table_rows(cases, results)
    with open(out / "table.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=sweeps.TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    summary = sweeps.summarize(rows)
    pio.write_json(out / "table.json", {"rows": rows, "summary": summary})
    (out / "summary.md").write_text(sweeps.markdown_summary(args.kind, summary))
    pio.RunManifest("ablate", dict(cfg.to_dict(), kind=args.kind, scenes=[s.to_dict() for s in specs]),
                    {}, {"table": "table.csv", "summary": "summary.md"}, cfg.engine.seed).write(out)
    print((out / "summary.md").read_text())
    return EXIT_OK


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "psf-dump": cmd_psf_dump,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with ExitStack() as stack:
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            stack.enter_context(threadpool_limits(limits=1))
        try:
            cfg = _resolve(args)
        except pio.FormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        except (*CONFIG_ERRORS, TypeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            return COMMANDS[args.command](args, cfg)
        except NumericalAbort as exc:
            print(f"numerical abort at iteration {exc.iteration}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except FloatingPointError as exc:
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except (pio.FormatError, OSError) as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        except CONFIG_ERRORS as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
