"""Scene-suite runs and ablation sweeps with an on-disk result cache.

A case is a plain dict (scene spec, configs, acquisition settings) so it
can cross process boundaries and hash stably. Results are keyed by the case
digest plus a hash of the numeric source files, so editing the solver
invalidates old entries automatically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import render_acquisition
from .engine import EngineConfig, solve, solve_deblur
from .generators import GeneratorConfig
from .objectives import interior_mask, psnr
from .optics import OpticsConfig, perturb_mask
from .scenes import SceneSpec, deblur_specs, make_synthetic, suite_specs

log = logging.getLogger(__name__)

ABLATIONS = ("loss", "generator", "mismatch")
MISMATCH_FACTORS = (0.0, 0.01, 0.02, 0.05, 0.10)
_NUMERIC_SOURCES = ("diffcore/tensor.py", "diffcore/nn.py", "optics.py", "camera.py", "generators.py",
                    "objectives.py", "engine.py", "scenes.py", "sweeps.py")


def source_hash() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in _NUMERIC_SOURCES:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()


def make_case(scene: SceneSpec, optics: OpticsConfig, gen: GeneratorConfig, eng: EngineConfig,
              acq_planes: int = 57, noise_sigma: float = 0.0, perturbation: float = 0.0,
              strict_edge_mask: bool = False, label: str = "") -> dict:
    return {"scene": scene.to_dict(), "optics": optics.to_dict(), "generator": gen.to_dict(),
            "engine": eng.to_dict(), "acq_planes": int(acq_planes), "noise_sigma": float(noise_sigma),
            "perturbation": float(perturbation), "strict_edge_mask": bool(strict_edge_mask),
            "label": label}


def case_digest(case: dict) -> str:
    body = {k: v for k, v in case.items() if k != "label"}
    return hashlib.sha256((json.dumps(body, sort_keys=True) + source_hash()).encode()).hexdigest()


def _bank(cfg: OpticsConfig, planes: int, perturbation: float = 0.0):
    from .io import cached_bank

    return cached_bank(cfg, planes, perturbation)


def run_case(case: dict) -> dict:
    """Simulate the capture and solve; returns metrics and loss statistics."""
    start = time.perf_counter()
    optics = OpticsConfig.from_dict(case["optics"])
    spec = SceneSpec.from_dict(case["scene"])
    gcfg = GeneratorConfig.from_dict(case["generator"])
    ecfg = EngineConfig.from_dict(case["engine"])
    scene = make_synthetic(spec, optics)
    y = render_acquisition(scene, optics, _bank(optics, case["acq_planes"]),
                           noise_sigma=case["noise_sigma"], seed=spec.seed)
    # model mismatch: the solver's bank comes from a perturbed mask, the capture from the nominal one
    solver_optics = perturb_mask(optics, case["perturbation"])
    bank = _bank(solver_optics, ecfg.planes, case["perturbation"])
    mask = interior_mask(scene.psi_map, optics, case["strict_edge_mask"])
    run = solve_deblur if ecfg.mode == "deblur" else solve
    res = run(y, bank, gcfg, ecfg, gt=scene, metric_mask=mask)
    hist = res.loss_history["total"]
    n = min(100, len(hist))
    out = dict(res.metrics)
    out.update({
        "input_psnr_db": psnr(y.data, scene.image),
        "loss_first": float(hist[0]),
        "loss_final": float(hist[-1]),
        "loss_median_head": float(np.median(hist[:n + 1])),
        "loss_median_tail": float(np.median(hist[-(n + 1):])),
        "wall_time_s": time.perf_counter() - start,
        "solve_time_s": res.wall_time_s,
        "iterations": len(hist),
        "layer_psi": scene.meta["layer_psi"],
    })
    if res.psi_scalar is not None:
        out["psi_scalar"] = res.psi_scalar
    return out


def cached_run(case: dict, cache: Path | None = None) -> dict:
    """``run_case`` memoized on disk by case digest and numeric source hash."""
    from .io import cache_dir

    cache = Path(cache) if cache is not None else cache_dir() / "runs"
    key = case_digest(case)
    path = cache / f"{key}.json"
    if path.exists():
        return json.loads(path.read_text())["metrics"]
    metrics = run_case(case)
    cache.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_text(json.dumps({"case": case, "metrics": metrics}, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return metrics


def run_cases(cases: list[dict], jobs: int = 1, cache: Path | None = None) -> list[dict]:
    """Run cases, ``jobs`` at a time; results come back in input order."""
    if jobs <= 1 or len(cases) <= 1:
        return [cached_run(c, cache) for c in cases]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(cached_run, cases, [cache] * len(cases)))


# -- ablations -----------------------------------------------------------------------------------
def ablation_cases(kind: str, optics: OpticsConfig | None = None, gen: GeneratorConfig | None = None,
                   eng: EngineConfig | None = None, specs: list[SceneSpec] | None = None,
                   strict_edge_mask: bool = False) -> list[dict]:
    """Cases for one ablation: every variant crossed with every scene."""
    if kind not in ABLATIONS:
        raise ValueError(f"ablation kind must be one of {ABLATIONS}, got {kind!r}")
    optics = optics or OpticsConfig()
    gen = gen or GeneratorConfig(psi_min=optics.psi_min, psi_max=optics.psi_max)
    eng = eng or EngineConfig(iterations=1500)
    specs = specs if specs is not None else suite_specs()
    variants: list[tuple[str, dict]] = []
    if kind == "loss":
        variants = [("l2_then_ssim", {"engine": replace(eng, use_ssim=True)}),
                    ("l2_only", {"engine": replace(eng, use_ssim=False)})]
    elif kind == "generator":
        variants = [(k, {"generator": replace(gen, kind=k)}) for k in ("dip", "siren", "pip")]
    else:
        variants = [(f"phase_{int(round(f * 100))}pct", {"perturbation": f}) for f in MISMATCH_FACTORS]
    cases = []
    for label, over in variants:
        for spec in specs:
            cases.append(make_case(spec, optics, over.get("generator", gen), over.get("engine", eng),
                                   perturbation=over.get("perturbation", 0.0),
                                   strict_edge_mask=strict_edge_mask, label=label))
    return cases


def deblur_cases(optics: OpticsConfig | None = None, gen: GeneratorConfig | None = None,
                 eng: EngineConfig | None = None, specs: list[SceneSpec] | None = None) -> list[dict]:
    optics = optics or OpticsConfig()
    gen = gen or GeneratorConfig(psi_min=optics.psi_min, psi_max=optics.psi_max)
    eng = replace(eng or EngineConfig(iterations=1500), mode="deblur")
    specs = specs if specs is not None else deblur_specs()
    return [make_case(s, optics, gen, eng, label="deblur") for s in specs]


TABLE_COLUMNS = ("variant", "scene_seed", "layers", "psnr_db", "ssim", "depth_rmse_m", "depth_mae_m",
                 "psi_rmse", "wall_time_s")


def table_rows(cases: list[dict], results: list[dict]) -> list[dict]:
    rows = []
    for case, res in zip(cases, results):
        row = {"variant": case["label"], "scene_seed": case["scene"]["seed"], "layers": case["scene"]["layers"]}
        row.update({k: res.get(k) for k in TABLE_COLUMNS[3:]})
        rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict[str, dict]:
    """Per-variant means of the numeric table columns, in first-seen order."""
    out: dict[str, dict] = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == variant]
        out[variant] = {k: float(np.mean([r[k] for r in sel])) for k in TABLE_COLUMNS[3:]}
        out[variant]["n"] = len(sel)
    return out


def markdown_summary(kind: str, summary: dict[str, dict]) -> str:
    cols = ("psnr_db", "ssim", "depth_rmse_m", "psi_rmse")
    lines = [f"# Ablation: {kind}", "", "| variant | n | " + " | ".join(cols) + " |",
             "|---|---|" + "---|" * len(cols)]
    for variant, s in summary.items():
        lines.append(f"| {variant} | {s['n']} | " + " | ".join(f"{s[c]:.4f}" for c in cols) + " |")
    return "\n".join(lines) + "\n"
