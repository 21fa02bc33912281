"""Self-supervised reconstruction: fit a generator so its render matches one capture.

Each iteration draws the (optionally jittered) input code, generates an
image and psi map, renders them through the camera model, scores the render
against the capture with the loss schedule and takes one Adam step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .camera import CodedImage, Scene, render_differentiable
from .generators import Generator, GeneratorConfig, build_generator, make_code
from .objectives import LossSchedule, evaluate
from .optics import PsfBank, psi_to_depth

log = logging.getLogger(__name__)

MODES = ("full", "deblur")


class EngineConfigError(ValueError):
    pass


class NumericalAbort(FloatingPointError):
    """Non-finite loss or gradient; carries the last good snapshot."""

    def __init__(self, message: str, iteration: int, snapshot: dict | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass(frozen=True)
class EngineConfig:
    iterations: int = 5000
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_switch: int = 500
    use_ssim: bool = True
    ssim_additive: bool = False
    tv_weight: float = 0.0
    input_noise: float = 0.02
    snapshot_every: int = 250
    seed: int = 0
    mode: str = "full"
    planes: int = 15
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iterations < 1:
            raise EngineConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not self.lr > 0:
            raise EngineConfigError(f"lr must be positive, got {self.lr}")
        if self.t_switch < 0 or (self.use_ssim and self.t_switch > self.iterations):
            raise EngineConfigError(f"t_switch ({self.t_switch}) must lie in [0, iterations={self.iterations}]")
        if self.tv_weight < 0:
            raise EngineConfigError("tv_weight must be >= 0")
        if self.input_noise < 0:
            raise EngineConfigError("input_noise must be >= 0")
        if self.mode not in MODES:
            raise EngineConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.planes < 2:
            raise EngineConfigError("planes must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise EngineConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise EngineConfigError("Adam betas must lie in [0, 1)")

    @property
    def schedule(self) -> LossSchedule:
        t_switch = self.t_switch if self.use_ssim else self.iterations
        return LossSchedule(t_switch=t_switch, total=self.iterations, tv_weight=self.tv_weight,
                            use_ssim=self.use_ssim, additive=self.ssim_additive)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise EngineConfigError(f"unknown engine fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- Adam ---------------------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              names: list[str] | None = None) -> None:
    """One bias-corrected Adam update of ``params`` in place from their ``.grad``."""
    state.t += 1
    t = state.t
    for i, p in enumerate(params):
        g = p.grad
        if not np.isfinite(g).all():
            name = names[i] if names else str(i)
            raise NumericalAbort(
                f"non-finite gradient in block {name} at step {t} "
                f"(norm {np.linalg.norm(g[np.isfinite(g)]):.3e}, {int((~np.isfinite(g)).sum())} bad)", t)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, p in enumerate(params):
        g = p.grad
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


# -- results ---------------------------------------------------------------------------
@dataclass
class ReconstructionResult:
    image: np.ndarray
    psi_map: np.ndarray
    depth_map_m: np.ndarray
    rendered: CodedImage
    loss_history: dict[str, np.ndarray]
    metrics: dict = field(default_factory=dict)
    snapshots: list[dict] = field(default_factory=list)
    best: dict | None = None
    psi_scalar: float | None = None
    wall_time_s: float = 0.0
    generator: Generator | None = field(default=None, repr=False)


def _snapshot(t: int, image, psi, loss: float) -> dict:
    return {"iteration": t, "image": image.copy(), "psi_map": psi.copy(), "loss": loss}


class _Problem:
    """Parameters and forward pass shared by the full and deblur solves."""

    def __init__(self, y: CodedImage, bank: PsfBank, gcfg: GeneratorConfig, ecfg: EngineConfig):
        if y.data.ndim != 3 or y.data.shape[0] != bank.kernels.shape[1]:
            raise ValueError(f"capture {y.data.shape} does not match a {bank.kernels.shape[1]}-channel bank")
        if gcfg.psi_min < bank.config.psi_min or gcfg.psi_max > bank.config.psi_max:
            raise ValueError("generator psi range exceeds the bank's range")
        self.dtype = np.dtype(ecfg.dtype)
        self.bank = bank
        self.ecfg = ecfg
        h, w = y.data.shape[1:]
        self.target = dc.Tensor(y.data.astype(self.dtype))
        self.generator: Generator = build_generator(gcfg, h, w).astype(self.dtype)
        self.code = make_code(gcfg, h, w).astype(self.dtype)
        self.jitter = ecfg.input_noise if gcfg.kind == "dip" else 0.0
        self.rng = np.random.default_rng([ecfg.seed, 0x5EED])
        self.scalar_psi: dc.Tensor | None = None
        if ecfg.mode == "deblur":
            self.scalar_psi = dc.Tensor(np.zeros((1, 1), dtype=self.dtype), requires_grad=True)

    def parameters(self) -> tuple[list[dc.Tensor], list[str]]:
        names = list(self.generator.params)
        params = list(self.generator.params.values())
        if self.scalar_psi is not None:
            params.append(self.scalar_psi)
            names.append("psi_scalar")
        return params, names

    def forward(self, jitter: bool):
        code = self.code
        if jitter and self.jitter > 0:
            code = code + self.rng.normal(0.0, self.jitter, size=code.shape).astype(self.dtype)
        image, psi = self.generator(dc.Tensor(code))
        if self.scalar_psi is not None:
            cfg = self.generator.cfg
            level = dc.sigmoid(self.scalar_psi) * (cfg.psi_max - cfg.psi_min) + cfg.psi_min
            psi = dc.Tensor(np.ones(psi.shape, dtype=self.dtype)) * level
        rendered = render_differentiable(image, psi, self.bank)
        return image, psi, rendered

    def current_scalar(self) -> float | None:
        if self.scalar_psi is None:
            return None
        cfg = self.generator.cfg
        s = 1.0 / (1.0 + np.exp(-float(self.scalar_psi.data.reshape(-1)[0])))
        return cfg.psi_min + (cfg.psi_max - cfg.psi_min) * s


def _run(y: CodedImage, bank: PsfBank, gcfg: GeneratorConfig, ecfg: EngineConfig,
         gt: Scene | None, metric_mask, callback) -> ReconstructionResult:
    start = time.perf_counter()
    prob = _Problem(y, bank, gcfg, ecfg)
    params, names = prob.parameters()
    state = AdamState.zeros_like(params)
    schedule = ecfg.schedule
    cfg = bank.config

    history: dict[str, list[float]] = {"total": [], "l2": [], "ssim": [], "tv": []}
    snapshots: list[dict] = []
    best: dict | None = None
    last_snapshot: dict | None = None

    def score(image, psi) -> dict:
        if gt is None:
            return {}
        return evaluate(image, psi, gt.image, gt.psi_map, cfg, metric_mask)

    for t in range(ecfg.iterations):
        for p in params:
            p.zero_grad()
        try:
            image, psi, rendered = prob.forward(jitter=True)
            loss, parts = schedule.terms(t, rendered, prob.target, psi)
        except dc.NonFiniteError as exc:
            raise NumericalAbort(f"non-finite value at iteration {t}: {exc}", t, last_snapshot) from None
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalAbort(f"non-finite loss at iteration {t}", t, last_snapshot)
        history["total"].append(value)
        for key in ("l2", "ssim", "tv"):
            history[key].append(parts[key].item() if key in parts else 0.0)
        if best is None or value < best["loss"]:
            best = _snapshot(t, image.data, psi.data, value)
        if ecfg.snapshot_every and t % ecfg.snapshot_every == 0:
            snap = _snapshot(t, image.data, psi.data, value)
            snap["metrics"] = score(image.data, psi.data)
            snapshots.append(snap)
            last_snapshot = snap
            log.info("iter %d loss %.5f %s", t, value, snap["metrics"])
        loss.backward()
        try:
            adam_step(params, state, ecfg.lr, ecfg.beta1, ecfg.beta2, ecfg.eps, names)
        except NumericalAbort as exc:
            raise NumericalAbort(str(exc), t, last_snapshot) from None
        if callback is not None:
            callback(t, value, parts, prob.generator)

    with dc.no_grad():
        image, psi, rendered = prob.forward(jitter=False)
    image_np = image.data.astype(np.float64)
    psi_np = psi.data.astype(np.float64)
    metrics = score(image_np, psi_np)
    if best is not None and gt is not None:
        best["metrics"] = score(best["image"], best["psi_map"])
    psi_scalar = prob.current_scalar()
    if psi_scalar is not None:
        metrics = dict(metrics, psi_scalar=psi_scalar)
    return ReconstructionResult(
        image=image_np,
        psi_map=psi_np,
        depth_map_m=np.asarray(psi_to_depth(np.clip(psi_np, cfg.psi_min, cfg.psi_max), cfg)),
        rendered=CodedImage(rendered.data.astype(np.float64),
                            {"renderer": "differentiable", "bank_digest": bank.digest,
                             "noise_sigma": 0.0, "seed": ecfg.seed}),
        loss_history={k: np.asarray(v) for k, v in history.items()},
        metrics=metrics,
        snapshots=snapshots,
        best=best,
        psi_scalar=psi_scalar,
        wall_time_s=time.perf_counter() - start,
        generator=prob.generator,
    )


def solve(y: CodedImage, bank: PsfBank, gcfg: GeneratorConfig, ecfg: EngineConfig,
          gt: Scene | None = None, metric_mask=None, callback=None) -> ReconstructionResult:
    """Jointly recover the all-in-focus image and psi map from capture ``y``.

    ``callback(t, loss, parts, generator)`` runs after each update.
    """
    if ecfg.mode != "full":
        raise EngineConfigError("solve() needs mode='full'; use solve_deblur() for the scalar-psi mode")
    return _run(y, bank, gcfg, ecfg, gt, metric_mask, callback)


def solve_deblur(y: CodedImage, bank: PsfBank, gcfg: GeneratorConfig, ecfg: EngineConfig,
                 gt: Scene | None = None, metric_mask=None, callback=None) -> ReconstructionResult:
    """Recover a sharp image assuming one psi for the whole frame.

    psi is a single sigmoid-bounded scalar broadcast over the image; the
    generator's own psi head is ignored.
    """
    if ecfg.mode != "deblur":
        raise EngineConfigError("solve_deblur() needs mode='deblur'")
    return _run(y, bank, gcfg, ecfg, gt, metric_mask, callback)
