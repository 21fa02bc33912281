"""Layered defocus camera model.

The scene is blurred once per psi plane of a :class:`~phasecode.optics.PsfBank`
and each pixel is then linearly interpolated between the two planes that
bracket its psi value. The same arithmetic serves the differentiable model
used inside the solver and the reference acquisition simulator (which runs it
on a denser plane grid, adds noise and quantizes to [0, 1]).

Occlusion boundaries are not modeled: background blur leaks across depth
edges, as in any pre-blur-then-interpolate layered model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .optics import OpticsConfig, PsfBank, build_psf_bank


class CameraError(ValueError):
    pass


@dataclass
class Scene:
    """All-in-focus radiance (3 x H x W, in [0, 1]) and unclipped psi per pixel."""

    image: np.ndarray
    psi_map: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.psi_map = np.asarray(self.psi_map, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise CameraError(f"scene image must be 3 x H x W, got {self.image.shape}")
        if self.psi_map.shape != self.image.shape[1:]:
            raise CameraError(f"psi map {self.psi_map.shape} does not match image {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise CameraError("scene image values must lie in [0, 1]")
        if not np.isfinite(self.psi_map).all():
            raise CameraError("psi map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.psi_map.shape


@dataclass
class CodedImage:
    data: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.data.shape


def clip_psi(psi_map, cfg: OpticsConfig):
    """Clamp psi to the system's effective range (zero gradient outside it)."""
    if isinstance(psi_map, dc.Tensor):
        return dc.clamp(psi_map, cfg.psi_min, cfg.psi_max)
    return np.clip(psi_map, cfg.psi_min, cfg.psi_max)


def blur_planes(image: dc.Tensor, bank: PsfBank) -> dc.Tensor:
    """``K x 3 x H x W`` stack: the image convolved with every plane's kernels."""
    if image.ndim != 3 or image.shape[0] != bank.kernels.shape[1]:
        raise CameraError(f"image {image.shape} does not match a {bank.kernels.shape[1]}-channel bank")
    return dc.convolve_frozen(image, bank.frozen, padding="reflect")


def render_differentiable(image: dc.Tensor, psi_map: dc.Tensor, bank: PsfBank) -> dc.Tensor:
    """Coded image ``h(image, psi)``, differentiable in both inputs."""
    if bank.n_planes < 2:
        raise CameraError("bank needs at least two planes")
    if psi_map.shape != image.shape[1:]:
        raise CameraError(f"psi map {psi_map.shape} does not match image {image.shape}")
    planes = blur_planes(image, bank)
    psi = clip_psi(psi_map, bank.config)
    return dc.interpolate_planes(planes, psi, bank.psi_grid)


def render_acquisition(
    scene: Scene,
    cfg: OpticsConfig,
    planes: int | PsfBank = 57,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> CodedImage:
    """Reference capture: dense-grid layered blur, Gaussian read noise, clamp to [0, 1]."""
    bank = planes if isinstance(planes, PsfBank) else build_psf_bank(cfg, planes)
    if noise_sigma < 0:
        raise CameraError(f"noise sigma must be >= 0, got {noise_sigma}")
    with dc.no_grad():
        out = render_differentiable(dc.Tensor(scene.image), dc.Tensor(scene.psi_map), bank).data
    if noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    return CodedImage(
        data=out,
        provenance={
            "renderer": "acquisition",
            "planes": int(bank.n_planes),
            "bank_digest": bank.digest,
            "optics_digest": cfg.digest,
            "noise_sigma": float(noise_sigma),
            "seed": int(seed),
        },
    )
