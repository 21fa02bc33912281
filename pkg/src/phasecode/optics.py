"""Two-ring phase-coded aperture, PSF synthesis and the defocus/depth relation.

Defocus is expressed by the dimensionless out-of-focus parameter

    psi = (pi R^2 / lambda) * (1/z_obj - 1/z_focus)

which is zero for an object on the focal plane. The pupil of channel ``c`` is

    P(rho) = circ(rho) * exp(i * mask_phase_c(rho)) * exp(i * psi_c * rho^2)

and its incoherent PSF is ``|DFT(P)|^2`` on the sensor grid.

Sampling: with ``n`` samples across the pupil diameter ``2R`` and an FFT of
size ``M``, the PSF sample pitch is ``lambda f n / (2 R M)``. Writing
``Q = lambda f / (2 R p)`` for sensor pitch ``p``, choosing ``M = n Q B``
makes that pitch exactly ``p / B``; the PSF is then integrated over
``B x B`` blocks to get sensor pixels. ``B`` is the smallest odd integer
with ``Q B >= 2`` (Nyquist for the intensity), so well-sampled systems
(``Q >= 2``) use point samples and coarse sensors get pixel integration.
``M`` is rounded up to an integer and the pupil radius in samples adjusted
to keep the relation exact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .diffcore import FrozenKernels

log = logging.getLogger(__name__)

Ring = tuple[float, float, float]

DEFAULT_RINGS: tuple[Ring, ...] = ((0.643, 0.750, 9.17), (0.750, 1.00, 2.21))


class OpticsError(ValueError):
    """Invalid optical configuration or out-of-model request."""


@dataclass(frozen=True)
class OpticsConfig:
    """Imaging-system description; lengths in meters, phases in radians."""

    aperture_radius: float = 4.0e-3
    focal_length: float = 16.0e-3
    focus_distance: float = 1.1
    wavelengths: tuple[float, float, float] = (610e-9, 530e-9, 470e-9)
    design_wavelength: float = 530e-9
    rings: tuple[Ring, ...] = DEFAULT_RINGS
    pupil_samples: int = 512
    psf_size: int = 71
    pixel_pitch: float = 1.5e-6
    psi_min: float = -4.0
    psi_max: float = 10.0
    reference_channel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "wavelengths", tuple(float(v) for v in self.wavelengths))
        object.__setattr__(self, "rings", tuple(tuple(float(v) for v in r) for r in self.rings))
        self.validate()

    def validate(self) -> None:
        for name in ("aperture_radius", "focal_length", "focus_distance", "design_wavelength", "pixel_pitch"):
            if not getattr(self, name) > 0:
                raise OpticsError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.wavelengths) != 3 or min(self.wavelengths) <= 0:
            raise OpticsError(f"wavelengths must be three positive values, got {self.wavelengths}")
        if not 0 <= self.reference_channel < 3:
            raise OpticsError(f"reference_channel must be 0, 1 or 2, got {self.reference_channel}")
        prev_outer = 0.0
        for ring in self.rings:
            if len(ring) != 3:
                raise OpticsError(f"ring must be (r_inner, r_outer, phase), got {ring}")
            r0, r1, _ = ring
            if not (0.0 <= r0 < r1 <= 1.0):
                raise OpticsError(f"ring radii must satisfy 0 <= inner < outer <= 1, got {ring}")
            if r0 < prev_outer:
                raise OpticsError(f"rings must be disjoint and ordered, got {self.rings}")
            prev_outer = r1
        if not self.psi_min < 0 < self.psi_max:
            raise OpticsError(f"need psi_min < 0 < psi_max, got [{self.psi_min}, {self.psi_max}]")
        if self.psf_size < 1 or self.psf_size % 2 == 0:
            raise OpticsError(f"psf_size must be a positive odd integer, got {self.psf_size}")
        if self.pupil_samples < 4 * self.psf_size:
            raise OpticsError(
                f"pupil_samples ({self.pupil_samples}) must be >= 4 * psf_size ({4 * self.psf_size})")

    @property
    def reference_wavelength(self) -> float:
        return self.wavelengths[self.reference_channel]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wavelengths"] = list(self.wavelengths)
        d["rings"] = [list(r) for r in self.rings]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OpticsConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise OpticsError(f"unknown optics fields: {sorted(unknown)}")
        d = dict(d)
        if "wavelengths" in d:
            d["wavelengths"] = tuple(d["wavelengths"])
        if "rings" in d:
            d["rings"] = tuple(tuple(r) for r in d["rings"])
        return cls(**d)

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- psi <-> depth ---------------------------------------------------------------------
def _psi_scale(cfg: OpticsConfig) -> float:
    return math.pi * cfg.aperture_radius ** 2 / cfg.reference_wavelength


def depth_to_psi(z, cfg: OpticsConfig):
    """Defocus of an object at distance ``z`` (reference wavelength); not clipped."""
    z = np.asarray(z, dtype=np.float64)
    if (z <= 0).any():
        raise OpticsError("object distance must be positive")
    psi = _psi_scale(cfg) * (1.0 / z - 1.0 / cfg.focus_distance)
    return psi if psi.ndim else float(psi)


def psi_to_depth(psi, cfg: OpticsConfig):
    psi = np.asarray(psi, dtype=np.float64)
    inv = psi / _psi_scale(cfg) + 1.0 / cfg.focus_distance
    if (inv <= 0).any():
        raise OpticsError(f"psi {psi.min():.4g} places the object behind the camera")
    z = 1.0 / inv
    return z if z.ndim else float(z)


def far_field_psi(cfg: OpticsConfig) -> float:
    """Limit of ``depth_to_psi`` as the object recedes to infinity."""
    return -_psi_scale(cfg) / cfg.focus_distance


# -- pupil sampling ----------------------------------------------------------------------
@dataclass(frozen=True)
class Sampling:
    """FFT grid that puts PSF samples at ``pixel_pitch / binning``."""

    q: float            # lambda f / (2 R p): sensor pixels per lambda*N
    binning: int        # fine samples per sensor pixel along each axis
    fft_size: int       # M
    pupil_diameter: float  # samples across the pupil after rounding M

    @property
    def fine_pitch_ratio(self) -> float:
        return 1.0 / self.binning


def sampling_for(cfg: OpticsConfig, channel: int) -> Sampling:
    lam = cfg.wavelengths[channel]
    q = lam * cfg.focal_length / (2.0 * cfg.aperture_radius * cfg.pixel_pitch)
    b = max(1, math.ceil(2.0 / q - 1e-12))
    if b % 2 == 0:
        b += 1
    m = math.ceil(cfg.pupil_samples * q * b - 1e-9)
    if m % 2:
        m += 1
    diameter = m / (q * b)
    if m < cfg.psf_size * b + 2:
        raise OpticsError(
            f"pupil_samples={cfg.pupil_samples} gives a {m // b}-pixel PSF field; "
            f"psf_size={cfg.psf_size} would alias (increase pupil_samples)")
    return Sampling(q=q, binning=b, fft_size=m, pupil_diameter=diameter)


def _pupil_radius_grid(m: int, diameter: float) -> np.ndarray:
    u = (np.arange(m) - m // 2) / (diameter / 2.0)
    return np.hypot(u[None, :], u[:, None])


def _mask_phase_at(cfg: OpticsConfig, rho: np.ndarray, channel: int) -> np.ndarray:
    scale = cfg.design_wavelength / cfg.wavelengths[channel]
    phase = np.zeros_like(rho)
    for r0, r1, phi in cfg.rings:
        inside = (rho >= r0) & (rho < r1) if r1 < 1.0 else (rho >= r0) & (rho <= r1)
        phase[inside] = phi * scale
    phase[rho > 1.0] = 0.0
    return phase


def mask_phase(cfg: OpticsConfig, channel: int, samples: int | None = None) -> np.ndarray:
    """Phase map [rad] of the mask for ``channel`` on a square pupil grid.

    The grid has ``samples`` points across the unit pupil (default
    ``cfg.pupil_samples``); zero outside the aperture and outside rings.
    """
    if channel not in (0, 1, 2):
        raise OpticsError(f"channel must be 0, 1 or 2, got {channel}")
    n = samples or cfg.pupil_samples
    rho = _pupil_radius_grid(n, float(n))
    return _mask_phase_at(cfg, rho, channel)


def channel_psi(cfg: OpticsConfig, psi_ref: float, channel: int) -> float:
    return psi_ref * cfg.reference_wavelength / cfg.wavelengths[channel]


def psf_with_energy(cfg: OpticsConfig, psi_ref: float, channel: int) -> tuple[np.ndarray, float]:
    """Normalized ``S x S`` PSF and the fraction of energy inside the window."""
    if channel not in (0, 1, 2):
        raise OpticsError(f"channel must be 0, 1 or 2, got {channel}")
    smp = sampling_for(cfg, channel)
    m, b, s = smp.fft_size, smp.binning, cfg.psf_size
    rho = _pupil_radius_grid(m, smp.pupil_diameter)
    aperture = rho <= 1.0
    phase = _mask_phase_at(cfg, rho, channel) + channel_psi(cfg, psi_ref, channel) * rho ** 2
    pupil = np.where(aperture, np.exp(1j * phase), 0.0)
    field_ = sfft.fftshift(sfft.fft2(sfft.ifftshift(pupil)))
    intensity = field_.real ** 2 + field_.imag ** 2
    total = intensity.sum()

    c = m // 2
    half = (s * b) // 2
    window = intensity[c - half:c + half + 1, c - half:c + half + 1]
    kernel = window.reshape(s, b, s, b).sum(axis=(1, 3))
    retained = float(kernel.sum() / total)
    return kernel / kernel.sum(), retained


def psf(cfg: OpticsConfig, psi_ref: float, channel: int) -> np.ndarray:
    """Normalized ``S x S`` PSF for reference-channel defocus ``psi_ref``."""
    return psf_with_energy(cfg, psi_ref, channel)[0]


def perturb_mask(cfg: OpticsConfig, factor: float) -> OpticsConfig:
    """Scale every ring phase by ``1 + factor`` (optical-mismatch studies)."""
    if factor < 0:
        raise OpticsError(f"perturbation factor must be >= 0, got {factor}")
    if factor == 0:
        return cfg
    rings = tuple((r0, r1, phi * (1.0 + factor)) for r0, r1, phi in cfg.rings)
    return replace(cfg, rings=rings)


# -- bank ------------------------------------------------------------------------------------
@dataclass
class PsfBank:
    """Kernels on a psi grid, frozen for the lifetime of a solve."""

    psi_grid: np.ndarray            # (K,) ascending, reference channel
    kernels: np.ndarray             # (K, 3, S, S)
    config: OpticsConfig
    retained_energy: np.ndarray     # (K, 3) pre-normalization energy inside the window
    perturbation: float = 0.0
    _frozen: FrozenKernels | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.psi_grid = np.asarray(self.psi_grid, dtype=np.float64)
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        if self.psi_grid.ndim != 1 or len(self.psi_grid) < 2:
            raise OpticsError("bank needs at least two planes")
        if np.any(np.diff(self.psi_grid) <= 0):
            raise OpticsError("psi grid must be strictly increasing")
        if self.kernels.shape[:2] != (len(self.psi_grid), 3):
            raise OpticsError(f"kernel array {self.kernels.shape} does not match {len(self.psi_grid)} planes x 3")

    @property
    def n_planes(self) -> int:
        return len(self.psi_grid)

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[-1]

    @property
    def frozen(self) -> FrozenKernels:
        if self._frozen is None:
            self._frozen = FrozenKernels(self.kernels)
        return self._frozen

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.config.digest.encode())
        h.update(np.ascontiguousarray(self.psi_grid, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.kernels, dtype="<f4").tobytes())
        h.update(repr(float(self.perturbation)).encode())
        return h.hexdigest()


def uniform_grid(cfg: OpticsConfig, n_planes: int) -> np.ndarray:
    if n_planes < 2:
        raise OpticsError(f"need at least 2 planes, got {n_planes}")
    return np.linspace(cfg.psi_min, cfg.psi_max, n_planes)


_BANK_CACHE: dict[tuple, PsfBank] = {}


def build_psf_bank(
    cfg: OpticsConfig,
    planes: int | np.ndarray = 15,
    perturbation: float = 0.0,
    cache: bool = True,
) -> PsfBank:
    """Compute ``K x 3`` kernels on a uniform grid (or an explicit ``psi`` grid).

    ``perturbation`` is recorded in the bank; the kernels themselves come
    from ``cfg`` as given (use :func:`perturb_mask` to build a mismatched
    config).
    """
    grid = uniform_grid(cfg, planes) if np.ndim(planes) == 0 else np.asarray(planes, dtype=np.float64)
    if len(grid) < 2:
        raise OpticsError(f"need at least 2 planes, got {len(grid)}")
    key = (cfg.digest, grid.tobytes(), float(perturbation))
    if cache and key in _BANK_CACHE:
        return _BANK_CACHE[key]
    s = cfg.psf_size
    kernels = np.empty((len(grid), 3, s, s))
    energy = np.empty((len(grid), 3))
    for k, psi_ref in enumerate(grid):
        for c in range(3):
            kernels[k, c], energy[k, c] = psf_with_energy(cfg, float(psi_ref), c)
    log.debug("built %d-plane bank, min retained energy %.4f", len(grid), energy.min())
    bank = PsfBank(psi_grid=grid, kernels=kernels, config=cfg, retained_energy=energy,
                   perturbation=float(perturbation))
    if cache:
        _BANK_CACHE[key] = bank
    return bank


def second_moment(kernel: np.ndarray) -> float:
    """Spread of a kernel about its centroid, in pixels^2."""
    s = kernel.shape[-1]
    y, x = np.mgrid[:s, :s]
    w = kernel / kernel.sum()
    cy, cx = (w * y).sum(), (w * x).sum()
    return float((w * ((y - cy) ** 2 + (x - cx) ** 2)).sum())


def _refine_argmin(values: np.ndarray, grid: np.ndarray) -> float:
    """Grid argmin refined by the vertex of a parabola through its neighbors."""
    i = int(np.argmin(values))
    if i == 0 or i == len(values) - 1:
        return float(grid[i])
    y0, y1, y2 = values[i - 1], values[i], values[i + 1]
    denom = y0 - 2.0 * y1 + y2
    if denom <= 0:
        return float(grid[i])
    step = grid[i + 1] - grid[i]
    return float(grid[i] + 0.5 * step * (y0 - y2) / denom)


def sharpest_focus(cfg: OpticsConfig, psi_values: np.ndarray, refine: bool = False) -> np.ndarray:
    """psi minimizing the kernel second moment, per channel."""
    psi_values = np.asarray(psi_values, dtype=np.float64)
    best = np.empty(3)
    for c in range(3):
        moments = np.array([second_moment(psf(cfg, float(p), c)) for p in psi_values])
        best[c] = _refine_argmin(moments, psi_values) if refine else psi_values[int(np.argmin(moments))]
    return best


def bank_sharpest_focus(bank: PsfBank, refine: bool = True) -> np.ndarray:
    """Per-channel sharpest-focus psi read off an existing bank's kernels."""
    moments = np.array([[second_moment(bank.kernels[k, c]) for c in range(3)] for k in range(bank.n_planes)])
    if refine:
        return np.array([_refine_argmin(moments[:, c], bank.psi_grid) for c in range(3)])
    return bank.psi_grid[np.argmin(moments, axis=0)]
