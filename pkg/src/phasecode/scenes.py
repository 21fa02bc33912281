"""Synthetic fronto-parallel layered scenes with ground-truth psi maps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .camera import Scene
from .optics import OpticsConfig, depth_to_psi

TEXTURES = ("checker", "noise", "image")
SUITE_SEEDS = (1, 2, 3, 4, 5)
SUITE_SIZE = (128, 256)  # H, W


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene.

    Layer psi values come from ``psi_values`` if given, otherwise from
    ``depth_range`` (meters, sampled uniformly in inverse depth), otherwise
    from ``psi_range``. The first layer is the background; later layers are
    nearer (larger psi) and drawn on top.
    """

    height: int = 128
    width: int = 256
    layers: int = 2
    psi_range: tuple[float, float] = (-3.5, 9.5)
    depth_range: tuple[float, float] | None = None
    psi_values: tuple[float, ...] | None = None
    texture: str = "noise"
    image_path: str | None = None
    min_separation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.psi_values is not None:
            object.__setattr__(self, "psi_values", tuple(float(v) for v in self.psi_values))
        object.__setattr__(self, "psi_range", tuple(float(v) for v in self.psi_range))
        if self.depth_range is not None:
            object.__setattr__(self, "depth_range", tuple(float(v) for v in self.depth_range))
        self.validate()

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise SceneSpecError(f"resolution must be at least 16x16, got {self.height}x{self.width}")
        if self.layers < 1:
            raise SceneSpecError("layers must be >= 1")
        if self.texture not in TEXTURES:
            raise SceneSpecError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.texture == "image" and not self.image_path:
            raise SceneSpecError("texture 'image' needs image_path")
        if self.psi_values is not None and len(self.psi_values) != self.layers:
            raise SceneSpecError(f"psi_values has {len(self.psi_values)} entries for {self.layers} layers")
        if self.depth_range is not None:
            lo, hi = self.depth_range
            if not (lo > 0 and hi > 0):
                raise SceneSpecError(f"depth_range must be positive, got {self.depth_range}")
            if lo > hi:
                raise SceneSpecError("depth_range must be (near, far) with near <= far")
        if self.psi_range[0] > self.psi_range[1]:
            raise SceneSpecError("psi_range must be ascending")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneSpecError(f"unknown scene fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("psi_range", "depth_range", "psi_values"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# -- textures --------------------------------------------------------------------------------
def _smooth_noise(rng, h: int, w: int, octaves: int = 5, base: int = 4) -> np.ndarray:
    """Perlin-like value noise: bilinearly upsampled random grids summed over octaves."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base * 2 ** o
        gh, gw = max(2, cells * h // max(h, w)), max(2, cells * w // max(h, w))
        grid = rng.random((gh + 1, gw + 1))
        out += amp * ndimage.zoom(grid, ((h + 1) / (gh + 1), (w + 1) / (gw + 1)), order=1)[:h, :w]
        total += amp
        amp *= 0.6
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo + 1e-12)


def _palette(rng, n: int) -> np.ndarray:
    return 0.1 + 0.8 * rng.random((n, 3))


def noise_texture(rng, h: int, w: int) -> np.ndarray:
    """Color texture from two value-noise fields mapped between random colors."""
    a, b, c = _palette(rng, 3)
    t1 = _smooth_noise(rng, h, w)[None]
    t2 = _smooth_noise(rng, h, w, base=8)[None]
    img = a[:, None, None] * (1 - t1) + b[:, None, None] * t1
    img = img * (1 - 0.5 * t2) + c[:, None, None] * 0.5 * t2
    return np.clip(img, 0.0, 1.0)


def checker_texture(rng, h: int, w: int) -> np.ndarray:
    a, b = _palette(rng, 2)
    period = int(rng.integers(4, 17))
    phase = rng.integers(0, period, size=2)
    yy, xx = np.mgrid[:h, :w]
    mask = (((yy + phase[0]) // period + (xx + phase[1]) // period) % 2).astype(float)[None]
    return a[:, None, None] * (1 - mask) + b[:, None, None] * mask


def image_texture(rng, h: int, w: int, source: np.ndarray) -> np.ndarray:
    """Random crop of an imported 3 x H x W image, resized up if it is too small."""
    src = np.asarray(source, dtype=np.float64)
    sh, sw = src.shape[1:]
    if sh < h or sw < w:
        scale = max(h / sh, w / sw)
        src = ndimage.zoom(src, (1, scale, scale), order=1)
        src = np.clip(src, 0.0, 1.0)
        sh, sw = src.shape[1:]
    y0 = int(rng.integers(0, sh - h + 1))
    x0 = int(rng.integers(0, sw - w + 1))
    return src[:, y0:y0 + h, x0:x0 + w].copy()


# -- layout ------------------------------------------------------------------------------------
def _layer_mask(rng, h: int, w: int) -> np.ndarray:
    """Random rectangle or ellipse covering roughly 10-35% of the frame."""
    rh = int(rng.uniform(0.35, 0.65) * h)
    rw = int(rng.uniform(0.2, 0.45) * w)
    cy = int(rng.integers(rh // 2, h - rh // 2 + 1))
    cx = int(rng.integers(rw // 2, w - rw // 2 + 1))
    yy, xx = np.mgrid[:h, :w]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= rh // 2) & (np.abs(xx - cx) <= rw // 2)
    return ((yy - cy) / (rh / 2)) ** 2 + ((xx - cx) / (rw / 2)) ** 2 <= 1.0


def _layer_psi(spec: SceneSpec, rng, cfg: OpticsConfig) -> np.ndarray:
    if spec.psi_values is not None:
        return np.asarray(spec.psi_values)
    if spec.depth_range is not None:
        near, far = spec.depth_range
        inv = rng.uniform(1.0 / far, 1.0 / near, size=spec.layers)
        return np.sort(depth_to_psi(1.0 / inv, cfg))
    lo, hi = spec.psi_range
    if spec.layers == 1:
        return np.array([rng.uniform(lo, hi)])
    # rejection-sample well-separated layer values, background first (smallest psi)
    for _ in range(1000):
        vals = np.sort(rng.uniform(lo, hi, size=spec.layers))
        if np.min(np.diff(vals)) >= spec.min_separation:
            return vals
    raise SceneSpecError(f"cannot place {spec.layers} layers {spec.min_separation} apart in {spec.psi_range}")


def make_synthetic(spec: SceneSpec, cfg: OpticsConfig | None = None, source_image=None) -> Scene:
    """Build a layered scene; identical spec and config give a bit-identical scene."""
    cfg = cfg or OpticsConfig()
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    h, w = spec.height, spec.width
    psi_layers = _layer_psi(spec, rng, cfg)
    if spec.texture == "image" and source_image is None:
        from .io import read_png16

        source_image = read_png16(spec.image_path)

    image = np.zeros((3, h, w))
    psi_map = np.zeros((h, w))
    for i, psi in enumerate(psi_layers):
        mask = np.ones((h, w), bool) if i == 0 else _layer_mask(rng, h, w)
        if spec.texture == "checker":
            tex = checker_texture(rng, h, w)
        elif spec.texture == "image":
            tex = image_texture(rng, h, w, source_image)
        else:
            tex = noise_texture(rng, h, w)
        image[:, mask] = tex[:, mask]
        psi_map[mask] = psi
    meta = {"spec": spec.to_dict(), "layer_psi": [float(v) for v in psi_layers],
            "optics_digest": cfg.digest}
    return Scene(image=image, psi_map=psi_map, meta=meta)


def suite_specs(height: int = SUITE_SIZE[0], width: int = SUITE_SIZE[1]) -> list[SceneSpec]:
    """Default 5-scene suite: seeds 1-5 with 2-6 layers."""
    return [SceneSpec(height=height, width=width, layers=i + 2, seed=s) for i, s in enumerate(SUITE_SEEDS)]


def deblur_specs(height: int = SUITE_SIZE[0], width: int = SUITE_SIZE[1], psi: float = -4.0,
                 seeds=(1, 2, 3)) -> list[SceneSpec]:
    """Single-layer scenes at constant psi for the deblurring mode."""
    return [SceneSpec(height=height, width=width, layers=1, psi_values=(psi,), seed=s) for s in seeds]


def scene_digest(scene: Scene) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(scene.image).tobytes())
    h.update(np.ascontiguousarray(scene.psi_map).tobytes())
    h.update(json.dumps(scene.meta, sort_keys=True, default=str).encode())
    return h.hexdigest()
