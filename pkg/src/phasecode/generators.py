"""Implicit generators mapping a fixed input code to (image, psi map).

Three families share one interface:

* ``dip``   encoder-decoder CNN fed with uniform noise (deep image prior),
* ``siren`` sine-activated coordinate MLP,
* ``pip``   the ``dip`` network fed with random Fourier features of the
            pixel coordinates instead of noise.

Every generator has a single trunk with four output channels: three pass
through a sigmoid to form the image and one is mapped by a sigmoid into
``[psi_min, psi_max]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc

KINDS = ("dip", "siren", "pip")


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "dip"
    input_depth: int = 32
    width: int = 128
    levels: int = 5
    skip_width: int = 16
    normalization: bool = True
    leaky_slope: float = 0.1
    padding: str = "reflect"
    siren_layers: int = 5
    siren_width: int = 256
    omega0: float = 30.0
    fourier_features: int = 128
    fourier_scale: float = 6.0
    psi_min: float = -4.0
    psi_max: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise GeneratorError(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        if self.padding not in dc.nn.PAD_MODES:
            raise GeneratorError(f"padding must be one of {dc.nn.PAD_MODES}, got {self.padding!r}")
        if not self.psi_min < self.psi_max:
            raise GeneratorError("psi_min must be below psi_max")
        for name in ("input_depth", "width", "levels", "skip_width", "siren_layers", "siren_width"):
            if getattr(self, name) < 1:
                raise GeneratorError(f"{name} must be >= 1")
        if self.kind == "pip" and self.fourier_features % 2:
            raise GeneratorError("fourier_features must be even (sin/cos pairs)")

    @property
    def code_channels(self) -> int:
        if self.kind == "siren":
            return 2
        if self.kind == "pip":
            return self.fourier_features
        return self.input_depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GeneratorError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- input codes -----------------------------------------------------------------------
def coordinate_grid(h: int, w: int) -> np.ndarray:
    """2 x H x W pixel-center coordinates in [-1, 1] (x then y)."""
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy])


def fourier_features(coords: np.ndarray, n_features: int, scale: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xF0])
    freqs = rng.normal(0.0, scale, size=(n_features // 2, 2))
    proj = 2.0 * math.pi * np.tensordot(freqs, coords, axes=(1, 0))
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=0)


def make_code(cfg: GeneratorConfig, h: int, w: int) -> np.ndarray:
    """Input code for a generator of ``cfg`` producing H x W outputs.

    ``dip`` noise is drawn at the padded working size (multiple of
    ``2**levels``) so it is the same array the network consumes.
    """
    if cfg.kind == "siren":
        return coordinate_grid(h, w)
    hp, wp = working_size(cfg, h, w)
    if cfg.kind == "pip":
        return fourier_features(coordinate_grid(hp, wp), cfg.fourier_features, cfg.fourier_scale, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xC0DE])
    return rng.uniform(0.0, 1.0, size=(cfg.input_depth, hp, wp))


def working_size(cfg: GeneratorConfig, h: int, w: int) -> tuple[int, int]:
    if cfg.kind == "siren":
        return h, w
    m = 2 ** cfg.levels
    return -(-h // m) * m, -(-w // m) * m


# -- parameter containers --------------------------------------------------------------
class Generator:
    """Base class: ordered named parameters plus the output heads."""

    def __init__(self, cfg: GeneratorConfig, h: int, w: int):
        self.cfg = cfg
        self.out_shape = (h, w)
        self.params: dict[str, dc.Tensor] = {}
        self._rng = np.random.default_rng([cfg.seed, 0x1217])

    # parameter registration
    def _uniform(self, name: str, shape, bound: float) -> dc.Tensor:
        t = dc.Tensor(self._rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.params[name] = t
        return t

    def _const(self, name: str, shape, value: float) -> dc.Tensor:
        t = dc.Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> list[dc.Tensor]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Generator":
        for name, p in self.params.items():
            self.params[name] = dc.Tensor(p.data.astype(dtype), requires_grad=True)
        self._rebind()
        return self

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v.data.copy()) for k, v in self.params.items()]

    def load_state(self, blocks) -> None:
        blocks = list(blocks)
        if len(blocks) != len(self.params):
            raise GeneratorError(f"checkpoint has {len(blocks)} blocks, generator has {len(self.params)}")
        for (name, p), (_, arr) in zip(self.params.items(), blocks):
            if arr.shape != p.shape:
                raise GeneratorError(f"block {name}: shape {arr.shape} != {p.shape}")
            self.params[name] = dc.Tensor(np.asarray(arr, dtype=p.dtype), requires_grad=True)
        self._rebind()

    def _rebind(self) -> None:
        """Hook for subclasses that cache parameter references."""

    def trunk(self, code: dc.Tensor) -> dc.Tensor:
        raise NotImplementedError

    def __call__(self, code) -> tuple[dc.Tensor, dc.Tensor]:
        return generate(self, code)


def generate(g: Generator, code) -> tuple[dc.Tensor, dc.Tensor]:
    """Run the trunk and heads: image in [0, 1], psi in [psi_min, psi_max]."""
    code = code if isinstance(code, dc.Tensor) else dc.Tensor(code)
    expected = make_code_shape(g.cfg, *g.out_shape)
    if code.shape != expected:
        raise GeneratorError(f"code shape {code.shape} does not match expected {expected}")
    h, w = g.out_shape
    out = g.trunk(code)
    if out.shape[1:] != (h, w):
        out = out[:, :h, :w]
    image = dc.sigmoid(out[:3])
    span = g.cfg.psi_max - g.cfg.psi_min
    psi = dc.sigmoid(out[3]) * span + g.cfg.psi_min
    return image, psi


def make_code_shape(cfg: GeneratorConfig, h: int, w: int) -> tuple[int, int, int]:
    hp, wp = working_size(cfg, h, w)
    return (cfg.code_channels, hp, wp)


def _kaiming_bound(fan_in: int, slope: float) -> float:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return gain * math.sqrt(3.0 / fan_in)


class UNetGenerator(Generator):
    """Encoder-decoder with strided downsampling, bilinear upsampling and 1x1 skips.

    Encoder level ``i``: conv3x3 stride 2, conv3x3 stride 1 (``width``
    channels). Skip ``i``: conv1x1 to ``skip_width`` channels from the input
    of encoder level ``i``. Decoder level ``i`` (deepest first): bilinear x2,
    concat skip ``i``, conv3x3, conv3x3. Every conv is followed by optional
    channel normalization and LeakyReLU; a final conv1x1 gives 4 channels.
    """

    def __init__(self, cfg: GeneratorConfig, h: int, w: int):
        super().__init__(cfg, h, w)
        hp, wp = working_size(cfg, h, w)
        if min(hp, wp) < 2 ** (cfg.levels + 1):
            raise GeneratorError(f"{h}x{w} too small for a {cfg.levels}-level encoder")
        c_in = cfg.code_channels
        wd, sk = cfg.width, cfg.skip_width
        self._layers: list[tuple[str, int, int, int]] = []
        for i in range(cfg.levels):
            src = c_in if i == 0 else wd
            self._conv(f"skip{i}", src, sk, 1)
            self._conv(f"enc{i}a", src, wd, 3)
            self._conv(f"enc{i}b", wd, wd, 3)
        for i in reversed(range(cfg.levels)):
            self._conv(f"dec{i}a", wd + sk, wd, 3)
            self._conv(f"dec{i}b", wd, wd, 3)
        self._conv("out", wd, 4, 1, norm=False)

    def _conv(self, name: str, c_in: int, c_out: int, k: int, norm: bool = True) -> None:
        fan_in = c_in * k * k
        self._uniform(f"{name}.w", (c_out, c_in, k, k), _kaiming_bound(fan_in, self.cfg.leaky_slope))
        self._uniform(f"{name}.b", (c_out,), 1.0 / math.sqrt(fan_in))
        if norm and self.cfg.normalization:
            self._const(f"{name}.scale", (c_out,), 1.0)
            self._const(f"{name}.shift", (c_out,), 0.0)

    def _block(self, name: str, x: dc.Tensor, stride: int = 1) -> dc.Tensor:
        p = self.params
        y = dc.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=self.cfg.padding)
        if self.cfg.normalization:
            y = dc.normalize_channels(y, p[f"{name}.scale"], p[f"{name}.shift"])
        return dc.leaky_relu(y, self.cfg.leaky_slope)

    def trunk(self, code: dc.Tensor) -> dc.Tensor:
        skips = []
        x = code
        for i in range(self.cfg.levels):
            skips.append(self._block(f"skip{i}", x))
            x = self._block(f"enc{i}a", x, stride=2)
            x = self._block(f"enc{i}b", x)
        for i in reversed(range(self.cfg.levels)):
            x = dc.upsample2x(x)
            x = dc.concat([x, skips[i]], axis=0)
            x = self._block(f"dec{i}a", x)
            x = self._block(f"dec{i}b", x)
        p = self.params
        return dc.conv2d(x, p["out.w"], p["out.b"], padding=self.cfg.padding)


class SirenGenerator(Generator):
    """Coordinate MLP with sine activations, ``siren_layers`` hidden layers."""

    def __init__(self, cfg: GeneratorConfig, h: int, w: int):
        super().__init__(cfg, h, w)
        n, wd, om = cfg.siren_layers, cfg.siren_width, cfg.omega0
        fan = 2
        for i in range(n):
            bound = 1.0 / fan if i == 0 else math.sqrt(6.0 / fan) / om
            self._uniform(f"l{i}.w", (fan, wd), bound)
            self._uniform(f"l{i}.b", (1, wd), 1.0 / math.sqrt(fan))
            fan = wd
        self._uniform("out.w", (wd, 4), math.sqrt(6.0 / wd) / om)
        self._uniform("out.b", (1, 4), 1.0 / math.sqrt(wd))

    def trunk(self, code: dc.Tensor) -> dc.Tensor:
        h, w = code.shape[1:]
        x = dc.transpose(code.reshape(2, h * w))
        p = self.params
        for i in range(self.cfg.siren_layers):
            x = dc.sine(x @ p[f"l{i}.w"] + p[f"l{i}.b"], self.cfg.omega0)
        out = x @ p["out.w"] + p["out.b"]
        return dc.transpose(out).reshape(4, h, w)


def build_generator(cfg: GeneratorConfig, h: int, w: int) -> Generator:
    """Fresh generator for H x W outputs, initialized from ``cfg.seed``."""
    if cfg.kind in ("dip", "pip"):
        return UNetGenerator(cfg, h, w)
    if cfg.kind == "siren":
        return SirenGenerator(cfg, h, w)
    raise GeneratorError(f"unknown generator kind {cfg.kind!r}")
