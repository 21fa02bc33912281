"""File formats: 16-bit PNG images, raw f32 maps, PSF banks, checkpoints, configs, manifests."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import toml

from . import __version__
from .camera import CodedImage, Scene
from .engine import EngineConfig
from .generators import Generator, GeneratorConfig
from .optics import OpticsConfig, PsfBank, build_psf_bank, uniform_grid

MAP_MAGIC = b"PCMAPF32"
BANK_MAGIC = b"PCPSFBNK"
BANK_VERSION = 1
CKPT_MAGIC = b"PCCKPT\x00\x00"
CKPT_VERSION = 1


class FormatError(IOError):
    """Unreadable or malformed file."""


# -- images ----------------------------------------------------------------------------------
def to_uint16(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_png16(path, image: np.ndarray) -> None:
    """Write a 3 x H x W (RGB) or H x W image in [0, 1] as a 16-bit PNG."""
    q = to_uint16(image)
    if q.ndim == 3:
        if q.shape[0] != 3:
            raise ValueError(f"expected 3 x H x W, got {q.shape}")
        q = np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1])  # RGB -> BGR for OpenCV
    elif q.ndim != 2:
        raise ValueError(f"expected 2-D or 3-D image, got {q.shape}")
    if not cv2.imwrite(str(path), q):
        raise FormatError(f"cannot write {path}")


def read_png16(path) -> np.ndarray:
    """Read a PNG as floats in [0, 1]: 3 x H x W for color, H x W for grayscale."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot read image {path}")
    peak = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / peak
    if img.ndim == 3:
        img = img[:, :, 2::-1].transpose(2, 0, 1)  # drop alpha, BGR -> RGB
    return np.ascontiguousarray(img)


def write_map_f32(path, arr: np.ndarray) -> None:
    """Raw little-endian f32 map behind a 16-byte header (magic, H, W)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"map must be 2-D, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(MAP_MAGIC + struct.pack("<II", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_map_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:8] != MAP_MAGIC:
            raise FormatError(f"{path}: not a raw f32 map")
        h, w = struct.unpack("<II", head[8:])
        body = f.read()
    if len(body) != 4 * h * w:
        raise FormatError(f"{path}: expected {4 * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).copy()


# -- PSF banks ------------------------------------------------------------------------------
def save_bank(path, bank: PsfBank) -> None:
    """Binary container plus a ``.toml`` sidecar holding the optics config."""
    path = Path(path)
    k, _, s, _ = bank.kernels.shape
    with open(path, "wb") as f:
        f.write(BANK_MAGIC + struct.pack("<III", BANK_VERSION, k, s))
        f.write(np.ascontiguousarray(bank.psi_grid, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(bank.kernels, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bank.retained_energy, dtype="<f8").tobytes())
        f.write(bytes.fromhex(bank.config.digest))
    sidecar = {"optics": bank.config.to_dict(),
               "bank": {"planes": int(k), "psf_size": int(s), "perturbation": float(bank.perturbation),
                        "digest": bank.digest}}
    path.with_suffix(".toml").write_text(toml.dumps(sidecar))


def load_bank(path) -> PsfBank:
    path = Path(path)
    try:
        data = path.read_bytes()
        side = toml.loads(path.with_suffix(".toml").read_text())
    except (OSError, toml.TomlDecodeError) as exc:
        raise FormatError(f"cannot read bank {path}: {exc}") from exc
    if data[:8] != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, k, s = struct.unpack("<III", data[8:20])
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}")
    off = 20
    grid = np.frombuffer(data, "<f8", k, off)
    off += 8 * k
    kernels = np.frombuffer(data, "<f4", k * 3 * s * s, off).reshape(k, 3, s, s)
    off += 4 * kernels.size
    energy = np.frombuffer(data, "<f8", k * 3, off).reshape(k, 3)
    off += 8 * energy.size
    digest = data[off:off + 32]
    if len(digest) != 32 or off + 32 != len(data):
        raise FormatError(f"{path}: truncated or oversized bank file")
    cfg = OpticsConfig.from_dict(side["optics"])
    if digest.hex() != cfg.digest:
        raise FormatError(f"{path}: config digest does not match the sidecar")
    return PsfBank(psi_grid=grid.copy(), kernels=kernels.astype(np.float64), config=cfg,
                   retained_energy=energy.copy(), perturbation=side["bank"]["perturbation"])


def cache_dir() -> Path:
    root = os.environ.get("PHASECODE_CACHE") or Path.home() / ".cache" / "phasecode"
    return Path(root)


def cached_bank(cfg: OpticsConfig, planes: int = 15, perturbation: float = 0.0) -> PsfBank:
    """Build a uniform-grid bank once and reuse it from the on-disk cache.

    The cached file is trusted only if it reproduces the requested grid and
    config; kernels come back at f32 precision.
    """
    key = hashlib.sha256(f"{cfg.digest}:{planes}:{perturbation!r}".encode()).hexdigest()[:24]
    path = cache_dir() / f"bank-{key}.bin"
    if path.exists():
        try:
            bank = load_bank(path)
            if bank.config == cfg and np.array_equal(bank.psi_grid, uniform_grid(cfg, planes)):
                return bank
        except (FormatError, KeyError, ValueError):
            pass
    bank = build_psf_bank(cfg, planes, perturbation=perturbation)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    save_bank(tmp, bank)
    os.replace(tmp, path)
    os.replace(tmp.with_suffix(".toml"), path.with_suffix(".toml"))
    return load_bank(path)


# -- checkpoints ----------------------------------------------------------------------------
def save_checkpoint(path, gen: Generator) -> None:
    """Version, kind tag, config digest, then each parameter block as f32."""
    blocks = gen.state()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        f.write(gen.cfg.kind.encode().ljust(8, b"\x00"))
        f.write(bytes.fromhex(gen.cfg.digest))
        f.write(struct.pack("<I", len(blocks)))
        for _, arr in blocks:
            f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, gen: Generator) -> None:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    kind = data[12:20].rstrip(b"\x00").decode()
    if kind != gen.cfg.kind:
        raise FormatError(f"{path}: checkpoint is for a {kind!r} generator, not {gen.cfg.kind!r}")
    if data[20:52].hex() != gen.cfg.digest:
        raise FormatError(f"{path}: generator config digest mismatch")
    (n,) = struct.unpack("<I", data[52:56])
    off, blocks = 56, []
    for _ in range(n):
        (ndim,) = struct.unpack("<I", data[off:off + 4])
        shape = struct.unpack(f"<{ndim}I", data[off + 4:off + 4 + 4 * ndim])
        off += 4 + 4 * ndim
        size = int(np.prod(shape))
        blocks.append((None, np.frombuffer(data, "<f4", size, off).reshape(shape)))
        off += 4 * size
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after {n} blocks")
    gen.load_state(blocks)


# -- scenes and captures ---------------------------------------------------------------------
def save_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png16(d / "image.png", scene.image)
    write_map_f32(d / "psi.f32", scene.psi_map)
    (d / "scene.json").write_text(json.dumps(scene.meta, indent=2, sort_keys=True, default=float))


def load_scene(directory) -> Scene:
    d = Path(directory)
    try:
        meta = json.loads((d / "scene.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scene metadata in {d}: {exc}") from exc
    return Scene(image=read_png16(d / "image.png"), psi_map=read_map_f32(d / "psi.f32"), meta=meta)


def save_coded(directory, y: CodedImage) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png16(d / "coded.png", y.data)
    (d / "provenance.json").write_text(json.dumps(y.provenance, indent=2, sort_keys=True))


def load_coded(path) -> CodedImage:
    """Load a capture from a directory written by :func:`save_coded` or a bare PNG."""
    p = Path(path)
    if p.is_dir():
        prov_path = p / "provenance.json"
        prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
        p = p / "coded.png"
    else:
        prov = {}
    data = read_png16(p)
    if data.ndim != 3:
        raise FormatError(f"{p}: capture must be an RGB image")
    return CodedImage(data=data, provenance=prov)


# -- configs and manifests -------------------------------------------------------------------
@dataclass
class RunConfig:
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)

    def to_dict(self) -> dict:
        return {"optics": self.optics.to_dict(), "generator": self.generator.to_dict(),
                "engine": self.engine.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"optics", "generator", "engine"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        optics = OpticsConfig.from_dict(d.get("optics", {}))
        gen = dict(d.get("generator", {}))
        # the generator's psi head follows the optics range unless set explicitly
        gen.setdefault("psi_min", optics.psi_min)
        gen.setdefault("psi_max", optics.psi_max)
        return cls(optics=optics, generator=GeneratorConfig.from_dict(gen),
                   engine=EngineConfig.from_dict(d.get("engine", {})))

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path=None) -> RunConfig:
    """Read a TOML file with optional [optics], [generator], [engine] sections."""
    if path is None:
        return RunConfig()
    try:
        d = toml.load(str(path))
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    except toml.TomlDecodeError as exc:
        raise ValueError(f"config {path}: {exc}") from exc
    return RunConfig.from_dict(d)


def dump_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(toml.dumps(cfg.to_dict()))


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int
    version: str = __version__
    config_digest: str = ""

    def __post_init__(self):
        if not self.config_digest:
            self.config_digest = hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        try:
            return cls(**json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"cannot read manifest {p}: {exc}") from exc


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
