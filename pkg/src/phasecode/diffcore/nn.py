"""Image-shaped ops: activations, convolutions, resampling, normalization.

Images are channel-major ``C x H x W`` arrays (no batch axis; every solve
works on a single image). ``conv2d`` is a cross-correlation, as in most deep
learning code. :func:`convolve_frozen` is a true convolution (kernel
flipped), which is what the optics means by blurring an image with a PSF.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .tensor import Tensor, as_tensor

PAD_MODES = ("zero", "reflect")


# -- activations -----------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return Tensor.from_op(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sine(x: Tensor, omega: float = 1.0) -> Tensor:
    arg = omega * x.data
    return Tensor.from_op(np.sin(arg), (x,), lambda g: (g * omega * np.cos(arg),), "sine")


def activation(kind: str, x: Tensor, param: float | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.1 if param is None else param)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sine":
        return sine(x, 1.0 if param is None else param)
    raise ValueError(f"unknown activation {kind!r}")


# -- padding -------------------------------------------------------------------------
def _pad_np(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    if mode == "reflect":
        return np.pad(x, width, mode="reflect")
    if mode == "zero":
        return np.pad(x, width, mode="constant")
    raise ValueError(f"unknown pad mode {mode!r}; expected one of {PAD_MODES}")


def _fold_axis(g: np.ndarray, p: int, axis: int, mode: str) -> np.ndarray:
    """Adjoint of padding ``p`` samples on both ends of ``axis``."""
    if p == 0:
        return g
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * p
    out = g[..., p:p + n].copy()
    if mode == "reflect":
        # padded[p - 1 - i] = x[i + 1]; padded[n + p + i] = x[n - 2 - i]
        out[..., 1:p + 1] += g[..., :p][..., ::-1]
        out[..., n - 1 - p:n - 1] += g[..., n + p:][..., ::-1]
    return np.moveaxis(out, -1, axis)


def _unpad_np(g: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    g = _fold_axis(g, ph, g.ndim - 2, mode)
    return _fold_axis(g, pw, g.ndim - 1, mode)


def _check_pad(h: int, w: int, ph: int, pw: int, mode: str, op: str) -> None:
    if mode == "reflect" and (ph >= h or pw >= w):
        raise ValueError(f"{op}: reflect padding ({ph}, {pw}) needs extents larger than it, got {h}x{w}")


def pad2d(x: Tensor, ph: int, pw: int | None = None, mode: str = "reflect") -> Tensor:
    pw = ph if pw is None else pw
    _check_pad(x.shape[-2], x.shape[-1], ph, pw, mode, "pad2d")
    out = _pad_np(x.data, ph, pw, mode)
    return Tensor.from_op(out, (x,), lambda g: (_unpad_np(g, ph, pw, mode),), "pad2d")


# -- convolution ---------------------------------------------------------------------
def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo)


def conv2d(
    x: Tensor,
    w: Tensor | np.ndarray,
    b: Tensor | None = None,
    stride: int = 1,
    padding: str = "reflect",
) -> Tensor:
    """Cross-correlate ``x`` (C_in x H x W) with ``w`` (C_out x C_in x k x k).

    The input is padded by ``k // 2`` on each side with ``padding`` (``zero``
    or ``reflect``), so stride 1 keeps the extent and stride 2 halves it
    (rounding up). A plain ndarray ``w`` is treated as frozen.
    """
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=x.dtype))
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d: expected C x H x W input and 4-D weights, got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd extent, got {k}x{k2}")
    if c_in != x.shape[0]:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, weights expect {c_in}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding not in PAD_MODES:
        raise ValueError(f"conv2d: unknown pad mode {padding!r}")
    _, h, wd = x.shape
    p = k // 2
    if k > h + 2 * p or k > wd + 2 * p:
        raise ValueError(f"conv2d: kernel {k}x{k} larger than padded input")
    _check_pad(h, wd, p, p, padding, "conv2d")

    xp = _pad_np(x.data, p, p, padding)
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    if k == 1 and stride == 1:
        cols = xp.reshape(c_in, h * wd)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(c_out, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data.reshape(c_out, 1)
    out = out.reshape(c_out, ho, wo)

    def backward(g):
        gmat = g.reshape(c_out, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ gmat
            if k == 1 and stride == 1:
                gxp = dcols.reshape(xp.shape)
            else:
                dcols = dcols.reshape(c_in, k, k, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = _unpad_np(gxp, p, p, padding)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "conv2d")


# -- resampling ----------------------------------------------------------------------
def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * x
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., 0] += 0.25 * even[..., 0]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling over the last two axes.

    Half-pixel convention (``align_corners=False``): output sample ``i`` sits
    at input coordinate ``(i + 0.5) / 2 - 0.5``; coordinates past the edge
    are clamped to the border sample.
    """
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"upsample2x: extents must be at least 2, got {h}x{w}")
    out = _up_axis(_up_axis(x.data, x.ndim - 2), x.ndim - 1)

    def backward(g):
        return (_up_axis_adjoint(_up_axis_adjoint(g, x.ndim - 1), x.ndim - 2),)

    return Tensor.from_op(out, (x,), backward, "upsample2x")


def resample(x: Tensor, mode: str = "bilinear2x") -> Tensor:
    if mode != "bilinear2x":
        raise ValueError(f"unknown resample mode {mode!r}")
    return upsample2x(x)


# -- normalization -------------------------------------------------------------------
def normalize_channels(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over H x W followed by an affine map."""
    c = x.shape[0]
    n = x.data[0].size
    xd = x.data.reshape(c, -1)
    mean = xd.mean(axis=1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gamma = scale.data.reshape(c, 1)
    out = (xhat * gamma + shift.data.reshape(c, 1)).reshape(x.shape)

    def backward(g):
        gm = g.reshape(c, -1)
        gscale = (gm * xhat).sum(axis=1).reshape(scale.shape)
        gshift = gm.sum(axis=1).reshape(shift.shape)
        dxhat = gm * gamma
        gx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return gx.reshape(x.shape), gscale, gshift

    return Tensor.from_op(out, (x, scale, shift), backward, "normalize_channels")


# -- frozen-kernel FFT convolution ---------------------------------------------------
class FrozenKernels:
    """Constant ``K x C x S x S`` kernels whose spectra are cached per grid size."""

    def __init__(self, kernels: np.ndarray):
        kernels = np.asarray(kernels)
        if kernels.ndim == 3:
            kernels = kernels[None]
        if kernels.ndim != 4 or kernels.shape[-1] != kernels.shape[-2] or kernels.shape[-1] % 2 == 0:
            raise ValueError(f"kernels must be K x C x S x S with odd S, got {kernels.shape}")
        self.kernels = kernels
        self._spectra: dict[tuple, np.ndarray] = {}

    @property
    def size(self) -> int:
        return self.kernels.shape[-1]

    def spectrum(self, fft_shape: tuple[int, int], dtype) -> np.ndarray:
        key = (fft_shape, np.dtype(dtype).str)
        spec = self._spectra.get(key)
        if spec is None:
            spec = sfft.rfft2(self.kernels.astype(dtype), s=fft_shape, axes=(-2, -1))
            self._spectra[key] = spec
        return spec


def convolve_frozen(x: Tensor, kernels: FrozenKernels | np.ndarray, padding: str = "reflect") -> Tensor:
    """Convolve each channel of ``x`` (C x H x W) with every plane of ``kernels``.

    Returns ``K x C x H' x W'``: true (flipped-kernel) convolution, computed
    by FFT. ``padding`` is ``reflect`` or ``zero`` for same-size output, or
    ``valid`` for the ``(H - S + 1) x (W - S + 1)`` interior. Gradients flow to
    ``x`` only.
    """
    if not isinstance(kernels, FrozenKernels):
        kernels = FrozenKernels(kernels)
    if x.ndim != 3:
        raise ValueError(f"convolve_frozen: expected C x H x W input, got {x.shape}")
    kk, kc, s, _ = kernels.kernels.shape
    c, h, w = x.shape
    if kc not in (1, c):
        raise ValueError(f"convolve_frozen: kernels have {kc} channels, image has {c}")
    p = s // 2
    if padding == "valid":
        if s > h or s > w:
            raise ValueError(f"convolve_frozen: {s}x{s} window larger than {h}x{w} image")
        xp = x.data
        ph = pw = 0
    else:
        _check_pad(h, w, p, p, padding, "convolve_frozen")
        xp = _pad_np(x.data, p, p, padding)
        ph = pw = p
    hp, wp = xp.shape[-2:]
    fshape = (sfft.next_fast_len(hp, real=True), sfft.next_fast_len(wp, real=True))
    ho, wo = hp - s + 1, wp - s + 1
    kspec = kernels.spectrum(fshape, x.dtype)
    xspec = sfft.rfft2(xp, s=fshape, axes=(-2, -1))
    full = sfft.irfft2(xspec[None] * kspec, s=fshape, axes=(-2, -1))
    out = np.ascontiguousarray(full[..., s - 1:s - 1 + ho, s - 1:s - 1 + wo])

    def backward(g):
        # adjoint of "valid slice of linear convolution" is correlation
        gfull = np.zeros(g.shape[:-2] + fshape, dtype=g.dtype)
        gfull[..., s - 1:s - 1 + ho, s - 1:s - 1 + wo] = g
        gspec = sfft.rfft2(gfull, axes=(-2, -1))
        gspec = (gspec * np.conj(kspec)).sum(axis=0)
        if kc == 1 and c > 1:
            gspec = np.broadcast_to(gspec, (c,) + gspec.shape[1:])
        gxp = sfft.irfft2(gspec, s=fshape, axes=(-2, -1))[..., :hp, :wp]
        gxp = np.ascontiguousarray(gxp, dtype=x.dtype)
        if padding == "valid":
            return (gxp,)
        return (_unpad_np(gxp, ph, pw, padding),)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x,), backward, "convolve_frozen")


# -- layered interpolation -----------------------------------------------------------
def plane_index(psi: np.ndarray, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower bracketing plane and linear weight for each ``psi`` value.

    Values on the top knot map to the last interval with weight 1. ``psi``
    must already lie within ``[grid[0], grid[-1]]``.
    """
    k = np.searchsorted(grid, psi, side="right") - 1
    k = np.clip(k, 0, len(grid) - 2)
    lo = grid[k]
    step = grid[k + 1] - lo
    w = (psi - lo) / step
    return k, w


def interpolate_planes(planes: Tensor, psi: Tensor, grid: np.ndarray) -> Tensor:
    """Blend ``planes`` (K x C x H x W) per pixel by ``psi`` (H x W) on ``grid``.

    out = (1 - w) * planes[k] + w * planes[k + 1] with ``grid[k] <= psi <
    grid[k + 1]``. The psi-gradient is the plane difference over the knot
    spacing, piecewise constant in psi.
    """
    grid = np.asarray(grid, dtype=np.float64)
    kk = planes.shape[0]
    if kk < 2 or len(grid) != kk:
        raise ValueError(f"interpolate_planes: need >= 2 planes matching the grid, got {kk} and {len(grid)}")
    if psi.shape != planes.shape[-2:]:
        raise ValueError(f"interpolate_planes: psi {psi.shape} does not match planes {planes.shape[-2:]}")
    if (psi.data < grid[0]).any() or (psi.data > grid[-1]).any():
        raise ValueError("interpolate_planes: psi outside the grid; clip first")
    k, w = plane_index(psi.data, grid)
    w = w.astype(planes.dtype)
    step = (grid[k + 1] - grid[k]).astype(planes.dtype)
    c = planes.shape[1]
    idx = np.broadcast_to(k[None, None], (1, c) + k.shape)
    lower = np.take_along_axis(planes.data, idx, axis=0)[0]
    upper = np.take_along_axis(planes.data, idx + 1, axis=0)[0]
    out = lower + w * (upper - lower)

    def backward(g):
        gplanes = None
        if planes.requires_grad:
            gplanes = np.zeros_like(planes.data)
            np.put_along_axis(gplanes, idx, (g * (1.0 - w))[None], axis=0)
            np.put_along_axis(gplanes, idx + 1, (g * w)[None], axis=0)
        gpsi = None
        if psi.requires_grad:
            gpsi = (g * (upper - lower)).sum(axis=0) / step
        return gplanes, gpsi

    return Tensor.from_op(out, (planes, psi), backward, "interpolate_planes")


def ensure_tensor(x, dtype=None) -> Tensor:
    return as_tensor(x, dtype)
