"""Reconstruction losses (L2, SSIM, TV) and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .optics import OpticsConfig, psi_to_depth

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 99.0
TV_EPS = 1e-6


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = dc.FrozenKernels(gaussian_window()[None, None])


def mse_loss(a: dc.Tensor, b) -> dc.Tensor:
    b = b if isinstance(b, dc.Tensor) else dc.Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return (d * d).mean()


def ssim_map(a: dc.Tensor, b) -> dc.Tensor:
    """Local SSIM over every valid 11x11 Gaussian window, per channel."""
    b = b if isinstance(b, dc.Tensor) else dc.Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a.reshape(1, *a.shape), b.reshape(1, *b.shape)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    def blur(x):
        return dc.convolve_frozen(x, _WINDOW, padding="valid")[0]

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (mu_ab * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: dc.Tensor, b) -> dc.Tensor:
    return ssim_map(a, b).mean()


def ssim_loss(a: dc.Tensor, b) -> dc.Tensor:
    return 1.0 - ssim(a, b)


def tv(psi_map: dc.Tensor, eps: float = TV_EPS) -> dc.Tensor:
    """Anisotropic TV with forward differences, summed and divided by H*W."""
    h, w = psi_map.shape[-2:]
    dx = psi_map[..., :, 1:] - psi_map[..., :, :-1]
    dy = psi_map[..., 1:, :] - psi_map[..., :-1, :]
    return (dc.smooth_abs(dx, eps).sum() + dc.smooth_abs(dy, eps).sum()) / float(h * w)


# -- loss schedule -----------------------------------------------------------------------
@dataclass(frozen=True)
class LossSchedule:
    """L2 before ``t_switch``, ``1 - SSIM`` afterwards, plus ``tv_weight * TV(psi)``.

    ``use_ssim=False`` keeps L2 for the whole run; ``additive`` keeps the L2
    term alongside SSIM after the switch.
    """

    t_switch: int = 500
    total: int = 5000
    tv_weight: float = 0.0
    use_ssim: bool = True
    additive: bool = False

    def __post_init__(self):
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.t_switch > self.total:
            raise ValueError(f"t_switch ({self.t_switch}) exceeds total iterations ({self.total})")

    def phase(self, t: int) -> str:
        return "ssim" if self.use_ssim and t >= self.t_switch else "l2"

    def terms(self, t: int, rendered: dc.Tensor, target, psi_map: dc.Tensor | None = None):
        """Return ``(total, parts)``; parts maps term name to its scalar tensor."""
        parts: dict[str, dc.Tensor] = {}
        if self.phase(t) == "ssim":
            parts["ssim"] = ssim_loss(rendered, target)
            if self.additive:
                parts["l2"] = mse_loss(rendered, target)
        else:
            parts["l2"] = mse_loss(rendered, target)
        if self.tv_weight > 0 and psi_map is not None:
            parts["tv"] = tv(psi_map) * self.tv_weight
        total = None
        for v in parts.values():
            total = v if total is None else total + v
        return total, parts


# -- metrics -------------------------------------------------------------------------------
def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, dc.Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs report the 99 dB cap."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def ssim_value(a, b) -> float:
    with dc.no_grad():
        return float(ssim(dc.Tensor(_arr(a)), dc.Tensor(_arr(b))).item())


def edge_mask(psi_gt: np.ndarray, margin: int) -> np.ndarray:
    """True for pixels more than ``margin`` pixels from a psi discontinuity."""
    psi_gt = np.asarray(psi_gt)
    edges = np.zeros(psi_gt.shape, dtype=bool)
    dx = psi_gt[:, 1:] != psi_gt[:, :-1]
    dy = psi_gt[1:, :] != psi_gt[:-1, :]
    edges[:, 1:] |= dx
    edges[:, :-1] |= dx
    edges[1:, :] |= dy
    edges[:-1, :] |= dy
    if margin > 0 and edges.any():
        edges = ndimage.binary_dilation(edges, structure=np.ones((3, 3), bool), iterations=margin)
    return ~edges


EDGE_MARGIN = 8  # px; exceeds the widest effective blur radius of the default optics


def interior_mask(psi_gt: np.ndarray, cfg: OpticsConfig, strict: bool = False) -> np.ndarray:
    """Evaluation mask away from depth edges: 8 px by default, S // 2 px when strict."""
    return edge_mask(psi_gt, cfg.psf_size // 2 if strict else EDGE_MARGIN)


def _masked(values: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return values.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluation mask is empty")
    return values[mask]


def psi_rmse(psi_pred, psi_gt, cfg: OpticsConfig, mask=None) -> float:
    p = np.clip(_arr(psi_pred), cfg.psi_min, cfg.psi_max)
    g = np.clip(_arr(psi_gt), cfg.psi_min, cfg.psi_max)
    return float(np.sqrt(np.mean(_masked((p - g) ** 2, mask))))


def depth_errors(psi_pred, psi_gt, cfg: OpticsConfig, mask=None) -> tuple[float, float]:
    """(RMSE, MAE) in meters after clipping both maps to the psi range."""
    p = np.clip(_arr(psi_pred), cfg.psi_min, cfg.psi_max)
    g = np.clip(_arr(psi_gt), cfg.psi_min, cfg.psi_max)
    err = _masked(psi_to_depth(p, cfg) - psi_to_depth(g, cfg), mask)
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def depth_rmse(psi_pred, psi_gt, cfg: OpticsConfig, mask=None) -> float:
    return depth_errors(psi_pred, psi_gt, cfg, mask)[0]


def evaluate(image, psi_map, gt_image, gt_psi, cfg: OpticsConfig, mask=None) -> dict:
    """Image and depth metrics for one reconstruction."""
    rmse_m, mae_m = depth_errors(psi_map, gt_psi, cfg, mask)
    return {
        "psnr_db": psnr(image, gt_image),
        "ssim": ssim_value(image, gt_image),
        "depth_rmse_m": rmse_m,
        "depth_mae_m": mae_m,
        "psi_rmse": psi_rmse(psi_map, gt_psi, cfg, mask),
    }
