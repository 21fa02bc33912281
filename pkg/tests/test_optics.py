import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phasecode import optics as op
from phasecode.optics import OpticsConfig, OpticsError


@pytest.fixture(scope="module")
def default_bank():
    return op.build_psf_bank(OpticsConfig(), 15)


def airy_config(q=8.0, size=31):
    """Clear aperture sampled at Q pixels per lambda*N in the green channel."""
    base = OpticsConfig()
    lam = base.wavelengths[1]
    pitch = lam * base.focal_length / (2 * base.aperture_radius * q)
    return OpticsConfig(rings=(), pixel_pitch=pitch, psf_size=size, pupil_samples=4 * size + 4)


# -- config ------------------------------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    dict(psf_size=70),
    dict(pupil_samples=100),
    dict(psi_min=1.0),
    dict(psi_max=-1.0),
    dict(rings=((0.5, 0.4, 1.0),)),
    dict(rings=((0.2, 0.6, 1.0), (0.5, 0.9, 1.0))),
    dict(rings=((0.2, 1.2, 1.0),)),
    dict(focal_length=-1.0),
])
def test_config_invariants(bad):
    with pytest.raises(OpticsError):
        OpticsConfig(**bad)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = OpticsConfig()
    assert OpticsConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(OpticsError):
        OpticsConfig.from_dict({"aperture": 1.0})


# -- sampling -------------------------------------------------------------------------------------
@pytest.mark.parametrize("pitch", [0.5e-6, 1.5e-6, 4.5e-6, 6e-6])
def test_sampling_relation(pitch):
    cfg = OpticsConfig(pixel_pitch=pitch)
    for c in range(3):
        smp = op.sampling_for(cfg, c)
        lam = cfg.wavelengths[c]
        assert smp.q == pytest.approx(lam * cfg.focal_length / (2 * cfg.aperture_radius * pitch))
        assert smp.binning % 2 == 1
        assert smp.q * smp.binning >= 2.0
        assert smp.binning == 1 or smp.q * (smp.binning - 2) < 2.0
        # PSF sample pitch lambda f n / (2 R M) equals pitch / B
        fine = lam * cfg.focal_length * smp.pupil_diameter / (2 * cfg.aperture_radius * smp.fft_size)
        assert fine == pytest.approx(pitch / smp.binning, rel=1e-12)
        assert smp.fft_size >= cfg.psf_size * smp.binning + 2


def test_aliasing_guard():
    with pytest.raises(OpticsError, match="alias"):
        op.psf(OpticsConfig(pixel_pitch=9e-6), 0.0, 2)


# -- mask ---------------------------------------------------------------------------------------
def test_empty_rings_give_zero_phase():
    assert not OpticsConfig(rings=()).rings
    assert np.all(op.mask_phase(OpticsConfig(rings=()), 0, samples=64) == 0)


def test_design_wavelength_channel_keeps_phase():
    cfg = OpticsConfig(rings=((0.5, 1.0, 2.5),))
    ph = op.mask_phase(cfg, 1, samples=128)
    assert set(np.unique(ph)) == {0.0, 2.5}


def test_half_wavelength_channel_wraps_to_two_pi():
    lam = 530e-9
    cfg = OpticsConfig(wavelengths=(lam / 2, lam, lam), design_wavelength=lam,
                       rings=((0.3, 0.7, math.pi),))
    ph = op.mask_phase(cfg, 0, samples=128)
    assert np.isclose(ph.max(), 2 * math.pi)
    field = np.exp(1j * ph)
    assert np.allclose(field, np.exp(1j * np.mod(ph, 2 * math.pi)), atol=1e-12)
    assert np.allclose(field, 1.0, atol=1e-12)


def test_mask_phase_rejects_bad_channel():
    with pytest.raises(OpticsError):
        op.mask_phase(OpticsConfig(), 3)


# -- PSF ------------------------------------------------------------------------------------------
def _first_zero_on_axis(kernel):
    """Sub-pixel radius of the first dark ring along the central row.

    The field amplitude changes sign at the zero, so a cubic through the signed
    square root of the intensity crosses zero linearly there.
    """
    c = kernel.shape[0] // 2
    prof = kernel[c, c:]
    i = next(i for i in range(1, len(prof) - 1) if prof[i] <= prof[i - 1] and prof[i] <= prof[i + 1])
    x = np.arange(i - 2, i + 3)
    best = None
    for flip in (i, i + 1):
        amp = np.sqrt(prof)
        amp[flip:] *= -1
        coef = np.polyfit(x, amp[x], 3)
        resid = np.abs(np.polyval(coef, x) - amp[x]).max()
        roots = [r.real for r in np.roots(coef) if abs(r.imag) < 1e-9 and i - 1 <= r.real <= i + 1]
        if roots and (best is None or resid < best[0]):
            best = (resid, roots[0])
    return best[1]


def test_airy_first_zero_radius():
    q = 8.0
    cfg = airy_config(q)
    assert op.sampling_for(cfg, 1).binning == 1
    r = _first_zero_on_axis(op.psf(cfg, 0.0, 1))
    assert abs(r - 1.2197 * q) < 0.05


def test_clear_aperture_defocus_symmetry():
    cfg = OpticsConfig(rings=(), psf_size=21, pupil_samples=96)
    for c in range(3):
        assert np.allclose(op.psf(cfg, 3.0, c), op.psf(cfg, -3.0, c), atol=1e-12, rtol=0)


def test_mask_breaks_defocus_symmetry():
    cfg = OpticsConfig()
    l1 = [np.abs(op.psf(cfg, 4.0, c) - op.psf(cfg, -4.0, c)).sum() for c in range(3)]
    assert max(l1) > 0.01


def test_bank_kernels_normalized_and_nonnegative(default_bank):
    assert default_bank.kernels.shape == (15, 3, 71, 71)
    assert np.all(default_bank.kernels >= 0)
    assert np.allclose(default_bank.kernels.sum(axis=(2, 3)), 1.0, atol=1e-3)
    assert default_bank.retained_energy.min() >= 0.9


def test_bank_grids():
    cfg = OpticsConfig(psf_size=15, pupil_samples=64)
    assert np.array_equal(op.build_psf_bank(cfg, 2).psi_grid, [-4.0, 10.0])
    assert np.allclose(np.diff(op.build_psf_bank(cfg, 15).psi_grid), 1.0)
    with pytest.raises(OpticsError):
        op.build_psf_bank(cfg, 1)
    with pytest.raises(OpticsError):
        op.build_psf_bank(cfg, np.array([0.0, -1.0, 2.0]))


def test_bank_is_deterministic():
    cfg = OpticsConfig(psf_size=15, pupil_samples=64)
    a = op.build_psf_bank(cfg, 5, cache=False)
    b = op.build_psf_bank(cfg, 5, cache=False)
    assert np.array_equal(a.kernels, b.kernels)
    assert a.digest == b.digest


def test_channel_separation_of_default_mask(default_bank):
    step = default_bank.psi_grid[1] - default_bank.psi_grid[0]
    fine = op.build_psf_bank(OpticsConfig(), 57)
    best = op.bank_sharpest_focus(fine)
    gaps = [abs(best[i] - best[j]) for i in range(3) for j in range(i + 1, 3)]
    assert min(gaps) >= step, best


def test_sharpest_focus_clear_aperture_is_in_focus():
    cfg = OpticsConfig(rings=(), psf_size=21, pupil_samples=96)
    best = op.sharpest_focus(cfg, np.arange(-2.0, 2.01, 0.5))
    assert np.allclose(best, 0.0)


# -- psi <-> depth ------------------------------------------------------------------------------
def test_psi_zero_is_focus_distance():
    cfg = OpticsConfig()
    assert op.psi_to_depth(0.0, cfg) == pytest.approx(cfg.focus_distance, rel=1e-15)
    assert op.depth_to_psi(cfg.focus_distance, cfg) == 0.0


def test_depth_to_psi_matches_direct_formula():
    cfg = OpticsConfig()
    z = 0.8
    direct = math.pi * 4e-3 ** 2 / 530e-9 * (1 / 0.8 - 1 / 1.1)
    assert op.depth_to_psi(z, cfg) == pytest.approx(direct, rel=1e-13)


def test_far_field_limit_and_monotonicity():
    cfg = OpticsConfig()
    assert op.depth_to_psi(1e12, cfg) == pytest.approx(op.far_field_psi(cfg), abs=1e-6)
    z = np.linspace(0.3, 50.0, 200)
    assert np.all(np.diff(op.depth_to_psi(z, cfg)) < 0)


@given(st.floats(min_value=-4.0, max_value=10.0))
def test_psi_depth_round_trip(psi):
    cfg = OpticsConfig()
    assert op.depth_to_psi(op.psi_to_depth(psi, cfg), cfg) == pytest.approx(psi, abs=1e-12)


@given(st.floats(min_value=1e-3, max_value=1e4))
def test_depth_psi_round_trip(z):
    cfg = OpticsConfig()
    assert op.psi_to_depth(op.depth_to_psi(z, cfg), cfg) == pytest.approx(z, rel=1e-12)


def test_out_of_model_depths_rejected():
    cfg = OpticsConfig()
    with pytest.raises(OpticsError):
        op.psi_to_depth(op.far_field_psi(cfg) - 1.0, cfg)
    with pytest.raises(OpticsError):
        op.depth_to_psi(0.0, cfg)


# -- perturbation -------------------------------------------------------------------------------
def test_perturb_mask():
    cfg = OpticsConfig(rings=((0.5, 1.0, math.pi),))
    assert op.perturb_mask(cfg, 0.0) == cfg
    assert op.perturb_mask(cfg, 0.10).rings[0][2] == pytest.approx(1.1 * math.pi)
    assert op.perturb_mask(cfg, 0.10).rings[0][:2] == (0.5, 1.0)
    with pytest.raises(OpticsError):
        op.perturb_mask(cfg, -0.01)


def test_perturbed_bank_differs():
    cfg = OpticsConfig(psf_size=15, pupil_samples=64)
    nominal = op.build_psf_bank(cfg, 5)
    for f in (0.01, 0.05):
        other = op.build_psf_bank(op.perturb_mask(cfg, f), 5, perturbation=f)
        assert np.abs(other.kernels - nominal.kernels).sum() > 0
        assert other.digest != nominal.digest
