import math

import numpy as np
import pytest

from phasecode import diffcore as dc
from phasecode.camera import CodedImage, render_acquisition, render_differentiable
from phasecode.diffcore import Tensor
from phasecode.engine import (AdamState, EngineConfig, EngineConfigError, NumericalAbort, adam_step,
                              solve, solve_deblur)
from phasecode.generators import GeneratorConfig
from phasecode.optics import build_psf_bank
from phasecode.scenes import SceneSpec, make_synthetic

TINY = dict(levels=2, width=8, skip_width=4, input_depth=4, siren_layers=2, siren_width=32,
            fourier_features=16)


@pytest.fixture(scope="module")
def setup(small_optics):
    bank = build_psf_bank(small_optics, 15)
    scene = make_synthetic(SceneSpec(height=32, width=32, layers=2, seed=3), small_optics)
    y = render_acquisition(scene, small_optics, 29)
    return bank, scene, y


def _gcfg(kind="dip", **kw):
    return GeneratorConfig(kind=kind, **dict(TINY, **kw))


def _ecfg(t=4, **kw):
    kw.setdefault("t_switch", min(2, t))
    kw.setdefault("snapshot_every", 0)
    return EngineConfig(iterations=t, **kw)


# -- config ---------------------------------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    dict(iterations=0), dict(lr=0.0), dict(t_switch=10, iterations=5), dict(tv_weight=-1.0),
    dict(input_noise=-0.1), dict(mode="fast"), dict(planes=1), dict(dtype="float16"), dict(beta1=1.0),
])
def test_config_rejects(bad):
    with pytest.raises(EngineConfigError):
        EngineConfig(**bad)


def test_config_round_trip_and_l2_only():
    cfg = EngineConfig(iterations=50, t_switch=10, use_ssim=False)
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.schedule.phase(49) == "l2"
    # with SSIM disabled the switch point is irrelevant
    assert EngineConfig(iterations=5, t_switch=500, use_ssim=False).iterations == 5
    with pytest.raises(EngineConfigError):
        EngineConfig.from_dict({"steps": 3})


# -- Adam ---------------------------------------------------------------------------------------
def test_adam_first_step_is_signed_lr(rng):
    g = rng.normal(size=(4, 5))
    p = Tensor(np.zeros((4, 5)), requires_grad=True)
    p.grad = g.copy()
    adam_step([p], AdamState.zeros_like([p]), lr=0.01)
    assert np.allclose(p.data, -0.01 * np.sign(g), atol=1e-8)


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.arange(6.0), requires_grad=True)
    state = AdamState.zeros_like([p])
    for _ in range(20):
        p.grad = np.zeros(6)
        adam_step([p], state, lr=0.01)
    assert np.array_equal(p.data, np.arange(6.0))


def test_adam_quadratic_bowl_matches_scalar_simulation():
    x_ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 201):
        g = 2.0 * x_ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x_ref -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState.zeros_like([p])
    for _ in range(200):
        p.zero_grad()
        (p * p).sum().backward()
        adam_step([p], state, lr=0.01)
    assert p.data[0] == pytest.approx(x_ref, abs=1e-12)
    assert abs(p.data[0]) < 0.05


def test_adam_non_finite_gradient_names_block():
    p = Tensor(np.zeros(3), requires_grad=True)
    q = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.zeros(3)
    q.grad = np.array([1.0, np.inf])
    with pytest.raises(NumericalAbort, match="block conv.w"):
        adam_step([p, q], AdamState.zeros_like([p, q]), 0.01, names=["a", "conv.w"])
    assert np.array_equal(p.data, np.zeros(3))


# -- solve ---------------------------------------------------------------------------------------
def test_single_iteration(setup):
    bank, _, y = setup
    res = solve(y, bank, _gcfg(), EngineConfig(iterations=1, t_switch=1))
    assert len(res.loss_history["total"]) == 1
    assert np.isfinite(res.loss_history["total"][0])


def test_result_fields_and_metrics(setup):
    bank, scene, y = setup
    res = solve(y, bank, _gcfg(), _ecfg(6, snapshot_every=3), gt=scene)
    assert res.image.shape == (3, 32, 32) and res.psi_map.shape == (32, 32)
    assert res.depth_map_m.shape == (32, 32) and np.all(res.depth_map_m > 0)
    assert [s["iteration"] for s in res.snapshots] == [0, 3]
    assert all("psnr_db" in s["metrics"] for s in res.snapshots)
    assert set(res.metrics) >= {"psnr_db", "ssim", "depth_rmse_m", "psi_rmse"}
    assert res.best["loss"] == min(res.loss_history["total"])
    for key in ("l2", "ssim", "tv"):
        assert len(res.loss_history[key]) == 6


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_rendered_consistency(setup, dtype):
    bank, _, y = setup
    res = solve(y, bank, _gcfg(), _ecfg(3, dtype=dtype))
    with dc.no_grad():
        again = render_differentiable(Tensor(res.image), Tensor(res.psi_map), bank).data
    assert np.abs(again - res.rendered.data).max() < 1e-6


def test_seeded_determinism(setup):
    bank, _, y = setup
    a = solve(y, bank, _gcfg(), _ecfg(5))
    b = solve(y, bank, _gcfg(), _ecfg(5))
    assert np.array_equal(a.loss_history["total"], b.loss_history["total"])
    assert np.array_equal(a.image, b.image) and np.array_equal(a.psi_map, b.psi_map)
    c = solve(y, bank, _gcfg(), _ecfg(5, seed=1))
    assert not np.array_equal(a.loss_history["total"], c.loss_history["total"])


@pytest.mark.parametrize("kind", ["dip", "siren", "pip"])
def test_every_generator_kind_runs(setup, kind):
    bank, _, y = setup
    res = solve(y, bank, _gcfg(kind), _ecfg(3, tv_weight=0.01))
    assert np.isfinite(res.loss_history["total"]).all()
    assert res.loss_history["tv"].min() > 0


def test_loss_switch_continuity(setup):
    bank, _, y = setup
    seen = {}

    def grab(t, value, parts, gen):
        if t == 3:
            seen["state"] = gen.state()

    trunc = solve(y, bank, _gcfg(), _ecfg(4, t_switch=4))
    full = solve(y, bank, _gcfg(), _ecfg(8, t_switch=4), callback=grab)
    assert np.array_equal(trunc.loss_history["total"], full.loss_history["total"][:4])
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(trunc.generator.state(), seen["state"]))
    assert set(np.nonzero(full.loss_history["ssim"])[0]) == {4, 5, 6, 7}


def test_loss_decreases(setup):
    bank, _, y = setup
    res = solve(y, bank, _gcfg(), EngineConfig(iterations=200, t_switch=200, snapshot_every=0))
    hist = res.loss_history["total"]
    assert np.median(hist[-100:]) < np.median(hist[:100])


def test_non_finite_capture_aborts(setup):
    bank, _, y = setup
    bad = y.data.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericalAbort) as info:
        solve(CodedImage(bad), bank, _gcfg(), _ecfg(3, snapshot_every=1))
    assert info.value.iteration == 0


def test_dimension_errors(setup):
    bank, _, y = setup
    with pytest.raises(ValueError):
        solve(CodedImage(y.data[:2]), bank, _gcfg(), _ecfg())
    with pytest.raises(ValueError):
        solve(y, bank, _gcfg(psi_min=-6.0), _ecfg())


# -- deblur ----------------------------------------------------------------------------------------
def test_mode_mismatch_rejected(setup):
    bank, _, y = setup
    with pytest.raises(EngineConfigError):
        solve_deblur(y, bank, _gcfg(), _ecfg())
    with pytest.raises(EngineConfigError):
        solve(y, bank, _gcfg(), _ecfg(mode="deblur"))


def test_deblur_reports_scalar(setup):
    bank, _, y = setup
    res = solve_deblur(y, bank, _gcfg(), _ecfg(3, mode="deblur"))
    assert -4.0 <= res.psi_scalar <= 10.0
    assert np.allclose(res.psi_map, res.psi_scalar, atol=1e-5)
    assert res.metrics["psi_scalar"] == res.psi_scalar
    # scalar starts at the middle of the range and has moved after three updates
    assert res.psi_scalar != 3.0
