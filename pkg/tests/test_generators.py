import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phasecode import diffcore as dc
from phasecode.diffcore import Tensor, grad_check
from phasecode.generators import (GeneratorConfig, GeneratorError, build_generator, coordinate_grid,
                                  generate, make_code, make_code_shape, working_size)
from phasecode.io import load_checkpoint, save_checkpoint

TINY = dict(levels=2, width=6, skip_width=3, input_depth=4)


def _tiny(kind="dip", **kw):
    base = dict(TINY, siren_layers=2, siren_width=16, fourier_features=8)
    base.update(kw)
    return GeneratorConfig(kind=kind, **base)


def _run(g, cfg, h, w):
    with dc.no_grad():
        return generate(g, make_code(cfg, h, w))


# -- config --------------------------------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    dict(kind="vae"), dict(padding="wrap"), dict(psi_min=3.0, psi_max=3.0),
    dict(width=0), dict(kind="pip", fourier_features=7),
])
def test_config_rejects(bad):
    with pytest.raises(GeneratorError):
        GeneratorConfig(**bad)


def test_config_round_trip():
    cfg = GeneratorConfig(kind="pip", seed=3)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest != GeneratorConfig(kind="pip", seed=4).digest
    with pytest.raises(GeneratorError):
        GeneratorConfig.from_dict({"depth": 3})


# -- codes ---------------------------------------------------------------------------------------
def test_coordinate_grid():
    g = coordinate_grid(4, 8)
    assert g.shape == (2, 4, 8)
    assert np.allclose(g[0, 0], (np.arange(8) + 0.5) / 8 * 2 - 1)
    assert np.allclose(g[1, :, 0], (np.arange(4) + 0.5) / 4 * 2 - 1)
    assert np.abs(g).max() < 1


def test_codes_per_kind():
    dip = make_code(GeneratorConfig(), 100, 200)
    assert dip.shape == (32, 128, 224)
    assert dip.min() >= 0 and dip.max() <= 1
    assert np.array_equal(dip, make_code(GeneratorConfig(), 100, 200))
    assert make_code(GeneratorConfig(kind="siren"), 100, 200).shape == (2, 100, 200)
    pip = make_code(GeneratorConfig(kind="pip"), 64, 64)
    assert pip.shape == (128, 64, 64)
    assert np.allclose(pip[:64] ** 2 + pip[64:] ** 2, 1.0)


def test_working_size_pads_to_multiple():
    assert working_size(GeneratorConfig(), 128, 256) == (128, 256)
    assert working_size(GeneratorConfig(), 100, 65) == (128, 96)
    assert working_size(GeneratorConfig(kind="siren"), 100, 65) == (100, 65)


# -- architecture --------------------------------------------------------------------------------
def _conv_params(c_in, c_out, k, norm=True):
    return c_out * c_in * k * k + c_out + (2 * c_out if norm else 0)


def test_dip_parameter_count_closed_form():
    d, wd, sk = 32, 128, 16
    enc = sum(_conv_params(d if i == 0 else wd, sk, 1) + _conv_params(d if i == 0 else wd, wd, 3)
              + _conv_params(wd, wd, 3) for i in range(5))
    dec = 5 * (_conv_params(wd + sk, wd, 3) + _conv_params(wd, wd, 3))
    head = _conv_params(wd, 4, 1, norm=False)
    g = build_generator(GeneratorConfig(), 128, 256)
    assert g.n_params == enc + dec + head == 2_947_828


def test_dip_output_shapes():
    cfg = GeneratorConfig()
    img, psi = _run(build_generator(cfg, 128, 256), cfg, 128, 256)
    assert img.shape == (3, 128, 256)
    assert psi.shape == (128, 256)


@pytest.mark.parametrize("kind", ["dip", "siren", "pip"])
def test_non_multiple_sizes_are_cropped(kind):
    cfg = _tiny(kind)
    img, psi = _run(build_generator(cfg, 30, 45), cfg, 30, 45)
    assert img.shape == (3, 30, 45) and psi.shape == (30, 45)


def test_too_small_for_depth():
    with pytest.raises(GeneratorError):
        build_generator(GeneratorConfig(), 32, 64)


def test_code_shape_checked():
    cfg = _tiny()
    g = build_generator(cfg, 32, 32)
    assert make_code_shape(cfg, 32, 32) == (4, 32, 32)
    with pytest.raises(GeneratorError):
        generate(g, np.zeros((4, 16, 32)))


@pytest.mark.parametrize("kind", ["dip", "siren", "pip"])
def test_same_seed_same_parameters(kind):
    a = build_generator(_tiny(kind, seed=5), 32, 32)
    b = build_generator(_tiny(kind, seed=5), 32, 32)
    c = build_generator(_tiny(kind, seed=6), 32, 32)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.state(), b.state()))
    assert any(not np.array_equal(x, y) for (_, x), (_, y) in zip(a.state(), c.state()))


@given(st.sampled_from(["dip", "siren", "pip"]), st.floats(0.1, 50.0), st.integers(0, 1000))
def test_output_ranges_hold_for_any_parameters(kind, scale, seed):
    cfg = _tiny(kind)
    g = build_generator(cfg, 32, 32)
    rng = np.random.default_rng(seed)
    g.load_state([(k, rng.normal(0, scale, v.shape)) for k, v in g.state()])
    img, psi = _run(g, cfg, 32, 32)
    assert img.data.min() >= 0 and img.data.max() <= 1
    assert psi.data.min() >= cfg.psi_min and psi.data.max() <= cfg.psi_max


@pytest.mark.parametrize("kind", ["dip", "siren", "pip"])
def test_parameter_gradient_32x32(kind):
    cfg = _tiny(kind)
    g = build_generator(cfg, 32, 32)
    code = Tensor(make_code(cfg, 32, 32))
    rng = np.random.default_rng(0)
    wi, wp = Tensor(rng.normal(size=(3, 32, 32))), Tensor(rng.normal(size=(32, 32)))
    name = next(n for n in g.params if n.endswith(".w"))

    def loss(p):
        g.params[name] = p
        img, psi = generate(g, code)
        return (img * wi).sum() + (psi * wp).sum() * 0.1

    rep = grad_check(loss, g.params[name].data, delta=1e-6, tol=1e-4, n_coords=40)
    assert rep.passed, rep


def test_siren_initial_statistics():
    # final layer: fan-in w, weights U(+-sqrt(6/w)/omega) on sines with E[sin^2] in
    # [(1 - e^-2)/2, 1], bias U(+-1/sqrt(w)) -> second moment within these bounds
    cfg0 = GeneratorConfig(kind="siren")
    w, om = cfg0.siren_width, cfg0.omega0
    lo = 2 * (1 - math.exp(-2)) / 2 / om ** 2 + 1 / (3 * w)
    hi = 2 / om ** 2 + 1 / (3 * w)
    second, rough = [], []
    for seed in range(10):
        cfg = GeneratorConfig(kind="siren", seed=seed)
        g = build_generator(cfg, 64, 64)
        with dc.no_grad():
            out = g.trunk(Tensor(make_code(cfg, 64, 64))).data
        second.append((out ** 2).mean())
        rough.append(np.diff(out, axis=2).var() / out.var())
    assert lo <= np.mean(second) <= hi
    # neighbouring pixels correlated (white noise would give a ratio of 2)
    assert max(rough) < 0.5


@pytest.mark.parametrize("levels,shift,margin", [(1, 2, 16), (2, 4, 24)])
def test_dip_translation_covariance(levels, shift, margin):
    # strided encoders commute with shifts by multiples of 2**levels
    cfg = GeneratorConfig(levels=levels, width=6, skip_width=3, input_depth=4,
                          normalization=False, padding="zero")
    g = build_generator(cfg, 64, 64)
    code = make_code(cfg, 64, 64)
    with dc.no_grad():
        a = g.trunk(Tensor(code)).data
        b = g.trunk(Tensor(np.roll(code, (shift, shift), axis=(1, 2)))).data
    n = 64 - margin
    assert np.abs(b[:, margin + shift:n, margin + shift:n] - a[:, margin:n - shift, margin:n - shift]).max() < 1e-12


def test_astype_and_checkpoint_round_trip(tmp_path):
    cfg = _tiny()
    g = build_generator(cfg, 32, 32).astype(np.float32)
    assert all(v.dtype == np.float32 for _, v in g.state())
    save_checkpoint(tmp_path / "g.ckpt", g)
    h = build_generator(_tiny(), 32, 32).astype(np.float32)
    h.load_state([(k, np.zeros_like(v)) for k, v in h.state()])
    load_checkpoint(tmp_path / "g.ckpt", h)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(g.state(), h.state()))


def test_load_state_rejects_mismatch():
    g = build_generator(_tiny(), 32, 32)
    with pytest.raises(GeneratorError):
        g.load_state(g.state()[:-1])
    blocks = g.state()
    blocks[0] = (blocks[0][0], np.zeros((1, 1)))
    with pytest.raises(GeneratorError):
        g.load_state(blocks)
