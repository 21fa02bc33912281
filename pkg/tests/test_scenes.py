import numpy as np
import pytest

from phasecode.optics import OpticsConfig, depth_to_psi
from phasecode.scenes import (SceneSpec, SceneSpecError, deblur_specs, make_synthetic, scene_digest,
                              suite_specs)


def test_single_layer_at_focus_distance_is_zero_psi():
    cfg = OpticsConfig()
    z = cfg.focus_distance
    sc = make_synthetic(SceneSpec(height=32, width=48, layers=1, depth_range=(z, z)), cfg)
    assert np.allclose(sc.psi_map, 0.0, atol=1e-12)


@pytest.mark.parametrize("texture", ["noise", "checker"])
def test_layer_count_gives_distinct_values(texture):
    sc = make_synthetic(SceneSpec(height=48, width=64, layers=2, texture=texture, seed=2))
    vals = np.unique(sc.psi_map)
    assert len(vals) == 2
    assert np.diff(vals)[0] >= 1.0
    assert sc.image.min() >= 0 and sc.image.max() <= 1


def test_explicit_psi_values_and_depth_range():
    sc = make_synthetic(SceneSpec(height=32, width=32, layers=3, psi_values=(-2.0, 1.0, 5.0), seed=1))
    assert set(np.unique(sc.psi_map)) <= {-2.0, 1.0, 5.0}
    assert -2.0 in sc.psi_map
    cfg = OpticsConfig()
    sc = make_synthetic(SceneSpec(height=32, width=32, layers=2, depth_range=(0.9, 1.5), seed=4), cfg)
    lo, hi = depth_to_psi(1.5, cfg), depth_to_psi(0.9, cfg)
    assert sc.psi_map.min() >= lo - 1e-12 and sc.psi_map.max() <= hi + 1e-12


def test_suite_is_deterministic():
    specs = suite_specs(32, 64)
    assert [s.seed for s in specs] == [1, 2, 3, 4, 5]
    assert [s.layers for s in specs] == [2, 3, 4, 5, 6]
    first = [scene_digest(make_synthetic(s)) for s in specs]
    assert first == [scene_digest(make_synthetic(s)) for s in suite_specs(32, 64)]
    assert len(set(first)) == 5


def test_deblur_specs_are_constant_psi():
    for spec in deblur_specs(32, 32):
        assert np.all(make_synthetic(spec).psi_map == -4.0)


def test_image_texture(rng):
    src = rng.uniform(size=(3, 20, 20))
    sc = make_synthetic(SceneSpec(height=32, width=40, layers=1, texture="image", image_path="unused", seed=0),
                        source_image=src)
    assert sc.image.shape == (3, 32, 40)
    assert sc.image.min() >= 0 and sc.image.max() <= 1


@pytest.mark.parametrize("bad", [
    dict(height=8), dict(layers=0), dict(texture="perlin"), dict(texture="image"),
    dict(layers=2, psi_values=(1.0,)), dict(depth_range=(-1.0, 2.0)), dict(depth_range=(2.0, 1.0)),
    dict(psi_range=(3.0, 1.0)),
])
def test_spec_rejects(bad):
    with pytest.raises(SceneSpecError):
        SceneSpec(**bad)


def test_unplaceable_layers():
    with pytest.raises(SceneSpecError):
        make_synthetic(SceneSpec(height=32, width=32, layers=6, psi_range=(0.0, 2.0)))


def test_spec_round_trip():
    s = SceneSpec(layers=3, psi_values=(0.0, 1.0, 2.0))
    assert SceneSpec.from_dict(s.to_dict()) == s
    with pytest.raises(SceneSpecError):
        SceneSpec.from_dict({"depth": 1})
