import math

import numpy as np
import pytest

from bpfpn_lab.errors import ParameterError, ShapeError
from bpfpn_lab.synth import (
    SceneConfig, box_blur, disc_pixels, downsample_mask, generate, load_dataset, make_dataset,
    scene_configs,
)


def test_no_targets_empty_mask():
    assert not generate(SceneConfig(n_targets=0, seed=3)).mask.any()


def test_unit_peak_at_center():
    s = generate(SceneConfig(n_targets=1, target_sigma=1.0, target_amplitude=1.0, clutter_scale=0.0, seed=4))
    y, x, *_ = s.centers[0]
    assert s.image[0, 0, y, x] == 1.0
    assert s.image.max() == 1.0


def test_mask_density_bound():
    bound = 2 * math.pi * 2.0**2 / 64**2
    for seed in range(20):
        s = generate(SceneConfig(size=64, n_targets=2, target_sigma=1.0, seed=seed))
        assert s.mask.mean() <= bound


def test_targets_separated_and_inside():
    s = generate(SceneConfig(size=64, n_targets=4, target_sigma=1.0, seed=1))
    pts = [(y, x) for y, x, *_ in s.centers]
    for i, a in enumerate(pts):
        assert 4 <= a[0] < 60 and 4 <= a[1] < 60
        for b in pts[i + 1:]:
            assert math.dist(a, b) >= 6 * 1.0


def test_image_range_and_determinism():
    a = generate(SceneConfig(n_targets=3, seed=11))
    b = generate(SceneConfig(n_targets=3, seed=11))
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert a.image.tobytes() == b.image.tobytes()


@pytest.mark.parametrize("kw", [
    {"size": 48}, {"n_targets": 5}, {"target_sigma": 2.0}, {"target_amplitude": 0.1},
    {"clutter_scale": 0.9}, {"size": 32, "n_targets": 4, "target_sigma": 1.5},
])
def test_invalid_configs(kw):
    with pytest.raises(ParameterError):
        SceneConfig(**kw).validate()


def test_disc_pixels():
    assert disc_pixels(2.0) == 9
    assert disc_pixels(1.0) == 1


def test_box_blur_preserves_constant():
    plane = np.full((10, 10), 0.3)
    assert np.allclose(box_blur(plane, 2), 0.3, rtol=0, atol=1e-15)


def test_downsample():
    assert not downsample_mask(np.zeros((1, 1, 16, 16))).any()
    m = np.zeros((1, 1, 16, 16))
    m[0, 0, 8, 8] = 1
    coarse = downsample_mask(m, 8)
    assert coarse.sum() == 1 and coarse[0, 0, 1, 1] == 1
    with pytest.raises(ShapeError):
        downsample_mask(np.zeros((1, 1, 12, 12)), 8)


def test_downsample_monotone():
    for seed in range(5):
        s = generate(SceneConfig(n_targets=3, seed=seed))
        coarse = downsample_mask(s.mask)
        assert coarse.sum() >= len(s.centers)
        assert coarse.mean() >= s.mask.mean()


def test_dataset_round_trip_and_regeneration(tmp_path):
    configs = scene_configs(100, SceneConfig(size=32), seed=5, max_targets=2)
    rows = make_dataset(configs, tmp_path / "a")
    assert len(rows) == 100
    loaded = load_dataset(tmp_path / "a")
    assert len(loaded) == len(list((tmp_path / "a").glob("*_image.gft")))
    again = make_dataset(scene_configs(100, SceneConfig(size=32), seed=5, max_targets=2), tmp_path / "b")
    assert rows == again
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    img, mask, row = loaded[0]
    assert img.shape == mask.shape == (1, 1, 32, 32)
    assert row["n_targets"] == configs[0].n_targets


def test_missing_mask_is_io_error(tmp_path):
    make_dataset(scene_configs(2, SceneConfig(size=32), seed=0, max_targets=2), tmp_path)
    (tmp_path / "scene_00001_mask.gft").unlink()
    with pytest.raises(OSError):
        load_dataset(tmp_path)


def test_scene_configs_counts():
    cfgs = scene_configs(50, SceneConfig(), seed=0, max_targets=3)
    assert {c.n_targets for c in cfgs} <= {1, 2, 3}
    assert len({c.seed for c in cfgs}) == 50
