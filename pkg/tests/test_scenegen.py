import numpy as np
import pytest

from kao.errors import ConfigError, DataError
from kao.grid import SeededRng
from kao.imageio import quantize, read_image, read_mask
from kao.kernel import hsv_map
from kao.scenegen import (BOUNDARY_LEVEL, ROAD_LEVEL, SceneSpec, generate_eval_pair, generate_scene,
                          load_dataset, read_manifest, scene_kind, write_dataset)

from oracles import count_regions, quantize_byte


def test_determinism_per_seed():
    for kind in ("roads", "fields"):
        a = generate_scene(SceneSpec(kind=kind), SeededRng(7))
        b = generate_scene(SceneSpec(kind=kind), SeededRng(7))
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, generate_scene(SceneSpec(kind=kind), SeededRng(8)))


def test_roads_bimodal():
    img = generate_scene(SceneSpec(kind="roads"), SeededRng(1))
    assert np.any(img == np.float32(ROAD_LEVEL))
    assert np.any(img < 0.3)


@pytest.mark.parametrize("seed", range(10))
def test_fields_region_count_by_flood_fill(seed):
    img = generate_scene(SceneSpec(kind="fields", plot_count=5), SeededRng(seed))
    q, _ = quantize(img[0])
    assert count_regions(q, quantize_byte(BOUNDARY_LEVEL)) == 5


@pytest.mark.parametrize("kind", ["roads", "fields"])
@pytest.mark.parametrize("channels", [1, 3])
def test_normalised_range(kind, channels):
    for seed in range(20):
        img = generate_scene(SceneSpec(kind=kind, channels=channels), SeededRng(seed))
        assert img.shape == (channels, 32, 32) and img.dtype == np.float32
        assert img.min() >= -1 and img.max() <= 1


def test_roads_have_higher_structural_variance():
    def mean_hsv(kind):
        return np.mean([hsv_map(generate_scene(SceneSpec(kind=kind), SeededRng(s)), 3, 0.0).mean()
                        for s in range(30)])

    assert mean_hsv("roads") > 1.5 * mean_hsv("fields")


def test_eval_pair_coverage():
    for seed in range(50):
        img, m = generate_eval_pair(SceneSpec(kind="roads"), 0.4, SeededRng(seed))
        assert m.shape == (1, 32, 32)
        assert 0.38 <= 1.0 - m.mean() <= 0.42
    _, m = generate_eval_pair(SceneSpec(), 0.01, SeededRng(0))
    assert 0 < 1.0 - m.mean() <= 0.03
    a = generate_eval_pair(SceneSpec(), 0.4, SeededRng(3))
    b = generate_eval_pair(SceneSpec(), 0.4, SeededRng(3))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_spec_validation():
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(size=8), SeededRng(0))
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(kind="forest"), SeededRng(0))
    with pytest.raises(ConfigError):
        scene_kind("forest", 0)
    assert [scene_kind("mixed", i) for i in range(3)] == ["roads", "fields", "roads"]


def test_impossible_layout_reported():
    with pytest.raises(DataError):
        generate_scene(SceneSpec(kind="fields", size=16, plot_count=200), SeededRng(0))


def test_dataset_files_and_manifest(tmp_path):
    names = write_dataset(tmp_path / "d", SceneSpec(), 4, seed=3, kind="mixed", mask_ratio=0.4)
    rows = read_manifest(tmp_path / "d")
    assert [r[0] for r in rows] == names and [r[2] for r in rows] == ["roads", "fields", "roads", "fields"]
    for name, seed, kind in rows:
        img = generate_scene(SceneSpec(kind=kind), SeededRng(seed).stream(0))
        np.testing.assert_array_equal(quantize(read_image(tmp_path / "d" / name))[0], quantize(img)[0])
    images, masks = load_dataset(tmp_path / "d", with_masks=True)
    assert images.shape == (4, 1, 32, 32) and masks.shape == (4, 1, 32, 32)
    assert set(np.unique(read_mask(tmp_path / "d" / "scene_00000_mask.pgm"))) == {0.0, 1.0}
    write_dataset(tmp_path / "e", SceneSpec(), 4, seed=3, kind="mixed", mask_ratio=0.4)
    for f in sorted((tmp_path / "d").iterdir()):
        assert f.read_bytes() == (tmp_path / "e" / f.name).read_bytes()


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path)
