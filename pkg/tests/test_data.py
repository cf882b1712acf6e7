import numpy as np
import pytest
from PIL import Image

from lcaenet.data import (Sample, SynthSpec, load_dataset, load_sample, pad_crop, random_flip, read_manifest,
                          sample_rng, stack_batch, standardize, synth_dataset, synth_generate, target_mask,
                          write_manifest, write_sample, write_synth_dataset)
from lcaenet.errors import DimensionError, InputError
from lcaenet.metrics import connected_components


def test_centered_sigma_one_target_is_radius_two_disc():
    s = synth_generate(SynthSpec(centers=((32.0, 32.0),), sigma=(1.0, 1.0), pixel_noise=0))
    rows, cols = np.nonzero(s.mask)
    assert s.mask.sum() == 13
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (30, 34, 30, 34)
    np.testing.assert_array_equal(s.mask, target_mask((64, 64), (32, 32), 1.0))


def test_zero_targets_gives_empty_masks():
    for s in synth_dataset(5, SynthSpec(targets=0)):
        assert s.mask.sum() == 0


def test_generation_is_deterministic():
    a = synth_generate(SynthSpec(seed=9))
    b = synth_generate(SynthSpec(seed=9))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    c = synth_dataset(3, seed=2)
    d = synth_dataset(3, seed=2)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(c, d))


def test_per_sample_streams_ignore_order():
    batch = synth_dataset(4, seed=5)
    single = synth_generate(SynthSpec(), sample_rng(5, 3), "synth_00003")
    assert np.array_equal(batch[3].image, single.image)


def test_targets_small_and_counted():
    for s in synth_dataset(40, SynthSpec(targets=(1, 2)), seed=1):
        comps = connected_components(s.mask)
        assert 1 <= len(comps) <= 2
        for comp in comps:
            rows = [p[0] for p in comp.pixels]
            cols = [p[1] for p in comp.pixels]
            assert max(rows) - min(rows) + 1 <= 9 and max(cols) - min(cols) + 1 <= 9
            assert comp.area < 0.0015 * 256 * 256


def test_targets_are_brighter_than_surroundings():
    s = synth_generate(SynthSpec(centers=((20.0, 20.0),), amplitude=(100, 100), clutter_prob=0, pixel_noise=0))
    assert s.image[20, 20] > s.image[20, 30] + 50


def test_impossible_placement():
    with pytest.raises(ValueError):
        synth_generate(SynthSpec(size=(8, 8), targets=1, sigma=(2.0, 2.0)))


@pytest.mark.parametrize("kwargs", [dict(targets=(2, 1)), dict(sigma=(0.1, 1.0)), dict(amplitude=(0, 1))])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SynthSpec(**kwargs)


def test_augmentation_moves_image_and_mask_together():
    h, w = 20, 14
    grid = np.arange(h * w, dtype=np.float64).reshape(h, w)
    sample = Sample(grid, (grid.astype(int) % 7 == 0).astype(np.uint8), "grid")
    for seed in range(20):
        rng = np.random.default_rng(seed)
        out = random_flip(pad_crop(sample, rng, 16, train=True), rng)
        np.testing.assert_array_equal(out.mask, (out.image.astype(int) % 7 == 0).astype(np.uint8))


def test_pad_crop_edge_and_center():
    img = np.arange(12, dtype=np.float64).reshape(3, 4)
    out = pad_crop(Sample(img, np.zeros((3, 4))), None, 6, train=False)
    assert out.image.shape == (6, 6)
    assert out.image[0, 0] == img[0, 0]          # replicated corner
    assert out.image[-1, -1] == img[-1, -1]
    big = np.arange(100, dtype=np.float64).reshape(10, 10)
    centre = pad_crop(Sample(big, np.zeros((10, 10))), None, 4, train=False)
    np.testing.assert_array_equal(centre.image, big[3:7, 3:7])


def test_standardize_idempotent(rng):
    x = rng.uniform(0, 255, (16, 16))
    s = standardize(x)
    assert abs(s.mean()) < 1e-12 and s.std() == pytest.approx(1.0)
    np.testing.assert_allclose(standardize(s), s, atol=1e-6)
    assert np.all(standardize(np.full((4, 4), 7.0)) == 0)


def test_disk_roundtrip(tmp_path):
    samples = synth_dataset(3, seed=4)
    for s in samples:
        write_sample(tmp_path, s)
    write_manifest(tmp_path, [(s.id, "train") for s in samples])
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.image - b.image)) <= 0.5
    raw = np.asarray(Image.open(tmp_path / "masks" / f"{samples[0].id}.png"))
    assert set(np.unique(raw)) <= {0, 255}


def test_mask_threshold_and_16bit(tmp_path):
    Image.fromarray(np.array([[127, 128]], dtype=np.uint8)).save(tmp_path / "m.png")
    Image.fromarray(np.array([[0, 65535]], dtype=np.uint16)).save(tmp_path / "i.png")
    s = load_sample(tmp_path / "i.png", tmp_path / "m.png")
    np.testing.assert_array_equal(s.mask, [[0, 1]])
    np.testing.assert_allclose(s.image, [[0, 255]])
    assert s.id == "i"


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_sample(tmp_path / "nope.png", tmp_path / "nope.png")
    (tmp_path / "bad.png").write_bytes(b"garbage")
    with pytest.raises(InputError):
        load_sample(tmp_path / "bad.png", tmp_path / "bad.png")
    Image.fromarray(np.zeros((3, 3), np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((3, 4), np.uint8)).save(tmp_path / "b.png")
    with pytest.raises(DimensionError):
        load_sample(tmp_path / "a.png", tmp_path / "b.png")


def test_manifest_validation(tmp_path):
    with pytest.raises(ValueError):
        write_manifest(tmp_path, [("a", "val")])
    with pytest.raises(ValueError):
        write_manifest(tmp_path, [("a", "train"), ("a", "test")])
    (tmp_path / "split.txt").write_text("a\ttrain\nb\n")
    with pytest.raises(InputError):
        read_manifest(tmp_path)
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing")


def test_write_synth_dataset_split(tmp_path):
    entries = write_synth_dataset(tmp_path, 10, seed=7)
    assert [s for _, s in entries].count("test") == 2
    assert len(list((tmp_path / "images").glob("*.png"))) == 10
    assert write_synth_dataset(tmp_path / "empty", 0) == []
    assert (tmp_path / "empty" / "split.txt").read_text() == ""


def test_stack_batch(rng):
    samples = synth_dataset(3)
    x, y = stack_batch(samples)
    assert x.shape == (3, 1, 64, 64) and y.shape == (3, 1, 64, 64)
    assert abs(x[0].mean()) < 1e-9
    xr, _ = stack_batch(samples, raw=True)
    np.testing.assert_array_equal(xr[1, 0], samples[1].image)
