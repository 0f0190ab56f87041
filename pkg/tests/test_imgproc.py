import numpy as np
import pytest
from PIL import Image

from vesselseg.errors import DataError
from vesselseg.imgproc import (
    NormalizationStats,
    decode_image,
    denormalize,
    normalize,
    resize_bilinear,
    save_image,
    synth_vessels,
)


class TestDecode:
    def test_solid_red(self, tmp_path):
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        arr[:, :, 0] = 255
        Image.fromarray(arr, "RGB").save(tmp_path / "red.png")
        img = decode_image(tmp_path / "red.png")
        assert img.shape == (3, 4, 4)
        np.testing.assert_allclose(img[0], 1.0)
        np.testing.assert_allclose(img[1:], 0.0)

    def test_save_decode_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 6, 5))
        save_image(img, tmp_path / "x.png")
        back = decode_image(tmp_path / "x.png")
        assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-12

    def test_grayscale_rejected(self, tmp_path):
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), "L").save(tmp_path / "g.png")
        with pytest.raises(DataError, match="RGB"):
            decode_image(tmp_path / "g.png")


class TestResize:
    def test_identity(self):
        rng = np.random.default_rng(1)
        img = rng.random((3, 7, 9))
        np.testing.assert_array_equal(resize_bilinear(img, 7, 9), img)

    def test_constant_any_size(self):
        img = np.full((3, 8, 8), 0.37)
        np.testing.assert_allclose(resize_bilinear(img, 3, 5), 0.37, rtol=1e-12)

    def test_checkerboard_to_single_pixel(self):
        img = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        out = resize_bilinear(img, 1, 1)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_idempotent_at_fixed_size(self):
        rng = np.random.default_rng(2)
        img = rng.random((3, 32, 32))
        once = resize_bilinear(img, 12, 20)
        twice = resize_bilinear(once, 12, 20)
        np.testing.assert_array_equal(once, twice)

    def test_output_within_input_range(self):
        rng = np.random.default_rng(3)
        img = rng.random((3, 16, 16))
        out = resize_bilinear(img, 40, 9)
        for c in range(3):
            assert out[c].min() >= img[c].min() - 1e-12
            assert out[c].max() <= img[c].max() + 1e-12


class TestNormalize:
    def test_pixel_at_mean_is_zero(self):
        stats = NormalizationStats()
        img = np.ones((3, 2, 2)) * np.asarray(stats.mean).reshape(3, 1, 1)
        np.testing.assert_allclose(normalize(img, stats), 0.0, atol=1e-15)

    def test_round_trip(self):
        stats = NormalizationStats()
        rng = np.random.default_rng(4)
        img = rng.random((3, 5, 5))
        np.testing.assert_allclose(denormalize(normalize(img, stats), stats), img, rtol=1e-12)

    def test_scalar_case(self):
        stats = NormalizationStats(mean=(0.5, 0.5, 0.5), std=(0.2, 0.2, 0.2))
        img = np.full((3, 1, 1), 0.8)
        np.testing.assert_allclose(normalize(img, stats), 1.5, rtol=1e-12)

    def test_order_preserved_per_channel(self):
        stats = NormalizationStats()
        rng = np.random.default_rng(5)
        img = rng.random((3, 8, 8))
        out = normalize(img, stats)
        for c in range(3):
            assert np.argmax(img[c]) == np.argmax(out[c])

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            NormalizationStats(std=(0.1, 0.0, 0.1))


class TestSynth:
    def test_deterministic(self):
        a = synth_vessels(seed=42, count=3, h=48, w=48)
        b = synth_vessels(seed=42, count=3, h=48, w=48)
        for (ia, ma), (ib, mb) in zip(a, b):
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_array_equal(ma, mb)

    def test_foreground_fraction_bounds(self):
        for img, mask in synth_vessels(seed=7, count=8, h=64, w=64):
            frac = mask.sum() / mask.size
            assert 0.01 <= frac <= 0.25

    def test_count_and_nonempty(self):
        pairs = synth_vessels(seed=1, count=8, h=64, w=64)
        assert len(pairs) == 8
        assert all(m.sum() > 0 for _, m in pairs)

    def test_background_majority(self):
        for _, mask in synth_vessels(seed=3, count=4, h=64, w=64):
            assert mask.sum() < mask.size / 2

    def test_vessels_darker_than_background(self):
        img, mask = synth_vessels(seed=9, count=1, h=64, w=64)[0]
        fg = img[:, mask == 1].mean()
        bg = img[:, mask == 0].mean()
        assert fg < bg - 0.15

    def test_size_validation(self):
        with pytest.raises(ValueError):
            synth_vessels(seed=0, count=1, h=16, w=64)
        with pytest.raises(ValueError):
            synth_vessels(seed=0, count=0, h=64, w=64)
