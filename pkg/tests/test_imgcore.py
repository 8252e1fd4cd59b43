import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fdattack import imgcore
from fdattack.imgcore import (
    ImageFormatError,
    ShapeMismatchError,
    check_image,
    clip_to_ball,
    decode_png,
    encode_png,
    linf_norm,
    load_image,
    quality,
    quantize,
    save_image,
    ssim,
)
from refimpl import ssim_from_definition

unit_images = arrays(
    np.float64,
    st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


class TestValidation:
    def test_promotes_grayscale(self):
        assert check_image(np.zeros((4, 5))).shape == (4, 5, 1)

    @pytest.mark.parametrize("bad", [np.zeros((4, 4, 2)), np.zeros(4), np.full((2, 2, 1), 1.5)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_image(bad)

    def test_rejects_nan(self):
        x = np.zeros((2, 2, 1))
        x[0, 0] = np.nan
        with pytest.raises(ValueError):
            check_image(x)

    def test_shape_mismatch_is_value_error(self):
        with pytest.raises(ShapeMismatchError):
            clip_to_ball(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)), 0.1)
        assert issubclass(ShapeMismatchError, ValueError)


class TestBall:
    @given(unit_images, st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
    def test_projection_lands_in_ball_and_box(self, center, radius, seed):
        cand = center + np.random.default_rng(seed).normal(0, 0.5, center.shape)
        out = clip_to_ball(center, cand, radius)
        assert linf_norm(out - center) <= radius + 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0

    @given(unit_images)
    def test_projection_is_idempotent(self, center):
        cand = np.clip(center + 0.3, 0, 1)
        once = clip_to_ball(center, cand, 0.1)
        np.testing.assert_array_equal(clip_to_ball(center, once, 0.1), once)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            clip_to_ball(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), -0.1)

    def test_linf_of_empty(self):
        assert linf_norm(np.zeros((0, 3))) == 0.0


class TestQuality:
    def test_ssim_matches_definition(self, rng):
        a = rng.uniform(0, 255, (20, 18, 3))
        b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
        assert ssim(a, b) == pytest.approx(ssim_from_definition(a, b), abs=1e-10)

    def test_ssim_matches_scikit_image(self, rng):
        skm = pytest.importorskip("skimage.metrics")
        a = rng.uniform(0, 255, (32, 32, 3))
        b = np.clip(a + rng.normal(0, 15, a.shape), 0, 255)
        # skimage averages over cropped windows with the same Gaussian weights
        ref = skm.structural_similarity(
            a, b, data_range=255, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_identical_images(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        q = quality(x, x)
        assert q.mse == 0.0 and math.isinf(q.psnr_db) and q.ssim == 1.0

    def test_psnr_known_value(self):
        a = np.zeros((16, 16, 1))
        b = np.full((16, 16, 1), 1.0 / 255.0)
        assert quality(a, b).psnr_db == pytest.approx(20 * math.log10(255.0))

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_ssim_symmetric(self, rng):
        a = rng.uniform(0, 255, (16, 16, 1))
        b = rng.uniform(0, 255, (16, 16, 1))
        assert ssim(a, b) == pytest.approx(ssim(b, a))


class TestIO:
    @given(unit_images)
    def test_png_roundtrip_equals_quantization(self, img):
        np.testing.assert_array_equal(decode_png(encode_png(img)), quantize(img))

    def test_quantize_idempotent(self, rng):
        q = quantize(rng.uniform(0, 1, (5, 5, 3)))
        np.testing.assert_array_equal(quantize(q), q)

    def test_float_container_roundtrip(self, tmp_path, rng):
        x = rng.uniform(0, 1, (7, 9, 3))
        save_image(x, tmp_path / "x.fimg")
        back = load_image(tmp_path / "x.fimg")
        np.testing.assert_array_equal(back, x.astype(np.float32).astype(np.float64))
        assert (tmp_path / "x.fimg").read_bytes()[:8] == imgcore.FLOAT_MAGIC

    def test_png_path(self, tmp_path, rng):
        x = rng.uniform(0, 1, (7, 9, 1))
        save_image(x, tmp_path / "x.png")
        np.testing.assert_array_equal(load_image(tmp_path / "x.png"), quantize(x))

    def test_truncated_container(self, tmp_path, rng):
        save_image(rng.uniform(0, 1, (4, 4, 3)), tmp_path / "x.fimg")
        data = (tmp_path / "x.fimg").read_bytes()
        (tmp_path / "y.fimg").write_bytes(data[:-4])
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "y.fimg")

    def test_garbage(self, tmp_path):
        (tmp_path / "z.bin").write_bytes(b"hello world, not an image")
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "z.bin")
        with pytest.raises(ImageFormatError):
            decode_png(b"\x89PNG\r\n\x1a\nbroken")
