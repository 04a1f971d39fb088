"""Raster round trips, trimap tolerance bands, layout helpers."""

import numpy as np
import pytest
import torch

from invcomp import images
from invcomp.compositing import TRIMAP_BACKGROUND, TRIMAP_FOREGROUND, TRIMAP_UNKNOWN
from invcomp.errors import FormatError, ValidationError


class TestRoundTrips:
    @pytest.mark.parametrize("bits,tol", [(8, 1 / 255), (16, 1 / 65535)])
    def test_rgb_file_round_trip(self, tmp_path, bits, tol):
        rng = np.random.default_rng(0)
        arr = rng.uniform(0, 1, (20, 30, 3)).astype(np.float32)
        path = tmp_path / "x.png"
        images.save_rgb(path, arr, bits=bits)
        back = images.load_rgb(path)
        assert back.shape == arr.shape
        assert np.abs(back - arr).max() <= tol / 2 + 1e-7

    @pytest.mark.parametrize("bits,tol", [(8, 1 / 255), (16, 1 / 65535)])
    def test_gray_file_round_trip(self, tmp_path, bits, tol):
        rng = np.random.default_rng(1)
        arr = rng.uniform(0, 1, (16, 24)).astype(np.float32)
        path = tmp_path / "g.png"
        images.save_gray(path, arr, bits=bits)
        back = images.load_gray(path)
        assert np.abs(back - arr).max() <= tol / 2 + 1e-7

    def test_in_memory_png_round_trip(self):
        rng = np.random.default_rng(2)
        arr = rng.uniform(0, 1, (10, 12, 3)).astype(np.float32)
        back = images.decode_png(images.encode_png(arr, bits=16))
        assert np.abs(back - arr).max() <= 1 / 65535 / 2 + 1e-7

    def test_quantization_is_exact_at_grid_points(self):
        arr = np.linspace(0, 1, 256, dtype=np.float32).reshape(16, 16)
        back = images.decode_png(images.encode_png(arr, bits=8))
        assert np.array_equal(back, arr)

    def test_decode_garbage_rejected(self):
        with pytest.raises(FormatError):
            images.decode_png(b"not a png")

    def test_load_missing_file_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            images.load_rgb(tmp_path / "nope.png")


class TestTrimapEncoding:
    def test_save_load_exact_codes(self, tmp_path):
        trimap = np.array(
            [[TRIMAP_BACKGROUND, TRIMAP_UNKNOWN], [TRIMAP_FOREGROUND, TRIMAP_UNKNOWN]],
            dtype=np.uint8,
        )
        path = tmp_path / "t.png"
        images.save_trimap(path, trimap)
        assert np.array_equal(images.load_trimap(path), trimap)

    def test_tolerance_bands(self, tmp_path):
        import cv2

        raw = np.array([[0, 25, 26], [128, 229, 230], [255, 100, 180]], dtype=np.uint8)
        path = tmp_path / "t.png"
        cv2.imwrite(str(path), raw)
        trimap = images.load_trimap(path)
        expected = np.array(
            [
                [TRIMAP_BACKGROUND, TRIMAP_BACKGROUND, TRIMAP_UNKNOWN],
                [TRIMAP_UNKNOWN, TRIMAP_UNKNOWN, TRIMAP_FOREGROUND],
                [TRIMAP_FOREGROUND, TRIMAP_UNKNOWN, TRIMAP_UNKNOWN],
            ],
            dtype=np.uint8,
        )
        assert np.array_equal(trimap, expected)

    def test_sixteen_bit_trimap_scaled_bands(self, tmp_path):
        import cv2

        raw = np.array([[0, 65535, 32768]], dtype=np.uint16)
        path = tmp_path / "t16.png"
        cv2.imwrite(str(path), raw)
        trimap = images.load_trimap(path)
        assert trimap[0, 0] == TRIMAP_BACKGROUND
        assert trimap[0, 1] == TRIMAP_FOREGROUND
        assert trimap[0, 2] == TRIMAP_UNKNOWN


class TestLayoutHelpers:
    def test_chw_hwc_round_trip(self):
        rng = np.random.default_rng(3)
        arr = rng.uniform(0, 1, (7, 9, 3)).astype(np.float32)
        assert np.array_equal(images.hwc(images.chw(arr)), arr)

    def test_gray_becomes_single_channel(self):
        arr = np.zeros((4, 5), dtype=np.float32)
        t = images.chw(arr)
        assert t.shape == (1, 4, 5)
        assert images.hwc(t).shape == (4, 5)

    def test_hwc_rejects_batches(self):
        with pytest.raises(ValidationError):
            images.hwc(torch.zeros(2, 3, 4, 4))

    def test_preview_downsample_caps_long_side(self):
        arr = np.zeros((300, 2200, 3), dtype=np.float32)
        small = images.downsample_preview(arr, max_side=1024)
        assert max(small.shape[:2]) == 1024
        untouched = images.downsample_preview(arr[:300, :800], max_side=1024)
        assert untouched.shape == (300, 800, 3)
