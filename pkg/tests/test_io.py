import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdrtone.errors import DegenerateImageError, FormatError
from hdrtone.io import (
    HdrImage,
    LdrImage,
    LuminanceMap,
    calibrate,
    color_reproduce,
    decode_hdr,
    extract_luminance,
    load_pfm,
    load_png,
    load_radiance_hdr,
    save_pfm,
    save_png,
    save_radiance_hdr,
)
from hdrtone.io import _float_to_rgbe, _rgbe_to_float


def _hdr_bytes(pixels, w, h, magic=b"#?RADIANCE", fmt=b"32-bit_rle_rgbe"):
    """Flat (non-RLE) Radiance stream from a list of RGBE quadruples."""
    head = magic + b"\nFORMAT=" + fmt + b"\n\n" + f"-Y {h} +X {w}\n".encode()
    return head + b"".join(bytes(p) for p in pixels)


class TestRadianceRgbe:
    def test_zero_exponent_decodes_black(self):
        img = load_radiance_hdr(_hdr_bytes([(0, 0, 0, 0)], 1, 1))
        assert np.all(img.rgb == 0.0)

    def test_midrange_pixel_decode(self):
        # (m + 0.5) / 256 * 2**(e - 128) with m = e = 128
        img = load_radiance_hdr(_hdr_bytes([(128, 128, 128, 128)], 1, 1))
        np.testing.assert_allclose(img.rgb[0, 0], 0.501953125, rtol=0, atol=0)

    def test_rgbe_magic_accepted(self):
        img = load_radiance_hdr(_hdr_bytes([(0, 0, 0, 0)], 1, 1, magic=b"#?RGBE"))
        assert img.width == 1 and not img.units_calibrated

    def test_flat_roundtrip_2x2_within_quantization(self, make_lum):
        # channel ratios >= 0.5 keep every mantissa above 64, i.e. <1% error
        rgb = make_lum(0, 2, 2, dynamic_range=50)[:, :, None] * [1.0, 0.8, 0.55]
        back = load_radiance_hdr(save_radiance_hdr(HdrImage(rgb)))
        np.testing.assert_allclose(back.rgb, rgb, rtol=0.01)

    def test_rle_roundtrip_within_quantization(self, make_lum):
        rgb = make_lum(1, 6, 24, dynamic_range=1e4)[:, :, None] * [1.0, 0.9, 0.6]
        rgb[2, 3:20] = rgb[2, 3]  # force a literal->run transition
        data = save_radiance_hdr(HdrImage(rgb))
        # width 24 must take the RLE path: scanline starts with 2, 2, hi, lo
        body = data.split(b"+X 24\n", 1)[1]
        assert body[:4] == bytes([2, 2, 0, 24])
        back = load_radiance_hdr(data)
        np.testing.assert_allclose(back.rgb, rgb, rtol=0.01)

    def test_roundtrip_black_exact(self):
        rgb = np.zeros((3, 9, 3))
        back = load_radiance_hdr(save_radiance_hdr(HdrImage(rgb)))
        assert np.all(back.rgb == 0)

    def test_malformed_header_rejected(self):
        with pytest.raises(FormatError):
            load_radiance_hdr(b"not an hdr file\n\n-Y 1 +X 1\n" + bytes(4))

    def test_unsupported_format_rejected(self):
        data = _hdr_bytes([(0, 0, 0, 0)], 1, 1, fmt=b"32-bit_rle_xyze")
        with pytest.raises(FormatError, match="FORMAT"):
            load_radiance_hdr(data)

    def test_truncated_scanline_rejected(self):
        data = _hdr_bytes([(1, 2, 3, 130)], 2, 1)  # promises 2 pixels, has 1
        with pytest.raises(FormatError, match="truncated"):
            load_radiance_hdr(data)

    def test_missing_format_rejected(self):
        data = b"#?RADIANCE\nEXPOSURE=1\n\n-Y 1 +X 1\n" + bytes(4)
        with pytest.raises(FormatError, match="FORMAT"):
            load_radiance_hdr(data)

    def test_encode_decode_scalar_pair(self):
        rgbe = _float_to_rgbe(np.array([[1.0, 0.9, 0.5]]))
        dec = _rgbe_to_float(rgbe)[0]
        np.testing.assert_allclose(dec, [1.0, 0.9, 0.5], rtol=0.01)


class TestPfm:
    def test_gray_1x1(self):
        data = b"Pf\n1 1\n-1.0\n" + np.float32(1.0).tobytes()
        img = load_pfm(data)
        assert img.rgb.shape == (1, 1, 3)
        np.testing.assert_allclose(extract_luminance(img).lum, [[1.0]])

    def test_negative_scale_magnitude_multiplies(self):
        data = b"Pf\n1 1\n-2.0\n" + np.float32(1.5).tobytes()
        img = load_pfm(data)
        np.testing.assert_allclose(img.rgb[0, 0], 3.0)

    def test_color_2x1_shape(self):
        floats = np.arange(6, dtype="<f4").tobytes()
        img = load_pfm(b"PF\n2 1\n-1.0\n" + floats)
        assert img.rgb.shape == (1, 2, 3)

    def test_positive_scale_is_big_endian(self):
        data = b"Pf\n1 1\n1.0\n" + np.array([2.0], dtype=">f4").tobytes()
        np.testing.assert_allclose(load_pfm(data).rgb[0, 0], 2.0)

    def test_rows_bottom_up(self):
        vals = np.array([[1.0], [2.0]])  # top row 1, bottom row 2
        img = load_pfm(save_pfm(vals))
        np.testing.assert_array_equal(img.rgb[:, :, 0], vals)

    def test_roundtrip_exact(self, make_rgb):
        rgb = make_rgb(2, 5, 7).astype(np.float32)
        back = load_pfm(save_pfm(rgb))
        np.testing.assert_array_equal(back.rgb, rgb.astype(np.float64))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            load_pfm(b"P6\n1 1\n255\n\x00\x00\x00")

    def test_dimension_overflow(self):
        with pytest.raises(FormatError):
            load_pfm(b"Pf\n100000 100000\n-1.0\n")

    def test_short_payload(self):
        with pytest.raises(FormatError, match="short"):
            load_pfm(b"Pf\n2 2\n-1.0\n" + bytes(8))


class TestPng:
    def test_endpoints(self):
        img = LdrImage(np.array([[0.0, 1.0]]))
        decoded = load_png(save_png(img)).values
        np.testing.assert_array_equal(decoded, [[0.0, 1.0]])

    def test_gamma_encoding_of_half(self):
        data = save_png(LdrImage(np.array([[0.5]])), gamma_encode=True)
        byte = np.rint(load_png(data).values[0, 0] * 255)
        assert byte == 186  # round(0.5 ** (1/2.2) * 255)

    def test_rgb_roundtrip(self, rng):
        v = rng.uniform(0, 1, (4, 5, 3))
        q = np.rint(v * 255) / 255
        np.testing.assert_allclose(load_png(save_png(LdrImage(v))).values, q)


class TestLuminance:
    def test_white_is_one(self):
        img = HdrImage(np.ones((2, 2, 3)))
        np.testing.assert_allclose(extract_luminance(img).lum, 1.0)

    def test_red_weight(self):
        rgb = np.zeros((1, 1, 3))
        rgb[..., 0] = 1.0
        np.testing.assert_allclose(extract_luminance(HdrImage(rgb)).lum, 0.2126)

    def test_black_maps_to_zero(self):
        assert np.all(extract_luminance(HdrImage(np.zeros((3, 4, 3)))).lum == 0)

    def test_linearity(self, make_rgb):
        rgb = make_rgb(3, 6, 6)
        a = 3.7
        lhs = extract_luminance(HdrImage(a * rgb)).lum
        rhs = a * extract_luminance(HdrImage(rgb)).lum
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


class TestCalibrate:
    def test_unit_range_maps_to_endpoints(self):
        out = calibrate(LuminanceMap(np.array([[0.0, 1.0]])), 5, 1e4)
        np.testing.assert_array_equal(out.lum, [[5.0, 1e4]])
        assert out.calibrated

    def test_three_point_linear_map(self):
        out = calibrate(LuminanceMap(np.array([[2.0, 4.0, 6.0]])), 5, 105)
        np.testing.assert_allclose(out.lum, [[5.0, 55.0, 105.0]])

    def test_normalized_input_affine_identity(self, rng):
        lum = rng.uniform(0, 1, (4, 4))
        lum.flat[0], lum.flat[-1] = 0.0, 1.0
        out = calibrate(LuminanceMap(lum), 5, 300)
        np.testing.assert_allclose(out.lum, 5 + 295 * lum, rtol=1e-12)

    def test_constant_input_rejected(self):
        with pytest.raises(DegenerateImageError):
            calibrate(LuminanceMap(np.full((3, 3), 2.0)), 5, 300)

    def test_bad_range_rejected(self):
        with pytest.raises(ValueError):
            calibrate(LuminanceMap(np.array([[0.0, 1.0]])), 10, 5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=30),
           st.sampled_from([(5.0, 300.0), (5.0, 1e4), (1.0, 2.0)]))
    def test_monotone_with_exact_range(self, values, bounds):
        arr = np.array(values).reshape(1, -1)
        if arr.max() == arr.min():
            return
        s_min, s_max = bounds
        out = calibrate(LuminanceMap(arr), s_min, s_max).lum.ravel()
        order = np.argsort(arr.ravel(), kind="stable")
        assert np.all(np.diff(out[order]) >= 0)
        assert out.min() == s_min and out.max() == s_max


class TestColorReproduce:
    def test_gray_scene_identity_at_rho_one(self):
        rgb = np.full((2, 2, 3), 0.7)
        s = LuminanceMap(np.full((2, 2), 0.7))
        f = LuminanceMap(np.full((2, 2), 0.4))
        out = color_reproduce(HdrImage(rgb), s, f, rho=1.0)
        np.testing.assert_allclose(out.values, 0.4)

    def test_rho_zero_desaturates(self, make_rgb):
        rgb = make_rgb(4, 3, 3, dynamic_range=10)
        s = extract_luminance(HdrImage(rgb))
        f = LuminanceMap(np.random.default_rng(0).uniform(0.1, 0.9, (3, 3)))
        out = color_reproduce(HdrImage(rgb), s, f, rho=0.0).values
        np.testing.assert_allclose(out[..., 0], f.lum)
        np.testing.assert_allclose(out[..., 1], f.lum)
        np.testing.assert_allclose(out[..., 2], f.lum)

    def test_scalar_evaluation(self):
        rgb = np.array([[[0.5, 0.25, 0.25]]])
        s = LuminanceMap(np.array([[0.40525]]))
        f = LuminanceMap(np.array([[0.5]]))
        out = color_reproduce(HdrImage(rgb), s, f, rho=0.6).values
        expected_r = (0.5 / 0.40525) ** 0.6 * 0.5
        np.testing.assert_allclose(out[0, 0, 0], min(expected_r, 1.0), rtol=1e-12)

    def test_zero_luminance_pixel_goes_gray(self):
        rgb = np.zeros((1, 2, 3))
        rgb[0, 1] = [0.2, 0.3, 0.4]
        s = LuminanceMap(np.array([[0.0, 0.3]]))
        f = LuminanceMap(np.array([[0.25, 0.5]]))
        out = color_reproduce(HdrImage(rgb), s, f, rho=0.6).values
        np.testing.assert_allclose(out[0, 0], 0.25)

    def test_output_always_in_unit_interval(self, make_rgb):
        rgb = make_rgb(5, 8, 8, dynamic_range=1e4)
        s = extract_luminance(HdrImage(rgb))
        f = LuminanceMap(np.random.default_rng(1).uniform(0, 1, (8, 8)))
        out = color_reproduce(HdrImage(rgb), s, f, rho=0.6).values
        assert out.min() >= 0 and out.max() <= 1


class TestDecodeAuto:
    def test_dispatch(self, make_rgb):
        rgb = make_rgb(6, 4, 9)
        assert decode_hdr(save_pfm(rgb)).rgb.shape == (4, 9, 3)
        assert decode_hdr(save_radiance_hdr(HdrImage(rgb))).rgb.shape == (4, 9, 3)
        with pytest.raises(FormatError):
            decode_hdr(b"\x89PNG....")
