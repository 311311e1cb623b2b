import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldstart.errors import (
    BoundsError,
    ConfigError,
    DegenerateInputError,
    EmptyForegroundError,
    FormatError,
    InputError,
    TruncationError,
)
from coldstart.volumes import (
    RoiBox,
    VolumeGrid,
    apply_threshold,
    crop,
    format_volume,
    otsu_threshold,
    parse_volume,
    preprocess_ct,
    preprocess_mr,
    proxy_label_ct,
    proxy_label_mr,
    read_volume,
    roi_from_mask,
    write_volume,
)

from conftest import grid, mask


def _payload(data: bytes) -> bytes:
    return data.split(b"\n", 5)[5]


class TestVolumeFile:
    def test_constant_grid_round_trip(self, tmp_path):
        g = grid(np.full((2, 2, 2), 0.5, dtype=np.float32))
        write_volume(g, tmp_path / "v.vol")
        back = read_volume(tmp_path / "v.vol")
        assert back.dims == (2, 2, 2)
        assert np.all(back.voxels == 0.5)

    def test_header_layout_is_exact(self):
        g = grid(np.zeros((3, 2, 1), dtype=np.float32), spacing=(0.5, 1.0, 2.5))
        data = format_volume(g)
        assert data.startswith(b"COLOSSAL-VOL v1\ndims: 3 2 1\nspacing: 0.5 1.0 2.5\ndtype: f32le\n\n")
        assert len(_payload(data)) == 6 * 4

    def test_payload_is_x_fastest_little_endian(self):
        arr = np.arange(24, dtype=np.float32).reshape((2, 3, 4), order="F")
        data = format_volume(grid(arr))
        flat = np.frombuffer(_payload(data), dtype="<f4")
        for z in range(4):
            for y in range(3):
                for x in range(2):
                    assert flat[x + 2 * y + 6 * z] == arr[x, y, z]

    def test_mask_uses_u8(self):
        data = format_volume(mask(np.ones((2, 2, 2))))
        assert b"dtype: u8\n" in data
        assert _payload(data) == b"\x01" * 8

    def test_truncated_payload(self):
        data = format_volume(grid(np.zeros((2, 2, 2), dtype=np.float32)))
        with pytest.raises(TruncationError):
            parse_volume(data[:-4])

    @pytest.mark.parametrize(
        "header, line",
        [
            (b"COLOSSAL-VOL v2\ndims: 1 1 1\nspacing: 1 1 1\ndtype: u8\n\n\x00", "line 1"),
            (b"COLOSSAL-VOL v1\ndim: 1 1 1\nspacing: 1 1 1\ndtype: u8\n\n\x00", "line 2"),
            (b"COLOSSAL-VOL v1\ndims: 1 1 1\nspacing: 1 -1 1\ndtype: u8\n\n\x00", "line 3"),
            (b"COLOSSAL-VOL v1\ndims: 1 1 1\nspacing: 1 1 1\ndtype: f64\n\n\x00", "line 4"),
            (b"COLOSSAL-VOL v1\ndims: 1 1 1\nspacing: 1 1 1\ndtype: u8\nx\n\x00", "line 5"),
        ],
    )
    def test_malformed_header_names_line(self, header, line):
        with pytest.raises(FormatError, match=line):
            parse_volume(header)

    def test_u8_payload_outside_mask_range(self):
        with pytest.raises(FormatError):
            parse_volume(b"COLOSSAL-VOL v1\ndims: 1 1 1\nspacing: 1 1 1\ndtype: u8\n\n\x02")

    def test_randomized_round_trips_are_byte_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(50):
            dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
            spacing = tuple(float(s) for s in rng.uniform(0.1, 3.0, size=3))
            if i % 2:
                data = format_volume(mask(rng.integers(0, 2, size=dims), spacing))
            else:
                data = format_volume(grid(rng.normal(size=dims).astype(np.float32), spacing))
            path = tmp_path / f"{i}.vol"
            path.write_bytes(data)
            assert format_volume(read_volume(path)) == data


class TestVolumeGrid:
    def test_voxels_read_only(self):
        g = grid(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            g.voxels[0, 0, 0] = 1

    def test_mask_values_checked(self):
        with pytest.raises(InputError):
            VolumeGrid(np.full((2, 2, 2), 2), kind="binary-mask")

    def test_probability_range_checked(self):
        with pytest.raises(InputError):
            VolumeGrid(np.full((2, 2, 2), 1.5), kind="probability")

    def test_spacing_checked(self):
        with pytest.raises(InputError):
            VolumeGrid(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


class TestPreprocessCT:
    def test_clipping_floor_and_midpoint(self):
        out = preprocess_ct(grid(np.array([-3000.0, 0.0, 5000.0]).reshape(3, 1, 1)))
        assert out.voxels.ravel().tolist() == [0.0, 0.5, 1.0]

    def test_matches_elementwise_formula(self, rng):
        arr = rng.uniform(-2500, 2500, size=(5, 4, 3))
        out = preprocess_ct(grid(arr, spacing=(0.7, 0.8, 2.0)))
        for idx in np.ndindex(arr.shape):
            expected = (min(max(arr[idx], -1024.0), 1024.0) + 1024.0) / 2048.0
            assert out.voxels[idx] == pytest.approx(expected, abs=1e-15)
        assert out.spacing == (0.7, 0.8, 2.0)

    def test_non_finite_reports_index(self):
        arr = np.zeros((2, 2, 2))
        arr[1, 0, 1] = np.nan
        with pytest.raises(InputError, match=r"\(1, 0, 1\)"):
            preprocess_ct(grid(arr))


class TestPreprocessMR:
    def test_linear_ramp(self):
        arr = np.arange(1000, dtype=np.float64).reshape(10, 10, 10)
        out = preprocess_mr(grid(arr)).voxels
        inside = ((out > 0) & (out < 1)).mean()
        assert inside >= 0.98
        assert out.min() == 0.0 and out.max() == 1.0
        # reference: z-score, percentiles by rank q*(n-1), clip, min-max
        vals = sorted(((arr - arr.mean()) / arr.std()).ravel().tolist())

        def pct(q):
            r = q * (len(vals) - 1)
            lo = math.floor(r)
            return vals[lo] + (r - lo) * (vals[min(lo + 1, len(vals) - 1)] - vals[lo])

        lo, hi = pct(0.01), pct(0.99)
        z = (arr - arr.mean()) / arr.std()
        expected = (np.clip(z, lo, hi) - lo) / (hi - lo)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_constant_volume(self):
        with pytest.raises(DegenerateInputError, match="degenerate input"):
            preprocess_mr(grid(np.full((3, 3, 3), 4.0)))

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(0.01, 100.0), b=st.floats(-1000.0, 1000.0), seed=st.integers(0, 2**31))
    def test_positive_affine_invariance(self, a, b, seed):
        arr = np.random.default_rng(seed).normal(size=(6, 5, 4))
        out1 = preprocess_mr(grid(arr)).voxels
        out2 = preprocess_mr(grid(a * arr + b)).voxels
        np.testing.assert_allclose(out1, out2, atol=1e-9)
        assert out1.min() >= 0 and out1.max() <= 1


def _otsu_oracle(values, bins=256):
    """Exhaustive search over every split of an independently built histogram."""
    vmin, vmax = min(values), max(values)
    counts = [0] * bins
    for v in values:
        counts[min(int((v - vmin) / (vmax - vmin) * bins), bins - 1)] += 1
    width = (vmax - vmin) / bins
    centers = [vmin + (i + 0.5) * width for i in range(bins)]
    best, best_k = -1.0, None
    for k in range(bins - 1):
        w0 = sum(counts[: k + 1])
        w1 = sum(counts[k + 1:])
        if w0 == 0 or w1 == 0:
            continue
        mu0 = sum(c * m for c, m in zip(counts[: k + 1], centers[: k + 1])) / w0
        mu1 = sum(c * m for c, m in zip(counts[k + 1:], centers[k + 1:])) / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best * (1 + 1e-12):
            best, best_k = var, k
    return centers[best_k], best_k


class TestOtsu:
    def test_two_level_volume(self):
        arr = np.where(np.arange(64).reshape(4, 4, 4) % 2 == 0, 0.1, 0.9)
        t = otsu_threshold(grid(arr))
        assert 0.1 < t < 0.9
        assert t == pytest.approx(_otsu_oracle(arr.ravel().tolist())[0], abs=1e-12)
        m = apply_threshold(grid(arr), t)
        assert np.array_equal(m.voxels, (arr == 0.9).astype(np.uint8))

    def test_bimodal_mixture_misclassification(self):
        rng = np.random.default_rng(3)
        labels = rng.random((20, 20, 20)) < 0.4
        arr = np.where(labels, rng.normal(0.8, 0.05, labels.shape), rng.normal(0.2, 0.05, labels.shape))
        arr = np.clip(arr, 0, 1)
        t = otsu_threshold(grid(arr))
        assert t == pytest.approx(_otsu_oracle(arr.ravel().tolist())[0], abs=1e-12)
        err = (apply_threshold(grid(arr), t).voxels.astype(bool) != labels).mean()
        assert err < 0.01

    def test_matches_exhaustive_oracle_on_random_volumes(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            arr = rng.beta(rng.uniform(0.3, 3), rng.uniform(0.3, 3), size=(6, 6, 6))
            assert otsu_threshold(grid(arr)) == pytest.approx(
                _otsu_oracle(arr.ravel().tolist())[0], abs=1e-12
            )

    def test_single_bin_volume(self):
        with pytest.raises(DegenerateInputError):
            otsu_threshold(grid(np.full((3, 3, 3), 0.4)))

    def test_rejects_out_of_range(self):
        with pytest.raises(InputError):
            otsu_threshold(grid(np.linspace(-1, 1, 8).reshape(2, 2, 2)))


def _ellipsoid_volume(rng, noise=0.02, shape=(24, 24, 24)):
    g = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    truth = ((g[0] - 12) / 7) ** 2 + ((g[1] - 11) / 5) ** 2 + ((g[2] - 12) / 6) ** 2 <= 1
    arr = np.where(truth, 0.8, 0.2) + rng.normal(0, noise, shape)
    return arr, truth


class TestProxyLabels:
    def test_ct_window(self):
        arr = np.array([50.0, 200.0, 0.0, 100.0]).reshape(4, 1, 1)
        out = proxy_label_ct(grid(arr), (0, 100))
        assert out.kind == "binary-mask"
        assert out.voxels.ravel().tolist() == [1, 0, 1, 1]

    def test_ct_full_window_on_clipped_ct(self, rng):
        arr = np.clip(rng.uniform(-3000, 3000, (4, 4, 4)), -1024, 1024)
        assert proxy_label_ct(grid(arr), (-1024, 1024)).voxels.all()

    def test_ct_matches_predicate(self, rng):
        for _ in range(5):
            arr = rng.uniform(-1500, 1500, (5, 5, 5))
            lo, hi = sorted(rng.uniform(-1500, 1500, 2))
            out = proxy_label_ct(grid(arr), (lo, hi)).voxels
            for idx in np.ndindex(arr.shape):
                assert out[idx] == (1 if lo <= arr[idx] <= hi else 0)

    def test_ct_bad_window(self):
        with pytest.raises(ConfigError):
            proxy_label_ct(grid(np.zeros((2, 2, 2))), (10, 10))

    def test_mr_ellipsoid_dice(self, rng):
        from coldstart.metrics import dice

        arr, truth = _ellipsoid_volume(rng)
        out = proxy_label_mr(grid(arr))
        assert dice(out, truth) >= 0.95

    def test_mr_constant(self):
        with pytest.raises(DegenerateInputError):
            proxy_label_mr(grid(np.ones((4, 4, 4))))

    def test_mr_affine_invariance(self, rng):
        arr, _ = _ellipsoid_volume(rng)
        a = proxy_label_mr(grid(arr)).voxels
        b = proxy_label_mr(grid(3.0 * arr + 17.0)).voxels
        assert np.array_equal(a, b)


class TestRoi:
    def test_single_voxel(self):
        m = np.zeros((32, 32, 32), dtype=np.uint8)
        m[10, 10, 10] = 1
        roi = roi_from_mask(mask(m), 5)
        assert roi.lo == (5, 5, 5) and roi.hi == (15, 15, 15)

    def test_corner_is_clipped(self):
        m = np.zeros((32, 32, 32), dtype=np.uint8)
        m[0, 0, 0] = 1
        roi = roi_from_mask(mask(m), 5)
        assert roi.lo == (0, 0, 0) and roi.hi == (5, 5, 5)

    def test_empty_mask(self):
        with pytest.raises(EmptyForegroundError):
            roi_from_mask(mask(np.zeros((4, 4, 4))))

    def test_matches_brute_force_scan(self, rng):
        for _ in range(30):
            shape = tuple(int(s) for s in rng.integers(3, 12, 3))
            m = (rng.random(shape) < rng.uniform(0.01, 0.2)).astype(np.uint8)
            if not m.any():
                continue
            margin = int(rng.integers(0, 4))
            pts = [idx for idx in np.ndindex(shape) if m[idx]]
            lo = tuple(max(min(p[a] for p in pts) - margin, 0) for a in range(3))
            hi = tuple(min(max(p[a] for p in pts) + margin, shape[a] - 1) for a in range(3))
            roi = roi_from_mask(mask(m), margin)
            assert (roi.lo, roi.hi) == (lo, hi)

    def test_zero_margin_is_minimal(self, rng):
        m = np.zeros((10, 10, 10), dtype=np.uint8)
        m[2:5, 3:4, 6:9] = 1
        roi = roi_from_mask(mask(m), 0)
        assert roi.shape == (3, 1, 3)
        assert crop(mask(m), roi).voxels.all()

    def test_invalid_box(self):
        with pytest.raises(BoundsError):
            RoiBox((2, 0, 0), (1, 0, 0))


class TestCrop:
    def test_full_roi_is_identity(self, rng):
        g = grid(rng.random((4, 5, 6)), spacing=(1.0, 2.0, 3.0))
        c = crop(g, RoiBox((0, 0, 0), (3, 4, 5)))
        assert np.array_equal(c.voxels, g.voxels) and c.spacing == g.spacing

    def test_corner_voxel(self, rng):
        g = grid(rng.random((4, 5, 6)))
        c = crop(g, RoiBox((0, 0, 0), (0, 0, 0)))
        assert c.dims == (1, 1, 1) and c.voxels[0, 0, 0] == g.voxels[0, 0, 0]

    def test_out_of_range(self):
        with pytest.raises(BoundsError):
            crop(grid(np.zeros((3, 3, 3))), RoiBox((0, 0, 0), (3, 1, 1)))

    def test_random_probes(self, rng):
        g = grid(rng.random((9, 8, 7)))
        roi = RoiBox((2, 1, 3), (7, 6, 5))
        c = crop(g, roi)
        for _ in range(100):
            idx = tuple(int(rng.integers(0, n)) for n in roi.shape)
            orig = tuple(i + o for i, o in zip(idx, roi.lo))
            assert c.voxels[idx] == g.voxels[orig]

    def test_nested_crop_composes(self, rng):
        g = grid(rng.random((10, 10, 10)))
        outer = RoiBox((1, 2, 3), (8, 9, 9))
        inner = RoiBox((1, 1, 0), (4, 5, 3))
        composed = RoiBox(
            tuple(a + b for a, b in zip(outer.lo, inner.lo)),
            tuple(a + b for a, b in zip(outer.lo, inner.hi)),
        )
        assert np.array_equal(crop(crop(g, outer), inner).voxels, crop(g, composed).voxels)
