import math

import numpy as np
import pytest

from coldstart.errors import FormatError, InsufficientDataError
from coldstart.uncertainty import (
    LN2,
    PredictionStack,
    aggregate,
    entropy_map,
    read_stack,
    read_stacks,
    score_stack,
    variance_map,
    write_stack,
)
from coldstart.volumes import RoiBox

from conftest import grid


def _stack(arr, roi=None, id_="a"):
    return PredictionStack.from_array(id_, arr, roi=roi)


def _entropy_oracle(runs):
    p = sum(runs) / len(runs)
    h = 0.0
    for q in (p, 1 - p):
        if q > 0:
            h -= q * math.log(q)
    return h


def _variance_oracle(runs):
    mu = sum(runs) / len(runs)
    return sum((r - mu) ** 2 for r in runs) / len(runs)


class TestMaps:
    def test_certain_voxel(self):
        assert entropy_map(_stack(np.ones((3, 2, 2, 2)))).voxels.max() == 0.0

    def test_split_voxel_is_ln2(self):
        arr = np.stack([np.zeros((1, 1, 1)), np.ones((1, 1, 1))])
        assert entropy_map(_stack(arr)).voxels[0, 0, 0] == pytest.approx(0.693147, abs=1e-6)
        assert variance_map(_stack(arr)).voxels[0, 0, 0] == 0.25

    def test_constant_runs_variance(self, rng):
        one = rng.random((3, 3, 3))
        assert variance_map(_stack(np.stack([one] * 4))).voxels.max() == pytest.approx(0.0, abs=1e-15)

    def test_random_stacks_match_oracles(self, rng):
        for _ in range(20):
            T = int(rng.integers(2, 8))
            shape = tuple(int(s) for s in rng.integers(1, 5, 3))
            arr = rng.random((T,) + shape)
            arr[arr < 0.1] = 0.0
            arr[arr > 0.9] = 1.0
            st = _stack(arr)
            h, v = entropy_map(st).voxels, variance_map(st).voxels
            for idx in np.ndindex(shape):
                runs = [float(arr[(t,) + idx]) for t in range(T)]
                assert abs(h[idx] - _entropy_oracle(runs)) < 1e-12
                assert abs(v[idx] - _variance_oracle(runs)) < 1e-12
            assert h.max() <= LN2

    def test_complement_and_permutation_invariance(self, rng):
        arr = rng.random((6, 4, 4, 4))
        st = _stack(arr)
        comp = _stack(1.0 - arr)
        perm = _stack(arr[rng.permutation(6)])
        np.testing.assert_allclose(entropy_map(comp).voxels, entropy_map(st).voxels, atol=1e-12)
        np.testing.assert_allclose(variance_map(comp).voxels, variance_map(st).voxels, atol=1e-12)
        np.testing.assert_allclose(entropy_map(perm).voxels, entropy_map(st).voxels, atol=1e-12)
        np.testing.assert_allclose(variance_map(perm).voxels, variance_map(st).voxels, atol=1e-12)

    def test_single_run_rejected(self):
        with pytest.raises(InsufficientDataError):
            _stack(np.zeros((1, 2, 2, 2)))

    def test_half_probability_stays_at_ceiling(self):
        arr = np.full((2, 3, 3, 3), 0.5)
        assert entropy_map(_stack(arr)).voxels.max() <= LN2


class TestAggregate:
    def test_constant(self):
        assert aggregate(grid(np.full((3, 4, 5), 0.2))) == pytest.approx(0.2)

    def test_roi_local_vs_global(self):
        arr = np.zeros((10, 10, 10))
        roi = RoiBox((2, 2, 2), (5, 6, 3))
        arr[roi.slices()] = 0.4
        assert aggregate(grid(arr), roi) == pytest.approx(0.4)
        assert aggregate(grid(arr)) == pytest.approx(0.4 * roi.size / 1000)

    def test_random_roi_loop_oracle(self, rng):
        for _ in range(10):
            arr = rng.random((6, 7, 5))
            lo = tuple(int(rng.integers(0, n)) for n in arr.shape)
            hi = tuple(int(rng.integers(l, n)) for l, n in zip(lo, arr.shape))
            total, count = 0.0, 0
            for x in range(lo[0], hi[0] + 1):
                for y in range(lo[1], hi[1] + 1):
                    for z in range(lo[2], hi[2] + 1):
                        total += arr[x, y, z]
                        count += 1
            assert aggregate(grid(arr), RoiBox(lo, hi)) == pytest.approx(total / count, abs=1e-12)

    def test_score_bounds(self, rng):
        st = _stack(rng.random((5, 4, 4, 4)), roi=RoiBox((0, 0, 0), (1, 1, 1)))
        for roi_mode in ("global", "local"):
            e = score_stack(st, "entropy", roi_mode).score
            v = score_stack(st, "variance", roi_mode).score
            assert 0 <= e <= LN2 and 0 <= v <= 0.25


class TestStackFiles:
    def test_round_trip(self, tmp_path, rng):
        st = _stack(rng.random((3, 2, 3, 4)).astype(np.float32), id_="case1")
        write_stack(st, tmp_path)
        back = read_stacks(tmp_path)
        assert [s.id for s in back] == ["case1"]
        np.testing.assert_array_equal(back[0].array, st.array)

    def test_gap_in_run_numbers(self, tmp_path, rng):
        st = _stack(rng.random((3, 2, 2, 2)).astype(np.float32), id_="c")
        write_stack(st, tmp_path)
        (tmp_path / "c" / "run_001.vol").unlink()
        with pytest.raises(FormatError):
            read_stack(tmp_path / "c")

    def test_single_run_on_disk(self, tmp_path, rng):
        st = _stack(rng.random((2, 2, 2, 2)).astype(np.float32), id_="c")
        write_stack(st, tmp_path)
        (tmp_path / "c" / "run_001.vol").unlink()
        with pytest.raises(InsufficientDataError):
            read_stack(tmp_path / "c")
