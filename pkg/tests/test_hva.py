"""Attention map engine: windowing, clustering, rendering, filtering,
resampling and the binary map format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from gazedistill import hva
from gazedistill.errors import FormatError, ValidationError
from gazedistill.fixations import FixationPoint, GazeSequence
from gazedistill.hva import (
    HvaParams,
    HvaSet,
    cluster_fixations,
    compute_hva,
    gaussian_filter,
    main_cluster_split,
    partition_fixations,
    read_hva,
    render_disintegration_map,
    render_integration_map,
    resize_map,
    write_hva,
)


def pt(x, y, onset=0.0, dur=100.0):
    return FixationPoint(x, y, onset, dur)


def seq_of(points, image_id="img"):
    return GazeSequence(image_id, tuple(points))


class TestPartition:
    def test_worked_example_60s_four_windows(self):
        # onsets 2000/16000/31000/59000 with a 60000 ms viewing fall into
        # windows 0/1/2/3
        points = [pt(0, 0, onset, 100) for onset in (2000, 16000, 31000, 59000)]
        points[-1] = pt(0, 0, 59000, 1000)  # end pins total at 60000
        windows = partition_fixations(seq_of(points), 4)
        got = [
            next(w for w, win in enumerate(windows) if p in win) for p in points
        ]
        assert got == [0, 1, 2, 3]

    def test_matches_boundary_comparison_oracle_on_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(1, 9))
            count = int(rng.integers(1, 30))
            onsets = rng.uniform(0, 50000, size=count)
            durs = rng.uniform(1, 900, size=count)
            points = [pt(0, 0, o, d) for o, d in zip(onsets, durs)]
            seq = seq_of(points)
            total = seq.total_duration_ms
            windows = partition_fixations(seq, n)

            for p in points:
                # oracle: unique w with w*total <= onset*n < (w+1)*total
                w = 0
                while w < n - 1 and p.onset_ms * n >= (w + 1) * total:
                    w += 1
                assert p in windows[w]

    def test_every_fixation_lands_in_exactly_one_window(self):
        rng = np.random.default_rng(1)
        points = [pt(0, 0, o, 10) for o in rng.uniform(0, 1000, 50)]
        windows = partition_fixations(seq_of(points), 5)
        assert sum(len(w) for w in windows) == 50

    def test_zero_viewing_duration_rejected(self):
        with pytest.raises(ValidationError, match="zero viewing"):
            partition_fixations(seq_of([pt(0, 0, 0, 0)]), 4)
        with pytest.raises(ValidationError, match="zero viewing"):
            partition_fixations(seq_of([]), 4)


def clusters_oracle(points, d):
    """Brute-force connected components via BFS on the threshold graph."""
    n = len(points)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp, queue = [], [s]
        seen[s] = True
        while queue:
            i = queue.pop()
            comp.append(i)
            for j in range(n):
                if not seen[j]:
                    dist = np.hypot(
                        points[i].x_px - points[j].x_px, points[i].y_px - points[j].y_px
                    )
                    if dist <= d:
                        seen[j] = True
                        queue.append(j)
        comps.append(frozenset(comp))
    return set(comps)


class TestClustering:
    def test_chain_of_50px_gaps_is_one_cluster_at_64(self):
        points = [pt(0, 0), pt(50, 0), pt(100, 0)]
        assert len(cluster_fixations(points, 64)) == 1

    def test_chain_of_70px_gaps_splits_apart_at_64(self):
        points = [pt(0, 0), pt(70, 0), pt(140, 0)]
        assert len(cluster_fixations(points, 64)) == 3

    def test_join_distance_is_inclusive(self):
        assert len(cluster_fixations([pt(0, 0), pt(64, 0)], 64)) == 1
        assert len(cluster_fixations([pt(0, 0), pt(64.001, 0)], 64)) == 2

    def test_matches_brute_force_oracle_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            count = int(rng.integers(1, 25))
            points = [
                pt(x, y) for x, y in rng.uniform(0, 300, size=(count, 2))
            ]
            d = float(rng.uniform(5, 120))
            got = {frozenset(c) for c in cluster_fixations(points, d)}
            assert got == clusters_oracle(points, d)

    @given(st.randoms(use_true_random=False))
    @settings(max_examples=25, deadline=None)
    def test_clustering_ignores_input_order(self, pyrandom):
        base = [pt(5 * i, 3 * (i % 4)) for i in range(10)]
        order = list(range(10))
        pyrandom.shuffle(order)
        shuffled = [base[i] for i in order]
        want = clusters_oracle(base, 12.0)
        got = {
            frozenset(order[i] for i in c) for c in cluster_fixations(shuffled, 12.0)
        }
        assert got == want

    def test_main_cluster_is_largest_total_dwell(self):
        # left pair dwells 300, lone right point dwells 500
        points = [pt(0, 0, 0, 100), pt(10, 0, 50, 200), pt(200, 0, 20, 500)]
        main, rest = main_cluster_split(points, 64)
        assert main == [2]
        assert rest == [0, 1]

    def test_dwell_tie_goes_to_earliest_onset(self):
        points = [pt(0, 0, 500, 100), pt(200, 0, 10, 100)]
        main, rest = main_cluster_split(points, 64)
        assert main == [1]
        assert rest == [0]


class TestGaussian:
    def test_interior_impulse_conserves_mass(self):
        sigma, trunc = 2.0, 4.0
        grid = np.zeros((32, 32))
        grid[16, 16] = 3.7
        out = gaussian_filter(grid, sigma, trunc)
        assert abs(out.sum() - 3.7) < 1e-12

    def test_border_impulse_loses_mass_to_zero_padding(self):
        grid = np.zeros((16, 16))
        grid[0, 0] = 1.0
        assert gaussian_filter(grid, 2.0).sum() < 0.999

    def test_homogeneity_is_exact_for_dyadic_scale(self):
        rng = np.random.default_rng(3)
        grid = rng.uniform(0, 1, size=(20, 20))
        a = 2.0  # power of two: scaling commutes with rounding exactly
        assert np.array_equal(gaussian_filter(a * grid, 3.0), a * gaussian_filter(grid, 3.0))

    def test_matches_pure_loop_direct_2d_convolution(self):
        sigma, trunc = 2.0, 4.0
        r = int(np.ceil(trunc * sigma))
        t = np.arange(-r, r + 1, dtype=np.float64)
        k1 = np.exp(-(t * t) / (2 * sigma * sigma))
        k1 /= k1.sum()
        k2 = np.outer(k1, k1)
        rng = np.random.default_rng(4)
        for _ in range(3):
            grid = rng.uniform(0, 1, size=(16, 16))
            gp = np.pad(grid, r)
            want = np.zeros_like(grid)
            for i in range(16):
                for j in range(16):
                    want[i, j] = (gp[i : i + 2 * r + 1, j : j + 2 * r + 1] * k2).sum()
            assert np.abs(gaussian_filter(grid, sigma, trunc) - want).max() <= 1e-6

    def test_matches_direct_2d_convolution_on_100_random_grids(self):
        sigma, trunc = 3.0, 4.0
        r = int(np.ceil(trunc * sigma))
        t = np.arange(-r, r + 1, dtype=np.float64)
        k1 = np.exp(-(t * t) / (2 * sigma * sigma))
        k1 /= k1.sum()
        k2 = np.outer(k1, k1)
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            grid = rng.uniform(0, 1, size=(32, 32))
            gp = np.pad(grid, r)
            win = np.lib.stride_tricks.sliding_window_view(gp, (2 * r + 1, 2 * r + 1))
            want = np.tensordot(win, k2, axes=([2, 3], [0, 1]))
            worst = max(worst, np.abs(gaussian_filter(grid, sigma, trunc) - want).max())
        assert worst <= 1e-6

    def test_sigma_zero_is_identity(self):
        grid = np.random.default_rng(6).uniform(size=(8, 8))
        assert_allclose(gaussian_filter(grid, 0.0), grid)


class TestRenderMaps:
    PARAMS = HvaParams(sigma_integration=2.0, sigma_disintegration=4.0,
                       cluster_distance_px=10.0)

    def test_empty_window_is_uniform_ones(self):
        for render in (render_integration_map, render_disintegration_map):
            out = render([], 12, 8, self.PARAMS)
            assert out.shape == (8, 12)
            assert np.array_equal(out, np.ones((8, 12)))

    def test_single_fixation_peaks_at_its_pixel_with_value_one(self):
        out = render_integration_map([pt(20.3, 9.8, 0, 250)], 32, 32, self.PARAMS)
        assert out.max() == 1.0
        assert np.unravel_index(out.argmax(), out.shape) == (10, 20)

    def test_substitute_peak_scales_by_half(self):
        # two far-apart fixations with equal dwell: the non-dominant one is a
        # substitute, so its peak is exactly the substitute weight
        points = [pt(8, 8, 0, 400), pt(56, 56, 10, 400)]
        out = render_integration_map(points, 64, 64, self.PARAMS)
        assert out[8, 8] == 1.0
        assert abs(out[56, 56] - self.PARAMS.substitute_weight) < 1e-12

    def test_disintegration_keeps_all_fixations_at_full_weight(self):
        points = [pt(8, 8, 0, 400), pt(56, 56, 10, 400)]
        out = render_disintegration_map(points, 64, 64, self.PARAMS)
        assert abs(out[8, 8] - 1.0) < 1e-12
        assert abs(out[56, 56] - 1.0) < 1e-12

    def test_dwell_weighting_orders_peaks(self):
        points = [pt(8, 8, 0, 900), pt(56, 56, 10, 300)]
        out = render_disintegration_map(points, 64, 64, self.PARAMS)
        assert out[8, 8] == 1.0
        assert abs(out[56, 56] - 300 / 900) < 1e-12

    def test_all_zero_dwell_falls_back_to_uniform(self):
        out = render_disintegration_map([pt(4, 4, 0, 0)], 8, 8, self.PARAMS)
        assert np.array_equal(out, np.ones((8, 8)))


class TestResize:
    def test_same_dims_is_identity(self):
        grid = np.random.default_rng(8).uniform(size=(9, 13))
        assert np.array_equal(resize_map(grid, 9, 13), grid)

    def test_constant_stays_constant(self):
        out = resize_map(np.full((6, 6), 2.5), 11, 4)
        assert_allclose(out, np.full((11, 4), 2.5), atol=1e-12)

    def test_corners_align_exactly(self):
        grid = np.random.default_rng(9).uniform(size=(5, 7))
        out = resize_map(grid, 10, 3)
        assert out[0, 0] == grid[0, 0]
        assert out[0, -1] == grid[0, -1]
        assert out[-1, 0] == grid[-1, 0]
        assert out[-1, -1] == grid[-1, -1]

    def test_matches_pointwise_bilinear_oracle(self):
        rng = np.random.default_rng(10)
        grid = rng.uniform(size=(6, 5))
        oh, ow = 9, 8
        got = resize_map(grid, oh, ow)
        for i in range(oh):
            for j in range(ow):
                sy = i * (6 - 1) / (oh - 1)
                sx = j * (5 - 1) / (ow - 1)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, 5), min(x0 + 1, 4)
                fy, fx = sy - y0, sx - x0
                want = (
                    grid[y0, x0] * (1 - fy) * (1 - fx)
                    + grid[y0, x1] * (1 - fy) * fx
                    + grid[y1, x0] * fy * (1 - fx)
                    + grid[y1, x1] * fy * fx
                )
                assert abs(got[i, j] - want) < 1e-12

    def test_downsample_then_upsample_preserves_scale_range(self):
        grid = np.random.default_rng(11).uniform(size=(16, 16))
        out = resize_map(resize_map(grid, 4, 4), 16, 16)
        assert out.min() >= grid.min() - 1e-12
        assert out.max() <= grid.max() + 1e-12


class TestHvaIO:
    def _sample_set(self):
        rng = np.random.default_rng(12)
        seq = seq_of(
            [pt(x, y, o, d) for x, y, o, d in rng.uniform(1, 25, size=(14, 4)) * [1, 1, 100, 10]],
        )
        params = HvaParams(sigma_integration=1.5, sigma_disintegration=3.0,
                           cluster_distance_px=8.0)
        return compute_hva(seq, 28, 20, params)

    def test_round_trip_is_bit_exact(self, tmp_path):
        hset = self._sample_set()
        write_hva(hset, tmp_path)
        back = read_hva(tmp_path, hset.image_id)
        assert back.width == hset.width and back.height == hset.height
        assert back.integration.dtype == np.float32
        assert np.array_equal(back.integration, hset.integration)
        assert np.array_equal(back.disintegration, hset.disintegration)

    def test_maps_are_peak_normalized_float32(self):
        hset = self._sample_set()
        for stack in (hset.integration, hset.disintegration):
            assert stack.dtype == np.float32
            for level in stack:
                assert abs(level.max() - 1.0) < 1e-6

    def test_bad_magic_names_offset_zero(self, tmp_path):
        hset = self._sample_set()
        write_hva(hset, tmp_path)
        path = tmp_path / f"{hset.image_id}.int.hva"
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="offset 0"):
            read_hva(tmp_path, hset.image_id)

    def test_version_mismatch_names_offset(self, tmp_path):
        hset = self._sample_set()
        write_hva(hset, tmp_path)
        path = tmp_path / f"{hset.image_id}.int.hva"
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version 99 at offset 4"):
            read_hva(tmp_path, hset.image_id)

    def test_truncated_payload_names_offset(self, tmp_path):
        hset = self._sample_set()
        write_hva(hset, tmp_path)
        path = tmp_path / f"{hset.image_id}.dis.hva"
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(FormatError, match="truncated at offset"):
            read_hva(tmp_path, hset.image_id)

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(FormatError, match="missing"):
            read_hva(tmp_path, "nope")

    def test_compute_is_deterministic(self):
        a = self._sample_set()
        b = self._sample_set()
        assert np.array_equal(a.integration, b.integration)
        assert np.array_equal(a.disintegration, b.disintegration)
