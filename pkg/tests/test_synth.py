"""Synthetic dataset generator: count profile, determinism, gaze schedule."""

import numpy as np
import pytest

from gazedistill.errors import ConfigError
from gazedistill.synth import (
    SynthConfig,
    class_amplitude,
    class_names_for,
    grouping_for,
    long_tailed_counts,
    patch_locations,
    synth_dataset,
)

SMALL = SynthConfig(
    n_classes_per_group=(1, 1, 1),
    imbalance_factor=10.0,
    image_size=32,
    patch_size=8,
    n_train=40,
    n_balanced_per_class=3,
    fixations_per_image=12,
    seed=5,
)


class TestCounts:
    def test_balanced_when_factor_is_one(self):
        counts = long_tailed_counts(7, 1.0, 100)
        assert counts.sum() == 100
        assert counts.max() - counts.min() <= 1

    def test_eight_class_factor_100_profile(self):
        counts = long_tailed_counts(8, 100.0, 2000)
        # monotone nonincreasing, near-target total, ratio close to the factor
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert abs(int(counts.sum()) - 2000) <= 8
        assert abs(counts[0] / 100.0 - counts[-1]) <= 1.0

    def test_infeasible_configs_raise(self):
        with pytest.raises(ConfigError):
            long_tailed_counts(10, 100.0, 5)
        with pytest.raises(ConfigError):
            long_tailed_counts(4, 0.5, 100)

    def test_too_many_classes_for_grid_raises(self):
        cfg = SynthConfig(n_classes_per_group=(10, 5, 5), image_size=32, patch_size=16)
        with pytest.raises(ConfigError, match="grid"):
            patch_locations(cfg)

    def test_locations_are_distinct(self):
        locs = patch_locations(SynthConfig())
        assert len(set(locs)) == len(locs)

    def test_patch_contrast_decays_toward_rare_classes(self):
        cfg = SynthConfig()
        amps = [class_amplitude(cfg, k) for k in range(cfg.n_classes)]
        assert all(a > b for a, b in zip(amps, amps[1:]))
        assert amps[0] == cfg.patch_amplitude
        assert abs(amps[-1] - cfg.patch_amplitude * cfg.rare_amplitude_factor) < 1e-12
        flat = SynthConfig(rare_amplitude_factor=1.0)
        assert len({class_amplitude(flat, k) for k in range(flat.n_classes)}) == 1


class TestGeneration:
    def test_label_multiset_matches_constructed_counts(self, tmp_path):
        res = synth_dataset(SMALL, tmp_path)
        assert res.manifest.train_counts().tolist() == res.counts.tolist()

    def test_groups_recorded_in_manifest(self, tmp_path):
        res = synth_dataset(SMALL, tmp_path)
        assert res.manifest.class_groups == grouping_for(SMALL)
        assert res.manifest.class_names == class_names_for(SMALL)

    def test_same_seed_regenerates_byte_identical_outputs(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        synth_dataset(SMALL, a)
        synth_dataset(SMALL, b)
        assert (a / "gaze.csv").read_bytes() == (b / "gaze.csv").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        imgs = sorted(p.name for p in (a / "images").iterdir())
        assert imgs == sorted(p.name for p in (b / "images").iterdir())
        for name in imgs[:: max(1, len(imgs) // 7)]:
            assert (a / "images" / name).read_bytes() == (b / "images" / name).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        from dataclasses import replace

        a = synth_dataset(SMALL, tmp_path / "a")
        b = synth_dataset(replace(SMALL, seed=6), tmp_path / "b")
        assert (tmp_path / "a/gaze.csv").read_text() != (tmp_path / "b/gaze.csv").read_text()

    def test_gaze_targets_head_location_early_and_own_late(self, tmp_path):
        res = synth_dataset(SMALL, tmp_path)
        centers = patch_locations(SMALL)
        head_centers = [centers[i] for i in grouping_for(SMALL).indices("head")]
        by_id = {s.image_id: s for s in res.sequences}
        tail_name = class_names_for(SMALL)[-1]
        tail_records = [
            r for r in res.manifest.records if r.label == tail_name and r.split == "train"
        ]
        assert tail_records
        near = 2 * SMALL.patch_size  # covers patch jitter plus 3-sigma gaze jitter
        tail_center = centers[-1]
        for rec in tail_records:
            seq = by_id[rec.id]
            total = seq.total_duration_ms
            for p in seq.points:
                if p.onset_ms < SMALL.viewing_ms / 2:
                    d = min(
                        np.hypot(p.x_px - cx, p.y_px - cy) for cx, cy in head_centers
                    )
                else:
                    d = np.hypot(p.x_px - tail_center[0], p.y_px - tail_center[1])
                assert d < near

    def test_gaze_exists_only_for_train_split(self, tmp_path):
        res = synth_dataset(SMALL, tmp_path)
        train_ids = {r.id for r in res.manifest.records if r.split == "train"}
        assert {s.image_id for s in res.sequences} == train_ids

    def test_images_decode_with_declared_shape(self, tmp_path):
        from gazedistill.manifest import load_image

        res = synth_dataset(SMALL, tmp_path)
        rec = res.manifest.records[0]
        arr = load_image(rec, tmp_path)
        assert arr.shape == (1, SMALL.image_size, SMALL.image_size)
        assert 0.0 <= arr.min() and arr.max() <= 1.0
