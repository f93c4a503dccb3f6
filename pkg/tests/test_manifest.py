"""Manifest I/O and frequency-threshold class grouping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazedistill.errors import ValidationError
from gazedistill.manifest import (
    ClassGrouping,
    DatasetManifest,
    ImageRecord,
    group_classes,
    load_manifest,
    save_manifest,
)


def _rec(i, label, split="train"):
    return ImageRecord(
        id=f"im{i}", path=f"images/im{i}.png", label=label, split=split,
        height=8, width=8, channels=1,
    )


class TestGroupClasses:
    def test_published_count_examples(self):
        # 6941 -> head, 868 -> medium, 59 -> tail
        grouping = group_classes([6941, 868, 59])
        assert grouping.groups == ("head", "medium", "tail")

    def test_boundaries_fall_to_medium(self):
        assert group_classes([1000]).groups == ("medium",)
        assert group_classes([1001]).groups == ("head",)
        assert group_classes([100]).groups == ("medium",)
        assert group_classes([99]).groups == ("tail",)

    @given(st.permutations([6941, 868, 59, 1000, 100, 2500, 7]))
    @settings(max_examples=30, deadline=None)
    def test_grouping_commutes_with_permutation(self, counts):
        base = {c: g for c, g in zip(counts, group_classes(counts).groups)}
        want = {6941: "head", 868: "medium", 59: "tail", 1000: "medium",
                100: "medium", 2500: "head", 7: "tail"}
        assert base == want

    def test_indices_helper(self):
        grouping = group_classes([5000, 10, 500])
        assert grouping.indices("head") == (0,)
        assert grouping.indices("tail") == (1,)
        assert grouping.indices("medium") == (2,)


class TestManifest:
    def _manifest(self):
        records = [_rec(0, "a"), _rec(1, "b"), _rec(2, "a"), _rec(3, "a", "test")]
        return DatasetManifest(class_names=["a", "b"], records=records)

    def test_round_trip(self, tmp_path):
        man = self._manifest()
        save_manifest(man, tmp_path / "manifest.json")
        back = load_manifest(tmp_path / "manifest.json")
        assert back.class_names == man.class_names
        assert back.records == man.records
        assert back.root == tmp_path

    def test_round_trip_with_groups(self, tmp_path):
        man = self._manifest()
        man.class_groups = ClassGrouping(("head", "tail"))
        save_manifest(man, tmp_path / "m.json")
        assert load_manifest(tmp_path / "m.json").class_groups == man.class_groups

    def test_train_counts_are_label_multiset(self):
        counts = self._manifest().train_counts()
        assert counts.tolist() == [2, 1]  # test-split record excluded

    def test_grouping_prefers_stored_groups(self):
        man = self._manifest()
        assert man.grouping().groups == ("tail", "tail")  # tiny counts
        man.class_groups = ClassGrouping(("head", "medium"))
        assert man.grouping().groups == ("head", "medium")

    def test_unknown_label_rejected(self):
        with pytest.raises(ValidationError, match="unknown label"):
            DatasetManifest(class_names=["a"], records=[_rec(0, "zzz")])

    def test_unknown_split_rejected(self):
        rec = ImageRecord("x", "x.png", "a", "validation", 8, 8, 1)
        with pytest.raises(ValidationError, match="unknown split"):
            DatasetManifest(class_names=["a"], records=[rec])

    def test_duplicate_class_names_rejected(self):
        with pytest.raises(ValidationError, match="duplicate"):
            DatasetManifest(class_names=["a", "a"], records=[])

    def test_groups_length_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="class_groups"):
            DatasetManifest(
                class_names=["a", "b"], records=[], class_groups=ClassGrouping(("head",))
            )
