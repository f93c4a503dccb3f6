"""Dataset manifests and long-tailed class grouping.

A manifest is a JSON document with class_names, records (one per image:
id, path, label, split, height, width, channels) and an optional
class_groups list. Paths are relative to the manifest file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

SPLITS = ("train", "balanced_test", "test")
GROUPS = ("head", "medium", "tail")

# class-frequency boundaries: head above 1000 training samples, tail below
# 100, boundary values fall to medium
HEAD_ABOVE = 1000
TAIL_BELOW = 100


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: str
    split: str
    height: int
    width: int
    channels: int


@dataclass(frozen=True)
class ClassGrouping:
    """Group label per class, aligned with the manifest's class order."""

    groups: tuple[str, ...]

    def indices(self, group: str) -> tuple[int, ...]:
        return tuple(i for i, g in enumerate(self.groups) if g == group)

    def __getitem__(self, class_index: int) -> str:
        return self.groups[class_index]


def group_classes(counts) -> ClassGrouping:
    """Assign head/medium/tail by training-set frequency."""
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size == 0:
        raise ValidationError(f"counts must be a non-empty 1-d sequence, got {counts.shape}")
    groups = []
    for c in counts:
        if c > HEAD_ABOVE:
            groups.append("head")
        elif c < TAIL_BELOW:
            groups.append("tail")
        else:
            groups.append("medium")
    return ClassGrouping(tuple(groups))


@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[ImageRecord]
    class_groups: ClassGrouping | None = None
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        names = set(self.class_names)
        if len(names) != len(self.class_names):
            raise ValidationError("duplicate class names in manifest")
        for rec in self.records:
            if rec.label not in names:
                raise ValidationError(f"record {rec.id}: unknown label {rec.label!r}")
            if rec.split not in SPLITS:
                raise ValidationError(f"record {rec.id}: unknown split {rec.split!r}")
        if self.class_groups is not None:
            if len(self.class_groups.groups) != len(self.class_names):
                raise ValidationError("class_groups length must match class_names")
            for g in self.class_groups.groups:
                if g not in GROUPS:
                    raise ValidationError(f"unknown group name {g!r}")

    def label_index(self, label: str) -> int:
        return self.class_names.index(label)

    def split_records(self, split: str) -> list[ImageRecord]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def train_counts(self) -> np.ndarray:
        """Training-label multiset as a per-class count vector."""
        counts = np.zeros(len(self.class_names), dtype=np.int64)
        for rec in self.records:
            if rec.split == "train":
                counts[self.class_names.index(rec.label)] += 1
        return counts

    def grouping(self) -> ClassGrouping:
        """Constructed grouping when present, frequency thresholds otherwise."""
        if self.class_groups is not None:
            return self.class_groups
        return group_classes(self.train_counts())


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "class_names": manifest.class_names,
        "records": [
            {
                "id": r.id,
                "path": r.path,
                "label": r.label,
                "split": r.split,
                "height": r.height,
                "width": r.width,
                "channels": r.channels,
            }
            for r in manifest.records
        ],
    }
    if manifest.class_groups is not None:
        doc["class_groups"] = list(manifest.class_groups.groups)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from None
    try:
        records = [ImageRecord(**r) for r in doc["records"]]
        class_names = list(doc["class_names"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"manifest {path} missing required fields: {exc}") from None
    groups = doc.get("class_groups")
    grouping = ClassGrouping(tuple(groups)) if groups is not None else None
    return DatasetManifest(
        class_names=class_names, records=records, class_groups=grouping, root=path.parent
    )


def load_image(record: ImageRecord, root) -> np.ndarray:
    """Load one image as float in [0, 1], shape (channels, H, W)."""
    p = Path(root) / record.path
    with Image.open(p) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape != (record.channels, record.height, record.width):
        raise ValidationError(
            f"image {record.id}: file shape {arr.shape} does not match record "
            f"({record.channels}, {record.height}, {record.width})"
        )
    return arr
