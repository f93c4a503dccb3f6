"""Synthetic long-tailed dataset with simulated gaze.

Each class owns a grid cell; an image is background noise plus an oriented
patch at its class's (jittered) location, so class identity is carried by
where the patch sits and how it is textured. Training counts follow an
exponential profile spanning the configured imbalance factor, and patch
contrast decays along the same class order, so the rare classes are also
the subtle ones. Simulated gaze dwells on a head-class location during
the first half of the viewing and on the image's own patch during the
second half, mirroring the obvious-finding-first reading order.

Everything derives from per-image RNG streams, so regeneration with the
same seed is byte-identical regardless of call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .fixations import FixationPoint, GazeSequence, serialize_fixation_csv
from .manifest import ClassGrouping, DatasetManifest, ImageRecord, save_manifest

_IMG_STREAM = 11
_GAZE_STREAM = 23


@dataclass(frozen=True)
class SynthConfig:
    n_classes_per_group: tuple[int, int, int] = (3, 3, 2)
    imbalance_factor: float = 100.0
    image_size: int = 64
    n_train: int = 2000
    seed: int = 0
    # evaluation splits
    n_balanced_per_class: int = 25
    test_fraction: float = 0.25
    # appearance; the rarest class's patch contrast is
    # patch_amplitude * rare_amplitude_factor, interpolated geometrically
    patch_size: int = 16
    patch_amplitude: float = 0.55
    rare_amplitude_factor: float = 0.45
    noise_sigma: float = 0.20
    background_level: float = 0.30
    # gaze simulation
    fixations_per_image: int = 24
    viewing_ms: float = 60000.0
    gaze_jitter_px: float = 3.0

    @property
    def n_classes(self) -> int:
        return sum(self.n_classes_per_group)


def class_names_for(cfg: SynthConfig) -> list[str]:
    names = []
    for group, prefix, n in zip(("head", "medium", "tail"), ("head", "med", "tail"),
                                cfg.n_classes_per_group):
        names.extend(f"{prefix}{i}" for i in range(n))
    return names


def grouping_for(cfg: SynthConfig) -> ClassGrouping:
    parts = []
    for group, n in zip(("head", "medium", "tail"), cfg.n_classes_per_group):
        parts.extend([group] * n)
    return ClassGrouping(tuple(parts))


def long_tailed_counts(n_classes: int, imbalance_factor: float, n_train: int) -> np.ndarray:
    """Exponential count profile n_k = n0 * factor**(-k/(K-1)), rounded,
    with n0 picked so the total lands as close to n_train as possible."""
    if n_classes < 1:
        raise ConfigError("need at least one class")
    if imbalance_factor < 1:
        raise ConfigError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    if n_train < n_classes:
        raise ConfigError(f"n_train {n_train} cannot cover {n_classes} classes")
    if imbalance_factor == 1 or n_classes == 1:
        base = n_train // n_classes
        counts = np.full(n_classes, base, dtype=np.int64)
        counts[: n_train - base * n_classes] += 1
        return counts

    decay = imbalance_factor ** (-1.0 / (n_classes - 1))
    geom = (1 - decay**n_classes) / (1 - decay)
    n0_guess = n_train / geom
    best = None
    for n0 in range(max(1, int(n0_guess) - 2), int(n0_guess) + 3):
        counts = np.maximum(1, np.rint(n0 * decay ** np.arange(n_classes))).astype(np.int64)
        err = abs(int(counts.sum()) - n_train)
        if best is None or err < best[0]:
            best = (err, counts)
    return best[1]


def patch_locations(cfg: SynthConfig) -> list[tuple[float, float]]:
    """One grid cell centre per class; error when classes outnumber cells."""
    per_side = cfg.image_size // cfg.patch_size
    n_cells = per_side * per_side
    if cfg.n_classes > n_cells:
        raise ConfigError(
            f"{cfg.n_classes} classes need more patch cells than the "
            f"{per_side}x{per_side} grid provides"
        )
    step = 7 if math.gcd(7, n_cells) == 1 else 1
    centers = []
    for k in range(cfg.n_classes):
        cell = (k * step) % n_cells
        row, col = divmod(cell, per_side)
        cy = (row + 0.5) * cfg.patch_size
        cx = (col + 0.5) * cfg.patch_size
        centers.append((cx, cy))
    return centers


def class_amplitude(cfg: SynthConfig, class_index: int) -> float:
    if cfg.n_classes == 1:
        return cfg.patch_amplitude
    power = class_index / (cfg.n_classes - 1)
    return cfg.patch_amplitude * cfg.rare_amplitude_factor**power


def _patch_pattern(cfg: SynthConfig, class_index: int, cx: float, cy: float) -> np.ndarray:
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    sigma = cfg.patch_size / 4.0
    envelope = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    theta = math.pi * class_index / max(1, cfg.n_classes)
    u = dx * math.cos(theta) + dy * math.sin(theta)
    cycles = 2 + class_index % 3
    texture = 0.55 + 0.45 * np.cos(2.0 * math.pi * cycles * u / cfg.patch_size)
    return class_amplitude(cfg, class_index) * envelope * texture


def _render_image(cfg: SynthConfig, class_index: int, centers, rng) -> tuple[np.ndarray, tuple[float, float]]:
    size = cfg.image_size
    cx0, cy0 = centers[class_index]
    jitter = cfg.patch_size / 8.0
    cx = cx0 + rng.uniform(-jitter, jitter)
    cy = cy0 + rng.uniform(-jitter, jitter)
    img = cfg.background_level + cfg.noise_sigma * rng.standard_normal((size, size))
    img += _patch_pattern(cfg, class_index, cx, cy)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0).round().astype(np.uint8), (cx, cy)


def _simulate_gaze(cfg: SynthConfig, image_id, class_index, own_center, centers,
                   head_indices, rng) -> GazeSequence:
    n = cfg.fixations_per_image
    total = cfg.viewing_ms
    if head_indices and class_index not in head_indices:
        early_center = centers[int(rng.choice(head_indices))]
    else:
        early_center = own_center
    pts = []
    hi = float(cfg.image_size - 1)
    for i in range(n):
        onset = (i + rng.uniform(0.05, 0.75)) * total / n
        duration = rng.uniform(150.0, 600.0)
        anchor = early_center if onset < total / 2.0 else own_center
        x = min(max(anchor[0] + rng.normal(0.0, cfg.gaze_jitter_px), 0.0), hi)
        y = min(max(anchor[1] + rng.normal(0.0, cfg.gaze_jitter_px), 0.0), hi)
        pts.append(FixationPoint(round(x, 2), round(y, 2), round(onset, 2), round(duration, 2)))
    return GazeSequence(image_id=image_id, points=tuple(pts))


@dataclass
class SynthResult:
    manifest: DatasetManifest
    sequences: list[GazeSequence]
    counts: np.ndarray
    out_dir: Path = field(default=None)


def synth_dataset(cfg: SynthConfig, out_dir) -> SynthResult:
    """Generate images, gaze CSV and manifest under out_dir."""
    if cfg.image_size < cfg.patch_size:
        raise ConfigError("image_size must be at least patch_size")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    names = class_names_for(cfg)
    counts = long_tailed_counts(cfg.n_classes, cfg.imbalance_factor, cfg.n_train)
    centers = patch_locations(cfg)
    head_indices = tuple(grouping_for(cfg).indices("head"))

    records = []
    sequences = []
    image_no = 0
    for k, name in enumerate(names):
        per_split = (
            ("train", int(counts[k])),
            ("balanced_test", cfg.n_balanced_per_class),
            ("test", max(2, int(round(counts[k] * cfg.test_fraction)))),
        )
        for split, n_images in per_split:
            for i in range(n_images):
                image_id = f"{split}_{name}_{i:04d}"
                img_rng = np.random.default_rng([cfg.seed, _IMG_STREAM, image_no])
                pixels, own_center = _render_image(cfg, k, centers, img_rng)
                rel = f"images/{image_id}.png"
                Image.fromarray(pixels, mode="L").save(out_dir / rel)
                records.append(
                    ImageRecord(
                        id=image_id,
                        path=rel,
                        label=name,
                        split=split,
                        height=cfg.image_size,
                        width=cfg.image_size,
                        channels=1,
                    )
                )
                if split == "train":
                    gaze_rng = np.random.default_rng([cfg.seed, _GAZE_STREAM, image_no])
                    sequences.append(
                        _simulate_gaze(cfg, image_id, k, own_center, centers,
                                       head_indices, gaze_rng)
                    )
                image_no += 1

    man = DatasetManifest(
        class_names=names, records=records, class_groups=grouping_for(cfg), root=out_dir
    )
    save_manifest(man, out_dir / "manifest.json")
    (out_dir / "gaze.csv").write_text(serialize_fixation_csv(sequences), encoding="utf-8")
    return SynthResult(manifest=man, sequences=sequences, counts=counts, out_dir=out_dir)
