"""Time-windowed visual attention maps from fixation sequences.

The viewing duration splits into n equal windows by onset time. Each window
renders two map variants at image resolution:

* integration: fixations cluster by single linkage; the dominant cluster
  (largest total dwell) deposits full-weight impulses, the remaining
  "substitute" fixations deposit down-weighted ones, then a narrow Gaussian
  spreads them.
* disintegration: every fixation deposits its dwell unclustered, spread by
  a wider Gaussian.

Maps are peak-normalized; a window without fixations yields a uniform map
of ones. Sigmas are stated at native image resolution; scale them by the
resize factor when images are downscaled for training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import FormatError, ValidationError
from .fixations import GazeSequence

MAGIC = b"HVA1"
VERSION = 1
VARIANT_CODES = {"integration": 0, "disintegration": 1}
_CODE_VARIANTS = {v: k for k, v in VARIANT_CODES.items()}


@dataclass(frozen=True)
class HvaParams:
    n_windows: int = 4
    cluster_distance_px: float = 64.0
    substitute_weight: float = 0.5
    sigma_integration: float = 64.0
    sigma_disintegration: float = 128.0
    truncate_sigmas: float = 4.0

    def __post_init__(self):
        if self.n_windows < 1:
            raise ValidationError(f"n_windows must be >= 1, got {self.n_windows}")
        if not (0.0 <= self.substitute_weight <= 1.0):
            raise ValidationError(
                f"substitute weight must lie in [0, 1], got {self.substitute_weight}"
            )


def partition_fixations(seq: GazeSequence, n_windows: int):
    """Split fixations into n equal-width onset windows.

    Window of a fixation is floor(onset * n / total), capped at n - 1.
    """
    if n_windows < 1:
        raise ValidationError(f"n_windows must be >= 1, got {n_windows}")
    total = seq.total_duration_ms
    if total <= 0:
        raise ValidationError(
            f"sequence {seq.image_id!r} has zero viewing duration, cannot partition"
        )
    windows = [[] for _ in range(n_windows)]
    for p in seq.points:
        w = min(int(p.onset_ms * n_windows / total), n_windows - 1)
        windows[w].append(p)
    return windows


def cluster_fixations(points, distance_px: float):
    """Single-linkage clusters: connected components with edges between
    fixations at Euclidean distance <= distance_px (inclusive).

    Returns a list of index lists, each sorted, ordered by smallest index.
    """
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            dx = points[i].x_px - points[j].x_px
            dy = points[i].y_px - points[j].y_px
            if dx * dx + dy * dy <= distance_px * distance_px:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    comps = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return sorted(comps.values(), key=lambda c: c[0])


def main_cluster_split(points, distance_px: float):
    """Indices of the dominant cluster and of the substitutes.

    Dominant means largest total dwell duration; ties go to the cluster
    holding the earliest-onset fixation.
    """
    clusters = cluster_fixations(points, distance_px)
    if not clusters:
        return [], []

    def rank(cluster):
        dwell = sum(points[i].duration_ms for i in cluster)
        earliest = min(points[i].onset_ms for i in cluster)
        return (-dwell, earliest)

    best = min(clusters, key=rank)
    main = sorted(best)
    rest = sorted(i for c in clusters if c is not best for i in c)
    return main, rest


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Normalized 1-d Gaussian taps with radius ceil(truncate * sigma)."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    radius = int(np.ceil(truncate * sigma))
    if radius == 0:
        return np.ones(1)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_filter(grid: np.ndarray, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur with zero padding outside the grid."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValidationError(f"gaussian_filter expects a 2-d grid, got {grid.shape}")
    kernel = gaussian_kernel(sigma, truncate)
    out = K.correlate1d(grid, kernel, 0)
    return K.correlate1d(out, kernel, 1)


def deposit_impulses(points, weights, width: int, height: int) -> np.ndarray:
    """Sum dwell-weighted impulses at nearest-pixel positions."""
    grid = np.zeros((height, width), dtype=np.float64)
    for p, w in zip(points, weights):
        col = min(max(int(np.rint(p.x_px)), 0), width - 1)
        row = min(max(int(np.rint(p.y_px)), 0), height - 1)
        grid[row, col] += w
    return grid


def _normalize_peak(grid: np.ndarray, width: int, height: int) -> np.ndarray:
    peak = grid.max() if grid.size else 0.0
    if peak <= 0.0:
        return np.ones((height, width), dtype=np.float64)
    return grid / peak


def render_integration_map(points, width, height, params: HvaParams) -> np.ndarray:
    """Cluster-weighted, narrowly blurred, peak-normalized window map."""
    if not points:
        return np.ones((height, width), dtype=np.float64)
    main, rest = main_cluster_split(points, params.cluster_distance_px)
    weights = np.zeros(len(points))
    for i in main:
        weights[i] = points[i].duration_ms
    for i in rest:
        weights[i] = params.substitute_weight * points[i].duration_ms
    grid = deposit_impulses(points, weights, width, height)
    grid = gaussian_filter(grid, params.sigma_integration, params.truncate_sigmas)
    return _normalize_peak(grid, width, height)


def render_disintegration_map(points, width, height, params: HvaParams) -> np.ndarray:
    """Unclustered, widely blurred, peak-normalized window map."""
    if not points:
        return np.ones((height, width), dtype=np.float64)
    weights = [p.duration_ms for p in points]
    grid = deposit_impulses(points, weights, width, height)
    grid = gaussian_filter(grid, params.sigma_disintegration, params.truncate_sigmas)
    return _normalize_peak(grid, width, height)


@dataclass
class HvaSet:
    """Both windowed map stacks for one image, stored float32."""

    image_id: str
    width: int
    height: int
    integration: np.ndarray  # (n_windows, height, width)
    disintegration: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.integration.shape[0]


def compute_hva(seq: GazeSequence, width: int, height: int, params: HvaParams) -> HvaSet:
    windows = partition_fixations(seq, params.n_windows)
    integ = np.stack(
        [render_integration_map(w, width, height, params) for w in windows]
    ).astype(np.float32)
    disinteg = np.stack(
        [render_disintegration_map(w, width, height, params) for w in windows]
    ).astype(np.float32)
    return HvaSet(seq.image_id, width, height, integ, disinteg)


def resize_map(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resample of a 2-d map."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValidationError(f"resize_map expects a 2-d grid, got {grid.shape}")
    h, w = grid.shape
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target dims must be positive, got {(out_h, out_w)}")
    if (out_h, out_w) == (h, w):
        return grid.copy()
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


# on-disk format: one file per (image, variant)


def _variant_path(directory, image_id: str, variant: str) -> Path:
    suffix = {"integration": "int", "disintegration": "dis"}[variant]
    return Path(directory) / f"{image_id}.{suffix}.hva"


def _write_variant(path: Path, width, height, maps: np.ndarray, variant: str) -> None:
    code = VARIANT_CODES[variant]
    n = maps.shape[0]
    payload = np.ascontiguousarray(maps, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIIB", VERSION, width, height, n, code))
        f.write(payload)


def _read_variant(path: Path):
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0: {blob[:4]!r}")
    header_end = 4 + struct.calcsize("<IIIIB")
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    version, width, height, n, code = struct.unpack("<IIIIB", blob[4:header_end])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if code not in _CODE_VARIANTS:
        raise FormatError(f"{path}: unknown variant code {code} at offset {header_end - 1}")
    expected = n * height * width * 4
    if len(blob) - header_end != expected:
        raise FormatError(
            f"{path}: payload truncated at offset {len(blob)}, "
            f"expected {header_end + expected} bytes"
        )
    maps = np.frombuffer(blob, dtype="<f4", offset=header_end).reshape(n, height, width)
    return width, height, _CODE_VARIANTS[code], maps.copy()


def write_hva(hva_set: HvaSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_variant(
        _variant_path(directory, hva_set.image_id, "integration"),
        hva_set.width, hva_set.height, hva_set.integration, "integration",
    )
    _write_variant(
        _variant_path(directory, hva_set.image_id, "disintegration"),
        hva_set.width, hva_set.height, hva_set.disintegration, "disintegration",
    )


def read_hva(directory, image_id: str) -> HvaSet:
    parts = {}
    dims = {}
    for variant in ("integration", "disintegration"):
        path = _variant_path(directory, image_id, variant)
        if not path.exists():
            raise FormatError(f"missing attention map file {path}")
        width, height, tagged, maps = _read_variant(path)
        if tagged != variant:
            raise FormatError(f"{path}: variant tag says {tagged}, filename says {variant}")
        parts[variant] = maps
        dims[variant] = (width, height)
    if dims["integration"] != dims["disintegration"]:
        raise FormatError(
            f"{image_id}: variant dims disagree: {dims['integration']} vs "
            f"{dims['disintegration']}"
        )
    if parts["integration"].shape[0] != parts["disintegration"].shape[0]:
        raise FormatError(f"{image_id}: variant window counts disagree")
    width, height = dims["integration"]
    return HvaSet(image_id, width, height, parts["integration"], parts["disintegration"])
