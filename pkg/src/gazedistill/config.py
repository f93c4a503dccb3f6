"""Run configuration: one JSON document driving every pipeline stage.

Defaults follow the published training recipe: integration branch at
lr 1e-4 for 100 epochs, disintegration branch at 5e-4 for 250, student
at 1e-4 for 100, batch 256, step decay by 0.1 every 10 epochs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .hva import HvaParams
from .student import FusionParams, StudentConfig
from .synth import SynthConfig
from .teacher import BranchSchedule, TeacherConfig

# output locations never influence the numbers, so they stay out of the hash
_PATH_FIELDS = ("data_dir", "hva_dir", "out_dir")
_SCHEDULE_FIELDS = ("integration", "disintegration", "student")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_windows: int = 4
    lambda_kd: float = 1.0
    eps_bd: float = 1e-12
    m_max: float = 0.5
    batch_size: int = 256
    # model sizes
    base_channels: int = 16
    distill_dim: int = 64
    student_stages: int = 3
    student_base_channels: int = 16
    # per-stage optimizer schedules
    integration: BranchSchedule = field(default_factory=lambda: BranchSchedule(1e-4, 100))
    disintegration: BranchSchedule = field(default_factory=lambda: BranchSchedule(5e-4, 250))
    student: BranchSchedule = field(default_factory=lambda: BranchSchedule(1e-4, 100))
    # attention-map rendering
    cluster_distance_px: float = 64.0
    sigma_integration: float = 64.0
    sigma_disintegration: float = 128.0
    substitute_weight: float = 0.5
    truncate_sigmas: float = 4.0
    # synthetic data source
    image_size: int = 64
    n_train: int = 2000
    imbalance_factor: float = 100.0
    n_classes_per_group: tuple = (3, 3, 2)
    n_balanced_per_class: int = 25
    fixations_per_image: int = 24
    # locations
    data_dir: str | None = None
    hva_dir: str | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        if self.n_windows < 1:
            raise ConfigError(f"n_windows must be >= 1, got {self.n_windows}")
        if self.lambda_kd < 0:
            raise ConfigError(f"lambda_kd must be >= 0, got {self.lambda_kd}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        for name in _SCHEDULE_FIELDS:
            sched = getattr(self, name)
            if sched.lr <= 0:
                raise ConfigError(f"{name} lr must be positive, got {sched.lr}")
            if sched.epochs <= 0:
                raise ConfigError(f"{name} epochs must be positive, got {sched.epochs}")
            if sched.step_size < 1:
                raise ConfigError(f"{name} step_size must be >= 1, got {sched.step_size}")
            if not (0.0 < sched.gamma <= 1.0):
                raise ConfigError(f"{name} gamma must lie in (0, 1], got {sched.gamma}")

    # stage-config builders

    def hva_params(self) -> HvaParams:
        return HvaParams(
            n_windows=self.n_windows,
            cluster_distance_px=self.cluster_distance_px,
            substitute_weight=self.substitute_weight,
            sigma_integration=self.sigma_integration,
            sigma_disintegration=self.sigma_disintegration,
            truncate_sigmas=self.truncate_sigmas,
        )

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(
            n_subblocks=self.n_windows,
            base_channels=self.base_channels,
            distill_dim=self.distill_dim,
            seed=self.seed,
            batch_size=self.batch_size,
            integration=self.integration,
            disintegration=self.disintegration,
        )

    def student_config(self, n_classes: int) -> StudentConfig:
        return StudentConfig(
            n_classes=n_classes,
            stages=self.student_stages,
            base_channels=self.student_base_channels,
            distill_dim=self.distill_dim,
            seed=self.seed,
            batch_size=self.batch_size,
            m_max=self.m_max,
            schedule=self.student,
        )

    def fusion_params(self) -> FusionParams:
        return FusionParams(
            distill_dim=self.distill_dim, eps_bd=self.eps_bd, lambda_kd=self.lambda_kd
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_classes_per_group=tuple(self.n_classes_per_group),
            imbalance_factor=self.imbalance_factor,
            image_size=self.image_size,
            n_train=self.n_train,
            seed=self.seed,
            n_balanced_per_class=self.n_balanced_per_class,
            fixations_per_image=self.fixations_per_image,
        )


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the behavioral fields, canonical JSON encoding."""
    doc = asdict(cfg)
    for name in _PATH_FIELDS:
        doc.pop(name)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def config_from_dict(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from parsed JSON, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    known = {f.name for f in fields(RunConfig)}
    merged = dict(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    kwargs = {}
    for key, value in merged.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SCHEDULE_FIELDS:
            if isinstance(value, BranchSchedule):
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object with lr/epochs")
            extra = set(value) - {"lr", "epochs", "step_size", "gamma"}
            if extra:
                raise ConfigError(f"unknown key {sorted(extra)[0]!r} in {key!r}")
            try:
                kwargs[key] = BranchSchedule(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad schedule for {key!r}: {exc}") from None
        elif key == "n_classes_per_group":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(doc, overrides)


def save_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_to_json(cfg) + "\n", encoding="utf-8")
