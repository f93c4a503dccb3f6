"""Student classifier and its distillation objective.

The student is a small residual network with two heads: class logits and
a feature projection matched against the fused teacher representation.
Its loss combines a margin-adjusted classification term, where rare
classes get wider margins, with the negative log Bhattacharyya overlap
between the student's feature distribution and the teacher fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .errors import ConfigError, DataError, NumericError, ValidationError
from .manifest import DatasetManifest, load_image
from .optim import Adam, StepLr
from .teacher import BranchSchedule, twd_forward, twi_forward


@dataclass(frozen=True)
class FusionParams:
    distill_dim: int = 64
    eps_bd: float = 1e-12
    lambda_kd: float = 1.0

    def __post_init__(self):
        if self.eps_bd <= 0:
            raise ConfigError(f"eps_bd must be positive, got {self.eps_bd}")
        if self.lambda_kd < 0:
            raise ConfigError(f"lambda_kd must be >= 0, got {self.lambda_kd}")


@dataclass(frozen=True)
class LdamParams:
    """Per-class margins, widest for the rarest class."""

    margins: tuple
    m_max: float = 0.5


@dataclass(frozen=True)
class StudentConfig:
    n_classes: int
    stages: int = 3
    base_channels: int = 16
    distill_dim: int = 64
    seed: int = 0
    batch_size: int = 256
    m_max: float = 0.5
    schedule: BranchSchedule = field(default_factory=lambda: BranchSchedule(1e-4, 100))

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.stages < 1 or self.base_channels < 1 or self.distill_dim < 1:
            raise ConfigError("stages, channels and feature dims must be positive")


def init_student_params(cfg: StudentConfig, in_channels: int, dtype=np.float64):
    rng = np.random.default_rng([cfg.seed, 307])
    params: dict[str, Parameter] = {}

    def conv(name, c_in, c_out):
        limit = math.sqrt(6.0 / (c_in * 9))
        params[f"{name}.w"] = Parameter(
            rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)).astype(dtype), f"{name}.w"
        )
        params[f"{name}.b"] = Parameter(np.zeros((c_out, 1, 1), dtype=dtype), f"{name}.b")

    def linear(name, c_in, c_out):
        limit = math.sqrt(6.0 / c_in)
        params[f"{name}.w"] = Parameter(
            rng.uniform(-limit, limit, size=(c_in, c_out)).astype(dtype), f"{name}.w"
        )
        params[f"{name}.b"] = Parameter(np.zeros(c_out, dtype=dtype), f"{name}.b")

    c = cfg.base_channels
    conv("entry", in_channels, c)
    for s in range(cfg.stages):
        conv(f"s{s}.c1", c, c)
        conv(f"s{s}.c2", c, c)
        if s + 1 < cfg.stages:
            conv(f"t{s}", c, 2 * c)
            c = 2 * c
    linear("cls", c, cfg.n_classes)
    linear("dist", c, cfg.distill_dim)
    return params


def _conv(x, params, name, stride=1):
    return ad.add(ad.conv2d(x, params[f"{name}.w"], stride=stride), params[f"{name}.b"])


def student_forward(image, params: dict, cfg: StudentConfig):
    """Returns (logits, distill feature), both with a leading batch axis."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    # same centering convention as the teacher branches
    x = ad.relu(_conv(ad.sub(x, 0.5), params, "entry", stride=2))
    for s in range(cfg.stages):
        inner = ad.relu(_conv(x, params, f"s{s}.c1"))
        x = ad.relu(ad.add(x, _conv(inner, params, f"s{s}.c2")))
        if s + 1 < cfg.stages:
            x = ad.relu(_conv(x, params, f"t{s}", stride=2))
    pooled = ad.global_avg_pool(x)
    logits = ad.add(ad.matmul(pooled, params["cls.w"]), params["cls.b"])
    feature = ad.add(ad.matmul(pooled, params["dist.w"]), params["dist.b"])
    return logits, feature


def _stable_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_teacher_features(f_i, f_d) -> np.ndarray:
    """Distribution over the distill bins from the two branch features.

    Softmax of the elementwise mean; the output is a constant target, so
    plain arrays come back even when tensors go in.
    """
    a = f_i.data if isinstance(f_i, Tensor) else np.asarray(f_i, dtype=np.float64)
    b = f_d.data if isinstance(f_d, Tensor) else np.asarray(f_d, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"branch features disagree: {a.shape} vs {b.shape}")
    return _stable_softmax((a + b) / 2.0)


def bd_loss(f_s, fused, eps_bd: float = 1e-12) -> Tensor:
    """Negative log Bhattacharyya coefficient, clamped away from -inf.

    The student feature goes through a softmax; the fused target is taken
    as a fixed distribution.  Batched inputs are averaged.
    """
    f = f_s if isinstance(f_s, Tensor) else Tensor(f_s)
    target = fused.data if isinstance(fused, Tensor) else np.asarray(fused, dtype=f.data.dtype)
    if not np.isfinite(f.data).all() or not np.isfinite(target).all():
        raise NumericError("non-finite input to the distillation loss")
    if f.data.shape[-1] != target.shape[-1]:
        raise ShapeError(f"feature dim {f.data.shape[-1]} vs target dim {target.shape[-1]}")
    p = ad.softmax(f, axis=-1)
    # sqrt(p)*sqrt(J) keeps the backward clear of the J=0 coordinates
    bc = ad.tsum(ad.mul(ad.sqrt(p), np.sqrt(target)), axis=-1)
    clamped = ad.add(ad.relu(ad.sub(bc, eps_bd)), eps_bd)
    loss = ad.mul(ad.log(clamped), -1.0)
    if loss.data.ndim > 0:
        loss = ad.mean(loss)
    return loss


def margins_from_counts(counts, m_max: float = 0.5) -> LdamParams:
    """Margins proportional to n^(-1/4), scaled so the rarest class hits m_max."""
    arr = np.asarray(counts, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("no class counts given")
    if (arr < 1).any():
        bad = int(np.argmin(arr))
        raise ConfigError(f"class {bad} has count {arr[bad]}; every class needs >= 1")
    scale = m_max * arr.min() ** 0.25
    return LdamParams(tuple(scale / arr**0.25), m_max)


def ldam_loss(logits, labels, margins) -> Tensor:
    """Cross-entropy after subtracting each true class's margin from its logit."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    if z.data.ndim == 1:
        z = ad.reshape(z, (1, -1))
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    deltas = np.asarray(margins.margins if isinstance(margins, LdamParams) else margins,
                        dtype=z.data.dtype)
    n, k = z.data.shape
    if deltas.shape != (k,):
        raise ShapeError(f"{deltas.shape[0]} margins for {k} classes")
    if y.shape != (n,):
        raise ShapeError(f"{y.shape[0]} labels for {n} logit rows")
    if (y < 0).any() or (y >= k).any():
        bad = y[(y < 0) | (y >= k)][0]
        raise ValidationError(f"label {bad} out of range for {k} classes")

    onehot = np.zeros((n, k), dtype=z.data.dtype)
    onehot[np.arange(n), y] = 1.0
    adj = ad.sub(z, onehot * deltas[y][:, None])
    # log-sum-exp with the row max folded in as a constant shift
    shift = adj.data.max(axis=1, keepdims=True)
    lse = ad.add(ad.log(ad.tsum(ad.exp(ad.sub(adj, shift)), axis=1)), shift[:, 0])
    picked = ad.tsum(ad.mul(adj, onehot), axis=1)
    return ad.mean(ad.sub(lse, picked))


def student_loss(logits, labels, f_s, f_i, f_d, ldam: LdamParams,
                 fusion: FusionParams) -> Tensor:
    """Margin classification term plus weighted distillation term."""
    total = ldam_loss(logits, labels, ldam)
    if fusion.lambda_kd != 0.0:
        fused = fuse_teacher_features(f_i, f_d)
        total = ad.add(total, ad.mul(bd_loss(f_s, fused, fusion.eps_bd), fusion.lambda_kd))
    return total


@dataclass
class StudentTrainResult:
    params: dict
    config: StudentConfig
    fusion: FusionParams
    history: dict
    in_channels: int


def train_student(
    manifest: DatasetManifest,
    teacher,
    cfg: StudentConfig,
    fusion: FusionParams | None = None,
    dtype=np.float32,
    params: dict | None = None,
) -> StudentTrainResult:
    """Minimize the student objective against a frozen teacher.

    Teacher features are extracted once up front with gradient recording
    off; nothing in the loop can touch the teacher parameters.
    """
    if fusion is None:
        fusion = FusionParams(distill_dim=cfg.distill_dim)
    t_cfg = teacher.config
    if not (cfg.distill_dim == t_cfg.distill_dim == fusion.distill_dim):
        raise ConfigError(
            f"distill dims disagree: student {cfg.distill_dim}, "
            f"teacher {t_cfg.distill_dim}, fusion {fusion.distill_dim}"
        )

    records = manifest.split_records("train")
    if not records:
        raise DataError("train split is empty")
    in_channels = records[0].channels
    if params is None:
        params = init_student_params(cfg, in_channels, dtype=dtype)

    counts = manifest.train_counts()
    ldam = margins_from_counts(counts, cfg.m_max)
    labels = np.array([manifest.label_index(r.label) for r in records], dtype=np.intp)
    images = np.stack([load_image(r, manifest.root) for r in records]).astype(dtype)

    # frozen teacher: plain tensors record no graph, so no gradient can flow back
    frozen = {k: Tensor(np.asarray(p.data, dtype=dtype)) for k, p in teacher.params.items()}
    fused = np.empty((len(records), cfg.distill_dim), dtype=np.float64)
    extract_batch = min(cfg.batch_size, len(records))
    for start in range(0, len(records), extract_batch):
        chunk = images[start : start + extract_batch]
        f_i = twi_forward(chunk, frozen, t_cfg).feature
        f_d = twd_forward(chunk, frozen, t_cfg).feature
        fused[start : start + len(chunk)] = fuse_teacher_features(f_i, f_d)

    opt = Adam(params.values())
    lr_sched = StepLr(cfg.schedule.lr, cfg.schedule.step_size, cfg.schedule.gamma)
    rng = np.random.default_rng([cfg.seed, 401])
    batch = min(cfg.batch_size, len(records))
    history: dict[str, list] = {"loss": [], "ldam": [], "bd": []}
    for epoch in range(cfg.schedule.epochs):
        lr = lr_sched.lr_at(epoch)
        order = rng.permutation(len(records))
        sums = {"loss": 0.0, "ldam": 0.0, "bd": 0.0}
        for start in range(0, len(records), batch):
            idx = order[start : start + batch]
            z, f_s = student_forward(images[idx], params, cfg)
            cls_term = ldam_loss(z, labels[idx], ldam)
            kd_term = bd_loss(f_s, fused[idx].astype(dtype), fusion.eps_bd)
            loss = ad.add(cls_term, ad.mul(kd_term, fusion.lambda_kd))
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr)
            sums["loss"] += loss.item() * len(idx)
            sums["ldam"] += cls_term.item() * len(idx)
            sums["bd"] += kd_term.item() * len(idx)
        for key in history:
            history[key].append(sums[key] / len(records))
    return StudentTrainResult(params, cfg, fusion, history, in_channels)
