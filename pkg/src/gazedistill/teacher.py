"""Two-branch gaze-aligned teacher.

One branch gates features locally and is trained to reproduce the
integration attention maps, the other attends globally and is trained
against the disintegration maps.  Each branch stacks one sub-block per
time window; every sub-block halves the spatial resolution first and
then computes its attention, so the per-layer attention output for a
64x64 input comes out at 32, 16, 8 and 4 pixels per side.

The alignment loss compares each layer's attention map with the matching
window's target map after both are scaled to unit Euclidean norm, summed
over layers and averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .errors import DataError, FormatError
from .hva import read_hva, resize_map
from .manifest import DatasetManifest, load_image
from .optim import Adam, StepLr

INTEGRATION_BRANCH = "twi"
DISINTEGRATION_BRANCH = "twd"
BRANCHES = (INTEGRATION_BRANCH, DISINTEGRATION_BRANCH)

# sub-blocks stop halving once another halving would shrink the short side
# below 2 pixels; this keeps deep window counts usable on small inputs
_MIN_SIDE_TO_HALVE = 4


@dataclass(frozen=True)
class BranchSchedule:
    """Optimizer settings for one branch."""

    lr: float
    epochs: int
    step_size: int = 10
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class TeacherConfig:
    n_subblocks: int = 4
    base_channels: int = 16
    distill_dim: int = 64
    seed: int = 0
    batch_size: int = 256
    integration: BranchSchedule = field(default_factory=lambda: BranchSchedule(1e-4, 100))
    disintegration: BranchSchedule = field(default_factory=lambda: BranchSchedule(5e-4, 250))

    def __post_init__(self):
        if self.n_subblocks < 1:
            raise ValueError("need at least one sub-block")
        if self.base_channels < 1 or self.distill_dim < 1:
            raise ValueError("channel and feature dims must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def schedule(self, branch: str) -> BranchSchedule:
        return self.integration if branch == INTEGRATION_BRANCH else self.disintegration


@dataclass
class TeacherOutputs:
    """Per-layer attention maps plus the pooled distillation feature.

    attn_maps[t] has shape (batch, h_t, w_t); feature has shape (batch, d).
    """

    attn_maps: list
    feature: Tensor


def attention_resolutions(height: int, width: int, n_subblocks: int):
    """Spatial dims of each sub-block's attention map, downsampling included."""
    dims = []
    h, w = height, width
    for _ in range(n_subblocks):
        if min(h, w) >= _MIN_SIDE_TO_HALVE:
            if h % 2 or w % 2:
                raise ShapeError(
                    f"spatial dims {h}x{w} not divisible by 2 at sub-block {len(dims)}"
                )
            h, w = h // 2, w // 2
        dims.append((h, w))
    return dims


def init_teacher_params(cfg: TeacherConfig, in_channels: int, dtype=np.float64):
    """Seeded uniform He-style init, biases zero.

    Returns a flat name -> Parameter dict; names are prefixed with the
    branch tag so the two branches can be optimized separately.
    """
    rng = np.random.default_rng([cfg.seed, 101])
    params: dict[str, Parameter] = {}

    def uniform(shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    def add(name, data):
        params[name] = Parameter(data, name)

    c = cfg.base_channels
    for branch in BRANCHES:
        c_in = in_channels
        for t in range(cfg.n_subblocks):
            if branch == INTEGRATION_BRANCH:
                add(f"{branch}.b{t}.proj.w", uniform((c, c_in), c_in))
                add(f"{branch}.b{t}.proj.b", np.zeros((c, 1), dtype=dtype))
                add(f"{branch}.b{t}.mix.w", uniform((c, 2 * c), 2 * c))
                add(f"{branch}.b{t}.mix.b", np.zeros((c, 1), dtype=dtype))
            else:
                add(f"{branch}.b{t}.key.w", uniform((c, c_in), c_in))
                add(f"{branch}.b{t}.key.b", np.zeros((c, 1), dtype=dtype))
                add(f"{branch}.b{t}.value.w", uniform((c, c_in), c_in))
                add(f"{branch}.b{t}.value.b", np.zeros((c, 1), dtype=dtype))
            c_in = c
        add(f"{branch}.head.w", uniform((c, cfg.distill_dim), c))
        add(f"{branch}.head.b", np.zeros(cfg.distill_dim, dtype=dtype))
    return params


def branch_params(params: dict, branch: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(branch + ".")}


def _as_batch(image):
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    # images arrive in [0,1]; center the range so brightness does not
    # swamp contrast once spatial pooling averages everything together
    return ad.sub(x, 0.5)


def _pointwise(x, w, b):
    # 1x1 convolution as a broadcast matmul over flattened positions
    n, c, h, wd = x.data.shape
    flat = ad.reshape(x, (n, c, h * wd))
    out = ad.add(ad.matmul(w, flat), b)
    return ad.reshape(out, (n, w.data.shape[0], h, wd))


def _downsample(x):
    h, w = x.data.shape[2], x.data.shape[3]
    if min(h, w) < _MIN_SIDE_TO_HALVE:
        return x
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by 2")
    return ad.avg_pool2d(x, 2, 2)


def twi_forward(image, params: dict, cfg: TeacherConfig) -> TeacherOutputs:
    """Locally gated branch.

    Per sub-block: downsample, project pointwise, pool two local context
    maps (3x3 and 7x7), mix them into a sigmoid gate, multiply the gate
    back onto the projection.  The attention map is the channel mean of
    the gate.
    """
    x = _as_batch(image)
    maps = []
    for t in range(cfg.n_subblocks):
        x = _downsample(x)
        z = _pointwise(x, params[f"twi.b{t}.proj.w"], params[f"twi.b{t}.proj.b"])
        m1 = ad.avg_pool2d(z, 3, 1)
        m2 = ad.avg_pool2d(z, 7, 1)
        gate = ad.sigmoid(
            _pointwise(ad.concat([m1, m2], axis=1), params[f"twi.b{t}.mix.w"], params[f"twi.b{t}.mix.b"])
        )
        maps.append(ad.mean(gate, axis=1))
        x = ad.mul(z, gate)
    feature = ad.add(ad.matmul(ad.global_avg_pool(x), params["twi.head.w"]), params["twi.head.b"])
    return TeacherOutputs(maps, feature)


def twd_forward(image, params: dict, cfg: TeacherConfig) -> TeacherOutputs:
    """Globally attending branch.

    Per sub-block: downsample, project keys and values pointwise, form a
    global query by average-pooling the keys, softmax the key-query
    products over positions, and add the attention-weighted value sum
    back onto every position.  The attention map is the softmax itself.
    """
    x = _as_batch(image)
    maps = []
    for t in range(cfg.n_subblocks):
        x = _downsample(x)
        n, _, h, w = x.data.shape
        c = cfg.base_channels
        keys = _pointwise(x, params[f"twd.b{t}.key.w"], params[f"twd.b{t}.key.b"])
        values = _pointwise(x, params[f"twd.b{t}.value.w"], params[f"twd.b{t}.value.b"])
        query = ad.reshape(ad.global_avg_pool(keys), (n, c, 1))
        flat_k = ad.reshape(keys, (n, c, h * w))
        logits = ad.mul(ad.tsum(ad.mul(flat_k, query), axis=1), 1.0 / math.sqrt(c))
        attn = ad.softmax(logits, axis=1)
        maps.append(ad.reshape(attn, (n, h, w)))
        flat_v = ad.reshape(values, (n, c, h * w))
        context = ad.tsum(ad.mul(flat_v, ad.reshape(attn, (n, 1, h * w))), axis=2)
        x = ad.add(values, ad.reshape(context, (n, c, 1, 1)))
    feature = ad.add(ad.matmul(ad.global_avg_pool(x), params["twd.head.w"]), params["twd.head.b"])
    return TeacherOutputs(maps, feature)


def _unit_rows(flat: Tensor) -> Tensor:
    """Scale each row to unit norm inside the graph.

    Rows that are exactly zero take the uniform-map convention instead:
    the row becomes the normalized all-ones vector and contributes no
    gradient (the normalization is not differentiable there anyway).
    """
    n, k = flat.data.shape
    norms = np.linalg.norm(flat.data, axis=1)
    mask = (norms > 0).astype(flat.data.dtype).reshape(n, 1)
    sq = ad.tsum(ad.mul(flat, flat), axis=1, keepdims=True)
    # dead rows get denominator 1 so sqrt never sees 0
    safe = ad.sqrt(ad.add(ad.mul(sq, mask), 1.0 - mask))
    fill = np.where(mask == 0, 1.0 / math.sqrt(k), 0.0)
    return ad.add(ad.mul(ad.div(flat, safe), mask), fill)


def _unit_rows_const(flat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    out = np.divide(flat, norms, out=np.zeros_like(flat), where=norms > 0)
    out[norms[:, 0] == 0] = 1.0 / math.sqrt(flat.shape[1])
    return out


def windowed_alignment_loss(maps, targets) -> Tensor:
    """Sum over windows of the distance between unit-normalized attention
    maps and unit-normalized target maps, averaged over the batch.

    Each summand lies in [0, 2], so the total lies in [0, 2L].
    """
    if len(maps) != len(targets):
        raise ShapeError(f"{len(maps)} attention maps vs {len(targets)} target maps")
    total = None
    for out_map, target in zip(maps, targets):
        o = out_map if isinstance(out_map, Tensor) else Tensor(out_map)
        if o.data.ndim == 2:
            o = ad.reshape(o, (1,) + o.data.shape)
        n = o.data.shape[0]
        tgt = np.asarray(target, dtype=o.data.dtype)
        if tgt.ndim == 2:
            tgt = np.broadcast_to(tgt, (n,) + tgt.shape)
        if tgt.shape != o.data.shape:
            raise ShapeError(f"target shape {tgt.shape} vs attention map {o.data.shape}")
        flat = ad.reshape(o, (n, -1))
        diff = ad.sub(_unit_rows(flat), _unit_rows_const(tgt.reshape(n, -1)))
        ssq = ad.tsum(ad.mul(diff, diff), axis=1)
        # a map can match its target exactly (constant map vs uniform-convention
        # target); sqrt backward at 0 would blow up, so mask those rows out
        live = (ssq.data > 0).astype(ssq.data.dtype)
        dist = ad.mul(ad.sqrt(ad.add(ad.mul(ssq, live), 1.0 - live)), live)
        term = ad.mean(dist)
        total = term if total is None else ad.add(total, term)
    return total


_FORWARDS = {INTEGRATION_BRANCH: twi_forward, DISINTEGRATION_BRANCH: twd_forward}


@dataclass
class TeacherTrainResult:
    params: dict
    config: TeacherConfig
    history: dict
    in_channels: int


def _branch_targets(hva_set, branch, resolutions, dtype):
    stack = hva_set.integration if branch == INTEGRATION_BRANCH else hva_set.disintegration
    return [
        resize_map(stack[t].astype(np.float64), h, w).astype(dtype)
        for t, (h, w) in enumerate(resolutions)
    ]


def train_teacher(
    manifest: DatasetManifest,
    hva_dir,
    cfg: TeacherConfig,
    dtype=np.float32,
    params: dict | None = None,
) -> TeacherTrainResult:
    """Train both branches, each on its own loss and schedule.

    Attention targets are the per-window maps resized to every layer's
    resolution; layer t is aligned with window t.
    """
    records = manifest.split_records("train")
    if not records:
        raise DataError("train split is empty")
    in_channels = records[0].channels
    if params is None:
        params = init_teacher_params(cfg, in_channels, dtype=dtype)

    resolutions = attention_resolutions(records[0].height, records[0].width, cfg.n_subblocks)
    images: dict[str, np.ndarray] = {}
    hva_sets: dict[str, object] = {}
    for rec in records:
        images[rec.id] = load_image(rec, manifest.root).astype(dtype)
        try:
            hva_sets[rec.id] = read_hva(hva_dir, rec.id)
        except FormatError as exc:
            raise DataError(f"no usable attention maps for train image '{rec.id}'") from exc
        if hva_sets[rec.id].n_windows != cfg.n_subblocks:
            raise DataError(
                f"image '{rec.id}' has {hva_sets[rec.id].n_windows} attention windows, "
                f"teacher expects {cfg.n_subblocks}"
            )

    history: dict[str, list] = {}
    for branch_no, branch in enumerate(BRANCHES):
        sched = cfg.schedule(branch)
        own = branch_params(params, branch)
        opt = Adam(own.values())
        lr_sched = StepLr(sched.lr, sched.step_size, sched.gamma)
        rng = np.random.default_rng([cfg.seed, 211, branch_no])
        targets = {
            rec.id: _branch_targets(hva_sets[rec.id], branch, resolutions, dtype)
            for rec in records
        }
        batch = min(cfg.batch_size, len(records))
        losses = []
        for epoch in range(sched.epochs):
            lr = lr_sched.lr_at(epoch)
            order = rng.permutation(len(records))
            epoch_loss = 0.0
            for start in range(0, len(records), batch):
                chunk = [records[i] for i in order[start : start + batch]]
                x = np.stack([images[r.id] for r in chunk])
                batch_targets = [
                    np.stack([targets[r.id][t] for r in chunk])
                    for t in range(cfg.n_subblocks)
                ]
                out = _FORWARDS[branch](x, params, cfg)
                loss = windowed_alignment_loss(out.attn_maps, batch_targets)
                opt.zero_grad()
                ad.backward(loss)
                opt.step(lr)
                epoch_loss += loss.item() * len(chunk)
            losses.append(epoch_loss / len(records))
        history[branch] = losses

    return TeacherTrainResult(params, cfg, history, in_channels)
