"""Command-line driver: each pipeline stage, the window sweep, the
distillation ablation, and the gradient self-check."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad_check
from .checkpoint import (
    CheckpointMeta,
    check_tensor_names,
    load_checkpoint,
    require_config_hash,
    require_stage,
    save_checkpoint,
)
from .config import RunConfig, config_from_dict, config_hash, load_run_config, save_run_config
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    MetricError,
    NumericError,
    ParseError,
    ValidationError,
)
from .fixations import first_sequence_per_image, parse_fixation_csv, serialize_fixation_csv, validate_sequence
from .hva import compute_hva, write_hva
from .manifest import DatasetManifest, load_manifest
from .metrics import evaluate as run_evaluation
from .metrics import save_report, welch_t_test
from .student import (
    FusionParams,
    StudentTrainResult,
    bd_loss,
    init_student_params,
    ldam_loss,
    margins_from_counts,
    student_forward,
    student_loss,
    train_student,
)
from .synth import synth_dataset
from .teacher import (
    DISINTEGRATION_BRANCH,
    INTEGRATION_BRANCH,
    TeacherTrainResult,
    attention_resolutions,
    branch_params,
    init_teacher_params,
    train_teacher,
    twd_forward,
    twi_forward,
    windowed_alignment_loss,
)

_CLI_ERRORS = (
    ParseError,
    ValidationError,
    DataError,
    ConfigError,
    FormatError,
    NumericError,
    MetricError,
)

GRAD_TOL = 1e-4
SWEEP_WINDOW_COUNTS = (2, 4, 8)


# ------------------------------------------------------------ plumbing


def _load_cfg(args) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "data_dir": getattr(args, "data", None),
        "hva_dir": getattr(args, "hva", None),
    }
    if getattr(args, "config", None):
        return load_run_config(args.config, overrides)
    return config_from_dict({}, overrides)


def _paths(cfg: RunConfig):
    out = Path(cfg.out_dir)
    data = Path(cfg.data_dir) if cfg.data_dir else out / "data"
    hva = Path(cfg.hva_dir) if cfg.hva_dir else out / "hva"
    return out, data, hva


def _dtype(args):
    return np.float64 if getattr(args, "precision", "single") == "double" else np.float32


def _manifest_at(data: Path) -> DatasetManifest:
    path = data / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest at {path}; run the synth or ingest stage first")
    manifest = load_manifest(path)
    if not manifest.records:
        raise DataError(f"manifest {path} lists no images")
    return manifest


def _in_channels(manifest: DatasetManifest) -> int:
    return manifest.records[0].channels


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8"
    )


# ------------------------------------------------------- stage helpers


def _generate_hva(cfg: RunConfig, manifest: DatasetManifest, data: Path, hva: Path):
    """Render per-window attention maps for every train image with gaze."""
    gaze_path = data / "gaze.csv"
    if not gaze_path.exists():
        raise DataError(f"no gaze file at {gaze_path}")
    by_image = first_sequence_per_image(parse_fixation_csv(gaze_path))
    params = cfg.hva_params()
    written = 0
    skipped = []
    for rec in manifest.split_records("train"):
        seq = by_image.get(rec.id)
        if seq is None:
            skipped.append(rec.id)
            continue
        seq, _ = validate_sequence(seq, rec.width, rec.height)
        write_hva(compute_hva(seq, rec.width, rec.height, params), hva)
        written += 1
    return written, skipped


def _train_teacher_stage(cfg: RunConfig, manifest, hva: Path, dtype) -> TeacherTrainResult:
    return train_teacher(manifest, hva, cfg.teacher_config(), dtype=dtype)


def _train_student_stage(
    cfg: RunConfig, manifest, teacher: TeacherTrainResult, dtype, lambda_kd=None
) -> StudentTrainResult:
    fusion = cfg.fusion_params()
    if lambda_kd is not None:
        fusion = replace(fusion, lambda_kd=lambda_kd)
    scfg = cfg.student_config(len(manifest.class_names))
    return train_student(manifest, teacher, scfg, fusion, dtype=dtype)


def _load_teacher(cfg: RunConfig, manifest, path: Path) -> TeacherTrainResult:
    tensors, meta = load_checkpoint(path)
    require_stage(meta, "teacher", path)
    require_config_hash(meta, config_hash(cfg), path)
    tcfg = cfg.teacher_config()
    channels = _in_channels(manifest)
    check_tensor_names(tensors, init_teacher_params(tcfg, channels).keys(), path)
    params = {name: Tensor(data) for name, data in tensors.items()}
    return TeacherTrainResult(params=params, config=tcfg, history={}, in_channels=channels)


def _load_student(cfg: RunConfig, manifest, path: Path) -> StudentTrainResult:
    tensors, meta = load_checkpoint(path)
    require_stage(meta, "student", path)
    require_config_hash(meta, config_hash(cfg), path)
    scfg = cfg.student_config(len(manifest.class_names))
    channels = _in_channels(manifest)
    check_tensor_names(tensors, init_student_params(scfg, channels).keys(), path)
    params = {name: Tensor(data) for name, data in tensors.items()}
    return StudentTrainResult(
        params=params,
        config=scfg,
        fusion=cfg.fusion_params(),
        history={},
        in_channels=channels,
    )


def _print_report(rep) -> None:
    print(f"split {rep.split}  samples {rep.n_samples}  seed {rep.seed}")
    print(f"avg_acc {rep.avg_acc:.4f}  balanced_acc {rep.balanced_acc:.4f}")
    print(
        f"mcc {rep.mcc:.4f}  auc_macro_ovr {rep.auc_macro_ovr:.4f}  "
        f"weighted_f1 {rep.weighted_f1:.4f}"
    )
    cells = []
    for name in ("head", "medium", "tail"):
        value = rep.groups.get(name)
        cells.append(f"{name} {value:.4f}" if value is not None else f"{name} -")
    print("  ".join(cells))


# ------------------------------------------------------ gradient checks


def registered_grad_checks(max_coords_per_param: int = 6):
    """Finite-difference checks for every training loss, double precision.

    Returns (name, max relative error, seconds) per loss, worst first
    kept in registration order.
    """
    from .student import StudentConfig
    from .teacher import TeacherConfig

    rng = np.random.default_rng(1234)
    results = []

    tcfg = TeacherConfig(n_subblocks=4, base_channels=4, distill_dim=8, seed=5)
    image = rng.normal(size=(1, 1, 32, 32))
    teacher_params = init_teacher_params(tcfg, in_channels=1, dtype=np.float64)
    targets = [
        rng.random((1, h, w)) + 0.05 for h, w in attention_resolutions(32, 32, tcfg.n_subblocks)
    ]
    for branch, forward, name in (
        (INTEGRATION_BRANCH, twi_forward, "integration-alignment"),
        (DISINTEGRATION_BRANCH, twd_forward, "disintegration-alignment"),
    ):
        subset = branch_params(teacher_params, branch)

        def alignment_level(forward=forward, subset=subset):
            outs = forward(Tensor(image), subset, tcfg)
            return windowed_alignment_loss(outs.attn_maps, targets)

        start = time.perf_counter()
        # alignment gradients through the attention softmax run small, so a
        # wider step keeps cancellation noise out of the relative error
        err = grad_check(
            alignment_level,
            list(subset.values()),
            eps=1e-4,
            max_coords_per_param=max_coords_per_param,
            rng=np.random.default_rng(7),
        )
        results.append((name, err, time.perf_counter() - start))

    scfg = StudentConfig(n_classes=3, stages=2, base_channels=4, distill_dim=6, seed=9)
    student_params = init_student_params(scfg, in_channels=1, dtype=np.float64)
    s_image = rng.normal(size=(1, 1, 32, 32))
    labels = np.array([1])
    margins = margins_from_counts((60, 9, 25), m_max=0.5)
    target = rng.random((1, scfg.distill_dim)) + 0.1
    target /= target.sum(axis=1, keepdims=True)
    f_i = rng.normal(size=(1, scfg.distill_dim))
    f_d = rng.normal(size=(1, scfg.distill_dim))
    fusion = FusionParams(distill_dim=scfg.distill_dim, lambda_kd=0.7)

    def bhattacharyya_level():
        _, feature = student_forward(Tensor(s_image), student_params, scfg)
        return bd_loss(feature, target, fusion.eps_bd)

    def margin_level():
        logits, _ = student_forward(Tensor(s_image), student_params, scfg)
        return ldam_loss(logits, labels, margins)

    def total_level():
        logits, feature = student_forward(Tensor(s_image), student_params, scfg)
        return student_loss(logits, labels, feature, f_i, f_d, margins, fusion)

    for name, fn in (
        ("bhattacharyya", bhattacharyya_level),
        ("margin", margin_level),
        ("student-total", total_level),
    ):
        start = time.perf_counter()
        # the student trunk keeps some pre-activations near zero, so the
        # step must stay well inside the distance to the nearest relu kink
        err = grad_check(
            fn,
            list(student_params.values()),
            eps=1e-6,
            max_coords_per_param=max_coords_per_param,
            rng=np.random.default_rng(11),
        )
        results.append((name, err, time.perf_counter() - start))
    return results


# ------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out, data, _ = _paths(cfg)
    result = synth_dataset(cfg.synth_config(), data)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, out / "run_config.json")
    counts = result.counts
    print(f"wrote {len(result.manifest.records)} images under {data}")
    print(f"train counts per class: {counts.tolist()}")
    print(f"gaze sequences: {len(result.sequences)}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _load_cfg(args)
    out, data, _ = _paths(cfg)
    csv_path = Path(args.csv) if args.csv else data / "gaze.csv"
    if not csv_path.exists():
        raise DataError(f"no fixation file at {csv_path}")
    manifest = _manifest_at(data)
    dims = {r.id: (r.width, r.height) for r in manifest.records}
    sequences = parse_fixation_csv(csv_path)
    kept = []
    unknown = []
    clamped = 0
    for seq in sequences:
        if seq.image_id not in dims:
            unknown.append(seq.image_id)
            continue
        width, height = dims[seq.image_id]
        fixed, report = validate_sequence(seq, width, height)
        clamped += report.n_clamped
        kept.append(fixed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gaze_ingested.csv").write_text(serialize_fixation_csv(kept), encoding="utf-8")
    print(f"ingested {len(kept)} sequences ({sum(len(s.points) for s in kept)} fixations)")
    print(f"clamped {clamped} out-of-bounds fixations")
    if unknown:
        print(f"dropped {len(unknown)} sequences for unknown images (first: {unknown[0]})")
    return 0


def cmd_hva_gen(args) -> int:
    cfg = _load_cfg(args)
    _, data, hva = _paths(cfg)
    manifest = _manifest_at(data)
    written, skipped = _generate_hva(cfg, manifest, data, hva)
    print(f"wrote attention maps for {written} train images under {hva}")
    if skipped:
        print(f"skipped {len(skipped)} train images without gaze (first: {skipped[0]})")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_cfg(args)
    out, data, hva = _paths(cfg)
    manifest = _manifest_at(data)
    result = _train_teacher_stage(cfg, manifest, hva, _dtype(args))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out / "teacher.gzlt", result.params, CheckpointMeta("teacher", cfg.seed, config_hash(cfg))
    )
    _write_json(out / "teacher_history.json", result.history)
    for branch in (INTEGRATION_BRANCH, DISINTEGRATION_BRANCH):
        losses = result.history[branch]
        if losses:
            print(f"{branch}: epoch 1 loss {losses[0]:.6f} -> epoch {len(losses)} loss {losses[-1]:.6f}")
    print(f"saved {out / 'teacher.gzlt'}")
    return 0


def cmd_train_student(args) -> int:
    cfg = _load_cfg(args)
    out, data, _ = _paths(cfg)
    manifest = _manifest_at(data)
    teacher_path = Path(args.teacher) if args.teacher else out / "teacher.gzlt"
    teacher = _load_teacher(cfg, manifest, teacher_path)
    result = _train_student_stage(cfg, manifest, teacher, _dtype(args))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out / "student.gzlt", result.params, CheckpointMeta("student", cfg.seed, config_hash(cfg))
    )
    _write_json(out / "student_history.json", result.history)
    losses = result.history["loss"]
    if losses:
        print(f"student: epoch 1 loss {losses[0]:.6f} -> epoch {len(losses)} loss {losses[-1]:.6f}")
    print(f"saved {out / 'student.gzlt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out, data, _ = _paths(cfg)
    manifest = _manifest_at(data)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "student.gzlt"
    student = _load_student(cfg, manifest, ckpt)
    rep = run_evaluation(student, manifest, args.split)
    out.mkdir(parents=True, exist_ok=True)
    save_report(rep, out / f"report_{args.split}.json")
    _print_report(rep)
    return 0


def cmd_sweep_windows(args) -> int:
    cfg = _load_cfg(args)
    out, data, _ = _paths(cfg)
    if not (data / "manifest.json").exists():
        synth_dataset(cfg.synth_config(), data)
    manifest = _manifest_at(data)
    dtype = _dtype(args)
    rows = []
    for n in SWEEP_WINDOW_COUNTS:
        sub = out / "sweep" / f"n{n}"
        cfg_n = replace(cfg, n_windows=n)
        hva = sub / "hva"
        _generate_hva(cfg_n, manifest, data, hva)
        teacher = _train_teacher_stage(cfg_n, manifest, hva, dtype)
        student = _train_student_stage(cfg_n, manifest, teacher, dtype)
        rep = run_evaluation(student, manifest, "balanced_test")
        sub.mkdir(parents=True, exist_ok=True)
        save_report(rep, sub / "report_balanced_test.json")
        rows.append(
            {
                "windows": n,
                "avg_acc": rep.avg_acc,
                "balanced_acc": rep.balanced_acc,
                "head": rep.groups["head"],
                "medium": rep.groups["medium"],
                "tail": rep.groups["tail"],
            }
        )
    _write_json(out / "sweep.json", rows)
    header = f"{'windows':>10}  {'avg_acc':>8}  {'head':>7}  {'medium':>7}  {'tail':>7}"
    print(header)
    for row in rows:
        mark = "*" if row["windows"] == cfg.n_windows else " "
        cells = [
            f"{row['windows']:>9}{mark}",
            f"{row['avg_acc']:>8.4f}",
        ]
        for name in ("head", "medium", "tail"):
            value = row[name]
            cells.append(f"{value:>7.4f}" if value is not None else f"{'-':>7}")
        print("  ".join(cells))
    return 0


def cmd_ablate_kd(args) -> int:
    cfg = _load_cfg(args)
    out, data, hva = _paths(cfg)
    if cfg.lambda_kd <= 0:
        raise ConfigError(f"the distillation ablation needs lambda_kd > 0, got {cfg.lambda_kd}")
    if not (data / "manifest.json").exists():
        synth_dataset(cfg.synth_config(), data)
    manifest = _manifest_at(data)
    if not hva.exists() or not any(hva.iterdir()):
        _generate_hva(cfg, manifest, data, hva)
    dtype = _dtype(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    tail_kd = []
    tail_base = []
    for seed in seeds:
        cfg_s = replace(cfg, seed=seed)
        teacher = _train_teacher_stage(cfg_s, manifest, hva, dtype)
        for lam, bucket in ((cfg.lambda_kd, tail_kd), (0.0, tail_base)):
            student = _train_student_stage(cfg_s, manifest, teacher, dtype, lambda_kd=lam)
            rep = run_evaluation(student, manifest, "balanced_test")
            tail = rep.groups["tail"]
            if tail is None:
                raise DataError("the dataset defines no tail classes to compare")
            bucket.append(tail)
        print(
            f"seed {seed}: tail acc {tail_kd[-1]:.4f} distilled "
            f"vs {tail_base[-1]:.4f} baseline"
        )
    wins = sum(1 for a, b in zip(tail_kd, tail_base) if a > b)
    summary = {
        "seeds": seeds,
        "lambda": cfg.lambda_kd,
        "tail_distilled": tail_kd,
        "tail_baseline": tail_base,
        "wins": wins,
    }
    try:
        t, df, p = welch_t_test(tail_kd, tail_base)
        summary.update({"t": t, "df": df, "p": p})
        print(f"wins {wins}/{len(seeds)}  t {t:.4f}  df {df:.2f}  p {p:.4f}")
    except MetricError as exc:
        summary.update({"t": None, "df": None, "p": None, "t_test_note": str(exc)})
        print(f"wins {wins}/{len(seeds)}  t-test unavailable: {exc}")
    _write_json(out / "ablation.json", summary)
    return 0


def cmd_gradcheck(args) -> int:
    results = registered_grad_checks(max_coords_per_param=args.coords)
    worst = 0.0
    for name, err, seconds in results:
        status = "PASS" if err < GRAD_TOL else "FAIL"
        print(f"{name:<26} max rel err {err:.3e}  ({seconds:.1f}s)  {status}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} against tolerance {GRAD_TOL:.0e}")
    return 0 if worst < GRAD_TOL else 1


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--data", help="override the dataset directory")
    common.add_argument("--hva", help="override the attention-map directory")

    precision = argparse.ArgumentParser(add_help=False)
    precision.add_argument(
        "--precision", choices=("single", "double"), default="single",
        help="training float width (default single)",
    )

    parser = argparse.ArgumentParser(
        prog="gazedistill",
        description="Gaze-derived attention distillation for long-tailed classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="parse and validate a fixation CSV")
    p.add_argument("--csv", help="fixation CSV (default <data>/gaze.csv)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("hva-gen", parents=[common], help="render windowed attention maps")
    p.set_defaults(func=cmd_hva_gen)

    p = sub.add_parser(
        "train-teacher", parents=[common, precision], help="train both teacher branches"
    )
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser(
        "train-student", parents=[common, precision], help="distill into the student"
    )
    p.add_argument("--teacher", help="teacher checkpoint (default <out>/teacher.gzlt)")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", parents=[common], help="score a student checkpoint")
    p.add_argument("--split", choices=("balanced_test", "test"), required=True)
    p.add_argument("--checkpoint", help="student checkpoint (default <out>/student.gzlt)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "sweep-windows", parents=[common, precision],
        help="run the full pipeline for 2, 4 and 8 windows",
    )
    p.set_defaults(func=cmd_sweep_windows)

    p = sub.add_parser(
        "ablate-kd", parents=[common, precision],
        help="compare distilled vs plain students across seeds",
    )
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")
    p.set_defaults(func=cmd_ablate_kd)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference loss checks")
    p.add_argument("--coords", type=int, default=6, help="sampled coordinates per parameter")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CLI_ERRORS as exc:
        print(f"gazedistill: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"gazedistill: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
