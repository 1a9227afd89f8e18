"""Experiment commands: pretrain, distill, eval, the grids, and augmentation preview.

Every command writes into ``run.out``:

* ``<cmd>.manifest.txt``  the full config plus ``manifest.*`` keys (hash, seed, versions)
* ``<cmd>.metrics.jsonl`` one :class:`~crld.distill.MetricsRecord` per line, append-only
* checkpoints and CSV tables, depending on the command

Grid commands put each point in its own subdirectory, so every point is a
complete distill run that can be inspected or resumed on its own.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

import crld
from crld import checkpoint, config as cfgmod, kernels
from crld.augment import RngStream, StrongPolicy, WEAK_TAG, STRONG_TAG, strong_view, weak_view, write_ppm
from crld.config import RunConfig
from crld.data import load_cifar_binary, synthetic_splits
from crld.distill import (ABLATION_GRID, DistillConfig, StepContext, build_regressors, evaluate, train,
                          train_supervised)
from crld.models import Model, OptimizerState, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

VIEW_MODE_ROWS = (
    ("weak_weak", "weak_weak", ABLATION_GRID["J"]),
    ("strong_strong", "strong_strong", ABLATION_GRID["J"]),
    ("strong_weak", "strong_weak", ABLATION_GRID["J"]),
    ("no_cvl", "strong_weak", ABLATION_GRID["G"]),
)


class HarnessError(RuntimeError):
    pass


class MissingTeacherError(HarnessError):
    pass


class ConfigMismatchError(HarnessError):
    """A checkpoint or an earlier run directory does not match the config."""


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def load_data(cfg: RunConfig):
    d = cfg.data
    if d.kind == "synthetic":
        train_set, test_set = synthetic_splits(d.seed, d.num_classes, d.per_class_train, d.per_class_test,
                                               d.size, d.noise)
    else:
        train_set = load_cifar_binary(d.train_path, d.kind, "train")
        if d.test_path:
            test_set = load_cifar_binary(d.test_path, d.kind, "test",
                                         stats=(train_set.channel_mean, train_set.channel_std))
        else:
            test_set = replace(train_set, split="test")
    for role, mc in (("teacher", cfg.teacher), ("student", cfg.student)):
        if mc.num_classes != train_set.num_classes:
            raise ConfigMismatchError(
                f"{role}.num_classes={mc.num_classes} but the dataset has {train_set.num_classes} classes")
        if tuple(mc.input_size) != tuple(train_set.image_size):
            raise ConfigMismatchError(
                f"{role}.input_size={mc.input_size} but images are {tuple(train_set.image_size)}")
    return train_set, test_set


def teacher_path(cfg: RunConfig):
    return cfg.run.teacher_ckpt or os.path.join(cfg.run.out, "teacher.ckpt")


def student_path(cfg: RunConfig):
    return cfg.run.student_ckpt or os.path.join(cfg.run.out, "student.ckpt")


def load_model(path, model_cfg, role) -> Model:
    if not os.path.exists(path):
        if role == "teacher":
            raise MissingTeacherError(f"teacher checkpoint {path} not found; run `crld pretrain` first")
        raise HarnessError(f"{role} checkpoint {path} not found")
    try:
        return load_checkpoint(path, model_cfg)
    except checkpoint.CheckpointShapeError as exc:
        raise ConfigMismatchError(f"{role} checkpoint {path} does not match the {role} config: {exc}") from exc


def view_descriptions(dc: DistillConfig, policy: StrongPolicy):
    weak = "weak(pad4_crop+hflip)"
    strong = f"strong(weak+randaugment(n={policy.n},p_s={policy.p_s!r})+cutout)"
    ka, kb = dc.view_kinds()
    names = {"weak": weak, "strong": strong, None: "none"}
    return names[ka], names[kb]


def write_manifest(path, cfg: RunConfig, command, mode, extra=None):
    dc = cfg.distill_config()
    view_a, view_b = view_descriptions(dc, cfg.augment.policy())
    entries = {
        "manifest.command": command,
        "manifest.config_hash": cfgmod.config_hash(cfg),
        "manifest.seed": cfg.run.seed,
        "manifest.code_version": crld.__version__,
        "manifest.checkpoint_format": checkpoint.FORMAT_VERSION,
        "manifest.kernel_backend": kernels.BACKEND,
        "manifest.numpy_version": np.__version__,
        "manifest.mode": mode,
        "manifest.view_a": view_a,
        "manifest.view_b": view_b,
    }
    entries.update(extra or {})
    text = cfgmod.dumps(cfg) + "".join(f"{k}={v}\n" for k, v in entries.items())
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_manifest(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, sep, value = line.rstrip("\n").partition("=")
            if sep:
                out[key] = value
    return out


class MetricsLog:
    """Append-only JSON-lines writer, flushed after every record."""

    def __init__(self, path):
        self.path = path

    def append(self, records):
        with open(self.path, "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def truncate_from(self, epoch):
        """Keep the complete records of epochs before ``epoch``; drops any torn last line."""
        if not os.path.exists(self.path):
            return
        kept = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    break
                if rec["epoch"] < epoch:
                    kept.append(line if line.endswith("\n") else line + "\n")
        tmp = f"{self.path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.writelines(kept)
        os.replace(tmp, self.path)


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _prepare_dir(cfg, command, resume):
    os.makedirs(cfg.run.out, exist_ok=True)
    manifest = os.path.join(cfg.run.out, f"{command}.manifest.txt")
    metrics = MetricsLog(os.path.join(cfg.run.out, f"{command}.metrics.jsonl"))
    if resume and os.path.exists(manifest):
        old = read_manifest(manifest).get("manifest.config_hash")
        if old != cfgmod.config_hash(cfg):
            raise ConfigMismatchError(f"{manifest} was written for a different config; refusing to resume")
    return manifest, metrics


def _opt_extra(opt: OptimizerState, epoch):
    extra = {f"opt.{k}": v for k, v in opt.buffers.items()}
    extra["meta.epoch"] = np.array([epoch], dtype=np.float32)
    return extra


def _load_resume(path, model_cfg, opt: OptimizerState, regressors=None):
    model, extra = load_checkpoint(path, model_cfg, with_extra=True)
    opt.buffers = {k[4:]: v for k, v in extra.items() if k.startswith("opt.")}
    for name, t in (regressors or {}).items():
        t.data = np.array(extra[f"reg.{name}"], dtype=np.float32)
    return model, int(extra["meta.epoch"][0])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig, resume=False, stop_after=None) -> dict:
    """Train the teacher with cross-entropy on weak views."""
    manifest, metrics = _prepare_dir(cfg, "pretrain", resume)
    train_set, test_set = load_data(cfg)
    model = build_model(cfg.teacher, cfg.run.seed)
    opt = OptimizerState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, model.no_decay_names())
    last = os.path.join(cfg.run.out, "pretrain.last.ckpt")
    start = 0
    if resume and os.path.exists(last):
        model, start = _load_resume(last, cfg.teacher, opt)
    metrics.truncate_from(start)
    write_manifest(manifest, cfg, "pretrain", "supervised")
    schedule = cfg.schedule.build(cfg.optim.lr, cfg.pretrain.epochs)

    def on_epoch_end(epoch, records):
        save_checkpoint(model, last, _opt_extra(opt, epoch + 1))
        metrics.append(records)
        log.info("pretrain epoch %d test top1 %.4f", epoch, records[-1].top1)

    train_supervised(model, train_set, test_set, cfg.pretrain.epochs, cfg.pretrain.batch_size, cfg.run.seed,
                     schedule, opt, start, on_epoch_end, stop_after)
    top1, top5 = evaluate(model, test_set)
    if stop_after is None or start + stop_after >= cfg.pretrain.epochs:
        save_checkpoint(model, teacher_path(cfg))
    return {"top1": top1, "top5": top5, "checkpoint": teacher_path(cfg)}


def _mean_rates(path):
    train_recs = [r for r in read_metrics(path) if r["split"] == "train"] if os.path.exists(path) else []
    if not train_recs:
        return float("nan"), float("nan")
    return (float(np.mean([r["mask_rate_w"] for r in train_recs])),
            float(np.mean([r["mask_rate_s"] for r in train_recs])))


def cmd_distill(cfg: RunConfig, resume=False, stop_after=None, teacher: Model | None = None,
                data=None) -> dict:
    """Distil the pretrained teacher into a fresh student."""
    manifest, metrics = _prepare_dir(cfg, "distill", resume)
    if teacher is None:
        teacher = load_model(teacher_path(cfg), cfg.teacher, "teacher")
    teacher.set_trainable(False)
    train_set, test_set = data if data is not None else load_data(cfg)
    dc = cfg.distill_config()
    student = build_model(cfg.student, cfg.run.seed)
    untrained_top1, _ = evaluate(student, test_set)
    opt = OptimizerState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, student.no_decay_names())
    regressors = None
    if dc.feature_tap == "pool_feat":
        regressors = build_regressors(student.feature_dim, teacher.feature_dim, cfg.run.seed)

    last = os.path.join(cfg.run.out, "distill.last.ckpt")
    start = 0
    if resume and os.path.exists(last):
        student, start = _load_resume(last, cfg.student, opt, regressors)
    metrics.truncate_from(start)
    write_manifest(manifest, cfg, "distill", dc.mode, {"manifest.untrained_top1": repr(untrained_top1)})

    ctx = StepContext(teacher, student, dc, opt, cfg.augment.policy(), regressors=regressors,
                      workers=cfg.run.workers)
    schedule = cfg.schedule.build(cfg.optim.lr, dc.epochs)

    def on_epoch_end(epoch, recs):
        extra = _opt_extra(opt, epoch + 1)
        for name, t in (regressors or {}).items():
            extra[f"reg.{name}"] = t.data
        save_checkpoint(ctx.student, last, extra)
        metrics.append(recs)
        log.info("distill %s epoch %d test top1 %.4f", dc.mode, epoch, recs[-1].top1)

    train(ctx, train_set, test_set, schedule, start, on_epoch_end, stop_after)
    top1, top5 = evaluate(ctx.student, test_set)
    if stop_after is None or start + stop_after >= dc.epochs:
        save_checkpoint(ctx.student, student_path(cfg))
    rate_w, rate_s = _mean_rates(metrics.path)
    return {"mode": dc.mode, "top1": top1, "top5": top5, "untrained_top1": untrained_top1,
            "mean_mask_rate_w": rate_w, "mean_mask_rate_s": rate_s, "checkpoint": student_path(cfg)}


def cmd_eval(cfg: RunConfig) -> dict:
    _, test_set = load_data(cfg)
    os.makedirs(cfg.run.out, exist_ok=True)
    rows = []
    for role, path, mc in (("teacher", teacher_path(cfg), cfg.teacher), ("student", student_path(cfg), cfg.student)):
        if os.path.exists(path):
            top1, top5 = evaluate(load_model(path, mc, role), test_set)
            rows.append({"model": role, "checkpoint": path, "top1": top1, "top5": top5})
    if not rows:
        raise HarnessError(f"no checkpoints found for {cfg.run.out}")
    write_csv(os.path.join(cfg.run.out, "eval.csv"), ["model", "checkpoint", "top1", "top5"], rows)
    write_manifest(os.path.join(cfg.run.out, "eval.manifest.txt"), cfg, "eval", "eval")
    return {"rows": rows}


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass
class GridPoint:
    label: dict
    cfg: RunConfig
    result: dict = field(default_factory=dict)


def _point_cfg(cfg: RunConfig, subdir, distill=None, augment=None):
    out = os.path.join(cfg.run.out, subdir)
    run = replace(cfg.run, out=out, teacher_ckpt=os.path.abspath(teacher_path(cfg)), student_ckpt="")
    return replace(cfg, run=run, distill=distill or cfg.distill, augment=augment or cfg.augment)


def _run_point(point_cfg: RunConfig):
    return cmd_distill(point_cfg)


def run_points(cfg: RunConfig, points, parallel=False):
    """Run grid points in order, or in separate processes with ``parallel``."""
    load_model(teacher_path(cfg), cfg.teacher, "teacher")
    if parallel and len(points) > 1:
        with ProcessPoolExecutor(max_workers=min(len(points), os.cpu_count() or 1)) as pool:
            results = list(pool.map(_run_point, [p.cfg for p in points]))
    else:
        teacher = load_model(teacher_path(cfg), cfg.teacher, "teacher")
        data = load_data(cfg)
        results = [cmd_distill(p.cfg, teacher=teacher, data=data) for p in points]
    for p, r in zip(points, results):
        p.result = r
    return points


def write_csv(path, header, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _flags(pairings):
    return "".join("1" if p else "0" for p in pairings)


def cmd_ablate(cfg: RunConfig, parallel=False) -> list:
    """One distill run per ablation row with shared seeds; writes ablate.csv."""
    os.makedirs(cfg.run.out, exist_ok=True)
    points = [GridPoint({"row": row}, _point_cfg(cfg, f"ablate/{row}",
                                                 replace(cfg.distill, pairings=ABLATION_GRID[row])))
              for row in cfg.sweep.rows]
    run_points(cfg, points, parallel)
    rows = [{"row": p.label["row"], "mode": p.result["mode"], "pairings": _flags(p.cfg.distill.pairings),
             "top1": p.result["top1"], "top5": p.result["top5"], "untrained_top1": p.result["untrained_top1"]}
            for p in points]
    write_csv(os.path.join(cfg.run.out, "ablate.csv"),
              ["row", "mode", "pairings", "top1", "top5", "untrained_top1"], rows)
    write_manifest(os.path.join(cfg.run.out, "ablate.manifest.txt"), cfg, "ablate", "grid")
    return rows


def cmd_sweep_tau(cfg: RunConfig, parallel=False) -> list:
    """Distill at every (tau_w, tau_s) grid point; writes the matrix and a long table."""
    os.makedirs(cfg.run.out, exist_ok=True)
    points = []
    for tw in cfg.sweep.tau_w_grid:
        for ts in cfg.sweep.tau_s_grid:
            dc = replace(cfg.distill, tau_w=float(tw), tau_s=float(ts))
            points.append(GridPoint({"tau_w": tw, "tau_s": ts}, _point_cfg(cfg, f"sweep_tau/tw{tw!r}_ts{ts!r}", dc)))
    run_points(cfg, points, parallel)
    rows = [dict(p.label, top1=p.result["top1"], top5=p.result["top5"],
                 mean_mask_rate_w=p.result["mean_mask_rate_w"], mean_mask_rate_s=p.result["mean_mask_rate_s"])
            for p in points]
    write_csv(os.path.join(cfg.run.out, "sweep_tau_runs.csv"),
              ["tau_w", "tau_s", "top1", "top5", "mean_mask_rate_w", "mean_mask_rate_s"], rows)
    header = ["tau_w"] + [f"tau_s={ts!r}" for ts in cfg.sweep.tau_s_grid]
    matrix = []
    for tw in cfg.sweep.tau_w_grid:
        line = {"tau_w": tw}
        for r in rows:
            if r["tau_w"] == tw:
                line[f"tau_s={r['tau_s']!r}"] = r["top1"]
        matrix.append(line)
    write_csv(os.path.join(cfg.run.out, "sweep_tau.csv"), header, matrix)
    write_manifest(os.path.join(cfg.run.out, "sweep_tau.manifest.txt"), cfg, "sweep-tau", "grid")
    return rows


def cmd_sweep_strength(cfg: RunConfig, parallel=False) -> list:
    os.makedirs(cfg.run.out, exist_ok=True)
    points = []
    for n in cfg.sweep.n_grid:
        for ps in cfg.sweep.ps_grid:
            aug = replace(cfg.augment, n=int(n), p_s=float(ps))
            aug.policy()
            points.append(GridPoint({"n": n, "p_s": ps}, _point_cfg(cfg, f"sweep_strength/n{n}_ps{ps!r}", augment=aug)))
    run_points(cfg, points, parallel)
    rows = [dict(p.label, top1=p.result["top1"], top5=p.result["top5"],
                 mean_mask_rate_w=p.result["mean_mask_rate_w"], mean_mask_rate_s=p.result["mean_mask_rate_s"])
            for p in points]
    write_csv(os.path.join(cfg.run.out, "sweep_strength.csv"),
              ["n", "p_s", "top1", "top5", "mean_mask_rate_w", "mean_mask_rate_s"], rows)
    write_manifest(os.path.join(cfg.run.out, "sweep_strength.manifest.txt"), cfg, "sweep-strength", "grid")
    return rows


def cmd_view_mode(cfg: RunConfig, parallel=False) -> list:
    os.makedirs(cfg.run.out, exist_ok=True)
    points = [GridPoint({"row": name}, _point_cfg(cfg, f"view_mode/{name}",
                                                  replace(cfg.distill, view_mode=mode, pairings=pairings)))
              for name, mode, pairings in VIEW_MODE_ROWS]
    run_points(cfg, points, parallel)
    rows = [{"row": p.label["row"], "view_mode": p.cfg.distill.view_mode,
             "pairings": _flags(p.cfg.distill.pairings), "mode": p.result["mode"],
             "top1": p.result["top1"], "top5": p.result["top5"]} for p in points]
    write_csv(os.path.join(cfg.run.out, "view_mode.csv"),
              ["row", "view_mode", "pairings", "mode", "top1", "top5"], rows)
    write_manifest(os.path.join(cfg.run.out, "view_mode.manifest.txt"), cfg, "view-mode", "grid")
    return rows


def cmd_augment_preview(cfg: RunConfig) -> dict:
    """Write weak/strong view pairs of the first ``run.preview_count`` training images."""
    train_set, _ = load_data(cfg)
    outdir = os.path.join(cfg.run.out, "preview")
    os.makedirs(outdir, exist_ok=True)
    policy = cfg.augment.policy()
    count = min(cfg.run.preview_count, len(train_set))
    entries, files = {}, []
    for i in range(count):
        img = train_set.images[i]
        weak = weak_view(img, RngStream(cfg.run.seed, 0, i, WEAK_TAG))
        trace = []
        strong = strong_view(img, policy, RngStream(cfg.run.seed, 0, i, STRONG_TAG), trace)
        for kind, out in (("weak", weak), ("strong", strong)):
            path = os.path.join(outdir, f"{i}_{kind}.ppm")
            write_ppm(path, out)
            files.append(path)
        entries[f"image.{i}.label"] = int(train_set.labels[i])
        entries[f"image.{i}.strong_ops"] = ";".join(f"{k}:{v!r}" for k, v in trace)
    write_manifest(os.path.join(outdir, "manifest.txt"), cfg, "augment-preview", "preview", entries)
    return {"files": files, "ops": entries}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-tau": cmd_sweep_tau,
    "sweep-strength": cmd_sweep_strength,
    "view-mode": cmd_view_mode,
    "augment-preview": cmd_augment_preview,
}
