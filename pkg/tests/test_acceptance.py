"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints a ``criterion N PASS|FAIL`` line, collected again in the
pytest terminal summary. Criterion 7 runs the full desk-scale study (about
20 minutes on one CPU core).
"""

import os
import shutil
import struct
import time
from dataclasses import replace

import numpy as np
import pytest

from crld import checkpoint, harness
from crld import tensor as tn
from crld.augment import (DEFAULT_OPS, RngStream, apply_op, batch_view, sample_cutout_strength, sample_strength,
                          STRONG_TAG, WEAK_TAG, StrongPolicy)
from crld.config import load
from crld.data import (BatchPlan, DatasetFormatError, batches, load_cifar_binary, normalize_batch,
                       synthetic_dataset, write_cifar_binary)
from crld.distill import ABLATION_GRID, BatchStreams, StepContext, crld_step, sls_mask
from crld.gradcheck import check_gradients
from crld.models import OptimizerState, build_model, load_checkpoint, save_checkpoint, sgd_step, student_config

from conftest import tiny_config
from gradcases import _network, cases
from oracles import hinton_kd_loss, np_kld

REFERENCE_CFG = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "desk_reference.cfg")
SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = load(REFERENCE_CFG).with_out(str(tmp_path_factory.mktemp("desk")))
    start = time.perf_counter()
    pretrain = harness.cmd_pretrain(cfg)
    return {"cfg": cfg, "pretrain": pretrain, "pretrain_seconds": time.perf_counter() - start,
            "teacher": harness.load_model(pretrain["checkpoint"], cfg.teacher, "teacher"),
            "data": harness.load_data(cfg)}


# -- 1 ------------------------------------------------------------------------------------


def test_criterion_1_gradient_suite(acceptance_report):
    start = time.perf_counter()
    worst, failures, n_checks = 0.0, [], 0
    for name, (fn, arrays, wrt) in sorted(cases().items()):
        res = check_gradients(fn, arrays, n_coords=24, h=1e-3, seed=0, wrt=wrt)
        n_checks += 1
        worst = max(worst, res.max_rel_error)
        if len(res.coords) < 20 or not res.passed(1e-3):
            failures.append(name)
    # the desk student itself: 20 coordinates (or all of them) in every parameter tensor
    fn, arrays = _network(student_config(8), 5)
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32))
    for i in range(1, len(arrays) + 1):
        res = check_gradients(fn, [x] + arrays, n_coords=20, h=1e-3, seed=i, wrt=[i])
        n_checks += 1
        worst = max(worst, res.max_rel_error)
        if len(res.coords) < min(20, arrays[i - 1].size) or not res.passed(1e-3):
            failures.append(f"student param {i}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    acceptance_report(1, "gradient suite", ok,
                      f"{n_checks} checks, max rel err {worst:.2e}, {elapsed:.1f}s, failures {failures}")
    assert ok


# -- 2 ------------------------------------------------------------------------------------


def test_criterion_2_loss_identities(acceptance_report):
    rng = np.random.default_rng(2)
    z = (rng.standard_normal((16, 10)) * 3).astype(np.float32)
    self_zero = max(abs(tn.kld(tn.Tensor(z), z, T).item()) for T in (1.0, 4.0))
    pairs = [tn.kld(tn.Tensor(rng.standard_normal((1, 10)) * 4), rng.standard_normal((1, 10)) * 4,
                    float(rng.uniform(0.5, 8))).item() for _ in range(1000)]
    s, t = rng.standard_normal((12, 7)), rng.standard_normal((12, 7)) * 2
    m = rng.random(12) < 0.5
    masked = tn.kld(tn.Tensor(s), t, 4.0, m).item()
    per = sum(tn.kld(tn.Tensor(s[i:i + 1]), t[i:i + 1], 4.0).item() for i in range(12) if m[i]) / 12
    hand = tn.kld(tn.Tensor([[0.0, 0.0]]), np.array([[np.log(9.0), 0.0]]), 1.0).item()
    ok = (self_zero == 0.0 and min(pairs) >= 0.0 and abs(masked - per) <= 1e-6
          and abs(masked - np_kld(s, t, 4.0, m)) <= 1e-6 and abs(hand - 0.3681) <= 1e-4)
    acceptance_report(2, "loss identities", ok,
                      f"kld(s,s)={self_zero}, min over 1000 pairs {min(pairs):.3g}, masked diff "
                      f"{abs(masked - per):.1e}, hand value {hand:.5f}")
    assert ok


# -- 3 ------------------------------------------------------------------------------------


def test_criterion_3_plain_kd_oracle(acceptance_report, desk):
    """Expt-A, tau_w=0, one view: each batch must match an independent classic KD step."""
    cfg = desk["cfg"]
    train_set, _ = desk["data"]
    lam, T = 1.0, cfg.distill.temperature
    dc = replace(cfg.distill_config(), pairings=ABLATION_GRID["A"], tau_w=0.0, single_view=True, lambda_wv=lam)
    student = build_model(cfg.student, 0)
    ref = student.clone()
    opt = OptimizerState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, student.no_decay_names())
    ref_opt = OptimizerState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, ref.no_decay_names())
    norm = (train_set.channel_mean, train_set.channel_std)
    ctx = StepContext(desk["teacher"], student, dc, opt, cfg.augment.policy(), norm)
    worst_loss = worst_param = 0.0
    n_batches = 0
    for idx, images, labels in batches(train_set, BatchPlan(0, 0, dc.batch_size, len(train_set))):
        streams = BatchStreams(0, 0, tuple(int(i) for i in idx))
        out = crld_step(images, labels, ctx, streams)
        # reference: weak view, plain softmax KD written separately
        x = normalize_batch(batch_view(images, streams.indices, 0, 0, "weak", WEAK_TAG), *norm)
        with tn.no_grad():
            t_logits = desk["teacher"].forward(x).logits
        loss = hinton_kd_loss(ref.forward(x, train=True).logits, t_logits, labels, T, lam)
        worst_loss = max(worst_loss, abs(loss.item() - out.loss_total))
        tn.backward(loss)
        sgd_step(ref.params, ref_opt)
        for name, p in student.params.items():
            worst_param = max(worst_param, float(np.abs(p.data - ref.params[name].data).max()))
            ref.params[name].data = p.data.copy()
        n_batches += 1
    ok = worst_loss <= 1e-6 and worst_param <= 1e-6
    acceptance_report(3, "plain-KD oracle equivalence", ok,
                      f"{n_batches} batches, max |loss diff| {worst_loss:.1e}, max |param diff| {worst_param:.1e}")
    assert ok


# -- 4 ------------------------------------------------------------------------------------


def test_criterion_4_augmentation_exactness(acceptance_report):
    errs = []
    for spec in DEFAULT_OPS[:-1]:
        lo, hi = spec.v_min, spec.v_max
        for p_s in (1.0, 0.5, 0.1):
            errs += [abs(sample_strength(spec, 0.0, p_s) - lo),
                     abs(sample_strength(spec, 1.0, p_s) - (lo + (hi - lo) * p_s)),
                     abs(sample_strength(spec, 0.5, p_s) - (lo + 0.5 * (hi - lo) * p_s))]
        errs.append(abs(sample_strength(spec, 0.5) - (lo + hi) / 2))
    for p_s in (1.0, 0.5, 0.1):
        errs += [abs(sample_cutout_strength(0.0, p_s)), abs(sample_cutout_strength(1.0, p_s) - 0.5 * p_s),
                 abs(sample_cutout_strength(0.5, p_s) - 0.25 * p_s)]
    strength_ok = max(errs) <= 1e-9

    rng = np.random.default_rng(4)
    ops_ok, kinds = True, [s.kind for s in DEFAULT_OPS]
    for spec in DEFAULT_OPS:
        for trial in range(10):
            img = rng.integers(0, 256, (12, 10, 3), dtype=np.uint8)
            v = sample_strength(spec, rng.random()) if spec.kind != "cutout" else sample_cutout_strength(rng.random())
            outs = [apply_op(img.copy(), spec.kind, v, RngStream(trial, 0, 0, STRONG_TAG)) for _ in range(2)]
            ops_ok &= outs[0].shape == img.shape and outs[0].dtype == np.uint8
            ops_ok &= np.array_equal(outs[0], outs[1])

    img = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    post_ok = True
    for bits in range(4, 9):
        keep = (0xFF << (8 - bits)) & 0xFF
        post_ok &= np.array_equal(apply_op(img, "posterize", float(bits)), img & keep)
    ok = strength_ok and ops_ok and post_ok and len(set(kinds)) == 15
    acceptance_report(4, "augmentation exactness", ok,
                      f"max strength err {max(errs):.1e}, {len(set(kinds))} ops checked, posterize oracle {post_ok}")
    assert ok


# -- 5 ------------------------------------------------------------------------------------


def test_criterion_5_sls_properties(acceptance_report):
    rng = np.random.default_rng(5)
    monotone = True
    for _ in range(200):
        e = np.exp(rng.standard_normal((32, 8)) * 2)
        p = e / e.sum(axis=1, keepdims=True)
        taus = np.sort(rng.random(6))
        masks = [sls_mask(p, t).mask for t in taus]
        monotone &= all(not (b & ~a).any() for a, b in zip(masks, masks[1:]))
        monotone &= sls_mask(p, 0.0).mask.all() and not sls_mask(p, 1.0).mask.any()
    s = tn.Tensor(rng.standard_normal((10, 6)), requires_grad=True)
    t = rng.standard_normal((10, 6)) * 3
    m = sls_mask(tn.softmax_t(tn.Tensor(t), 1.0), 0.6).mask
    tn.backward(tn.kld(s, t, 4.0, m))
    zero_probe = bool((s.grad[~m] == 0).all() and (np.abs(s.grad[m]).sum(axis=1) > 0).all())
    ok = monotone and zero_probe and 0 < m.sum() < len(m)
    acceptance_report(5, "SLS properties", ok, f"monotone/limits {monotone}, zero-gradient probe {zero_probe} "
                                               f"({int((~m).sum())} of {len(m)} masked)")
    assert ok


# -- 6 ------------------------------------------------------------------------------------


def test_criterion_6_lfkd_contract(acceptance_report, monkeypatch):
    import crld.distill as distill_mod
    cfg = tiny_config("unused", "distill.lfkd=true\ndistill.tau_w=0.2\ndistill.tau_s=0.2\n")
    train_set, _ = harness.load_data(cfg)
    grads = []
    real_step = distill_mod.sgd_step

    def capture(params, state):
        grads.append({n: p.grad.copy() for n, p in params.items()})
        real_step(params, state)

    monkeypatch.setattr(distill_mod, "sgd_step", capture)
    idx = np.arange(16)
    labels = train_set.labels[idx]
    perms = [labels, labels[::-1], np.roll(labels, 5), (labels + 1) % 4]
    for lab in perms:
        teacher = build_model(cfg.teacher, 1)
        student = build_model(cfg.student, 2)
        ctx = StepContext(teacher, student, cfg.distill_config(), OptimizerState(),
                          norm=(train_set.channel_mean, train_set.channel_std))
        crld_step(train_set.images[idx], lab, ctx, BatchStreams(0, 0, tuple(int(i) for i in idx)))
    identical = all(np.array_equal(g[n], grads[0][n]) for g in grads[1:] for n in grads[0])
    nonzero = any(np.abs(v).sum() > 0 for v in grads[0].values())
    ok = identical and nonzero
    acceptance_report(6, "LFKD label independence", ok,
                      f"{len(perms)} labelings, {len(grads[0])} gradient tensors bit-identical: {identical}")
    assert ok


# -- 7 ------------------------------------------------------------------------------------


def _smoothed_total_loss(path, window=5):
    recs = [r for r in harness.read_metrics(path) if r["split"] == "train"]
    total = np.array([r["loss_ce"] + r["loss_wv"] + r["loss_cv"] for r in recs])
    return np.convolve(total, np.ones(window) / window, mode="valid")


@pytest.fixture(scope="module")
def study(desk):
    """Rows J and A for every seed against the shared teacher."""
    cfg, teacher, data = desk["cfg"], desk["teacher"], desk["data"]
    start = time.perf_counter()
    results = {}
    for seed in SEEDS:
        for row in ("J", "A"):
            point = replace(cfg.with_seed(seed).with_out(os.path.join(cfg.run.out, f"{row}_seed{seed}")),
                            distill=replace(cfg.distill, pairings=ABLATION_GRID[row]))
            results[row, seed] = harness.cmd_distill(point, teacher=teacher, data=data)
    return {"results": results, "runtime": desk["pretrain_seconds"] + time.perf_counter() - start}


def test_criterion_7_desk_study(acceptance_report, desk, study):
    results = study["results"]
    j = np.array([results["J", s]["top1"] for s in SEEDS])
    a = np.array([results["A", s]["top1"] for s in SEEDS])
    u = np.array([results["J", s]["untrained_top1"] for s in SEEDS])
    teacher_top1 = desk["pretrain"]["top1"]
    for s in SEEDS:
        print(f"  seed {s}: J {j[s]:.4f}  A {a[s]:.4f}  untrained {u[s]:.4f}")
    checks = {"teacher >= 0.90": teacher_top1 >= 0.90, "mean J - mean A >= 0": j.mean() - a.mean() >= 0,
              "mean A >= mean untrained": a.mean() >= u.mean(), "runtime <= 30 min": study["runtime"] <= 1800}
    failed = [k for k, v in checks.items() if not v]
    per_seed = ", ".join(f"s{s} J={j[s]:.3f} A={a[s]:.3f} U={u[s]:.3f}" for s in SEEDS)
    acceptance_report(7, "desk-scale directional study", not failed,
                      f"teacher {teacher_top1:.3f}; mean J {j.mean():.4f} A {a.mean():.4f} untrained {u.mean():.4f}; "
                      f"J-A {j.mean() - a.mean():+.4f}; {study['runtime'] / 60:.1f} min; {per_seed}; "
                      f"failed: {failed or 'none'}")
    assert not failed, failed


def test_desk_smoothed_training_loss_is_non_increasing(desk, study):
    cfg = desk["cfg"]
    rises = {}
    for row in ("J", "A"):
        for s in SEEDS:
            smoothed = _smoothed_total_loss(os.path.join(cfg.run.out, f"{row}_seed{s}", "distill.metrics.jsonl"))
            rises[row, s] = float(np.max(np.diff(smoothed)))
    print("  largest rise of the 5-epoch moving average per run:",
          ", ".join(f"{r}{s} {v:+.3f}" for (r, s), v in rises.items()))
    assert max(rises.values()) <= 0.0, rises


# -- 8 ------------------------------------------------------------------------------------


def test_criterion_8_view_mode_study(acceptance_report, tmp_path):
    base = tiny_config(str(tmp_path / "t"))
    harness.cmd_pretrain(base)
    extra = f"run.teacher_ckpt={harness.teacher_path(base)}\n"
    vm_cfg = tiny_config(str(tmp_path / "vm"), extra)
    rows = harness.cmd_view_mode(vm_cfg)
    ab_cfg = tiny_config(str(tmp_path / "ab"), extra + "sweep.rows=G\n")
    harness.cmd_ablate(ab_cfg)
    same = all(_read(os.path.join(vm_cfg.run.out, "view_mode", "no_cvl", f)) ==
               _read(os.path.join(ab_cfg.run.out, "ablate", "G", f))
               for f in ("student.ckpt", "distill.metrics.jsonl"))
    names = [r["row"] for r in rows]
    ok = names == ["weak_weak", "strong_strong", "strong_weak", "no_cvl"] and same
    acceptance_report(8, "view-mode study", ok, f"rows {names}; no_cvl == Expt G bit-identical: {same}")
    assert ok


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- 9 ------------------------------------------------------------------------------------


def _snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            out[os.path.relpath(path, root)] = _read(path)
    return out


def _all_commands(cfg):
    harness.cmd_pretrain(cfg)
    harness.cmd_distill(cfg)
    harness.cmd_eval(cfg)
    harness.cmd_ablate(cfg)
    harness.cmd_sweep_tau(cfg)
    harness.cmd_sweep_strength(cfg)
    harness.cmd_view_mode(cfg)
    harness.cmd_augment_preview(cfg)


def test_criterion_9_determinism(acceptance_report, tmp_path):
    extra = ("distill.epochs=1\nsweep.rows=A,J\nsweep.tau_w_grid=0.5\nsweep.tau_s_grid=0.2,0.6\n"
             "sweep.n_grid=1\nsweep.ps_grid=0.5\n")
    cfg = tiny_config(str(tmp_path / "run"), extra)
    _all_commands(cfg)
    first = _snapshot(cfg.run.out)
    shutil.rmtree(cfg.run.out)
    _all_commands(cfg)
    second = _snapshot(cfg.run.out)
    differing = sorted(k for k in first if first[k] != second.get(k)) + sorted(set(second) - set(first))

    images, _ = harness.load_data(cfg)
    idx = tuple(range(len(images)))
    invariant = all(np.array_equal(batch_view(images.images, idx, 3, 1, kind, tag, StrongPolicy(), 1),
                                   batch_view(images.images, idx, 3, 1, kind, tag, StrongPolicy(), w))
                    for kind, tag in (("weak", WEAK_TAG), ("strong", STRONG_TAG)) for w in (2, 4))
    ok = not differing and invariant
    acceptance_report(9, "determinism", ok, f"{len(first)} files byte-identical on rerun "
                                            f"(differing: {differing}); views invariant to workers: {invariant}")
    assert ok


# -- 10 -----------------------------------------------------------------------------------


def test_criterion_10_format_round_trips(acceptance_report, tmp_path):
    model = build_model(student_config(8), 3)
    for st in model.bn.values():
        st.running_mean[...] = np.random.default_rng(1).standard_normal(st.running_mean.shape)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path, student_config(8))
    ckpt_exact = all(np.array_equal(a, back.state_arrays()[n]) for n, a in model.state_arrays().items())
    save_checkpoint(back, tmp_path / "m2.ckpt")
    ckpt_exact &= _read(path) == _read(tmp_path / "m2.ckpt")

    ds = synthetic_dataset(1, 10, 3)
    write_cifar_binary(tmp_path / "d.bin", ds)
    ds_back = load_cifar_binary(tmp_path / "d.bin")
    cifar_exact = ds_back.images.tobytes() == ds.images.tobytes() and np.array_equal(ds_back.labels, ds.labels)

    raw = _read(path)
    typed = 0
    corruptions = [raw[:n] for n in range(0, len(raw), 97)] + [raw + b"\0", b"XXXX" + raw[4:],
                                                              raw[:4] + struct.pack("<I", 2) + raw[8:]]
    for bad in corruptions:
        (tmp_path / "bad.ckpt").write_bytes(bad)
        try:
            load_checkpoint(tmp_path / "bad.ckpt", student_config(8))
        except checkpoint.CheckpointError:
            typed += 1
    raw_d = _read(tmp_path / "d.bin")
    bad_d = [raw_d[:n] for n in (1, 3072, 3073 * 5 - 1)] + [raw_d[:3073 * 2] + b"\x01"]
    for bad in bad_d:
        (tmp_path / "bad.bin").write_bytes(bad)
        try:
            load_cifar_binary(tmp_path / "bad.bin")
        except DatasetFormatError:
            typed += 1
    total = len(corruptions) + len(bad_d)
    ok = ckpt_exact and cifar_exact and typed == total
    acceptance_report(10, "format round-trips", ok, f"checkpoint bit-exact {ckpt_exact}, cifar bit-exact "
                                                    f"{cifar_exact}, typed errors {typed}/{total}")
    assert ok
