"""Consistency-regularised logit distillation: masks, losses, the training step and loop.

Four predictions are formed per batch: teacher and student on view ``a``
(weak by default) and on view ``b`` (strong by default). Each of the four
teacher-student pairings can be switched on independently:

====  =================  ==============
idx   pairing            mask
====  =================  ==============
0     S_a vs T_a         M_a  (within)
1     S_b vs T_b         M_b  (within)
2     S_a vs T_b         M_b  (cross)
3     S_b vs T_a         M_a  (cross)
====  =================  ==============

The mask always follows the teacher's view.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from crld.augment import VIEW_MODES, StrongPolicy, make_views
from crld.data import BatchPlan, Dataset, batches, normalize_batch
from crld.models import Model, OptimizerState, Schedule, lr_at, sgd_step
from crld.tensor import (Tensor, add, backward, cross_entropy, kld, linear, masked_mse, mul,
                         no_grad, softmax_t)

PAIRING_NAMES = ("Sw-Tw", "Ss-Ts", "Sw-Ts", "Ss-Tw")

# Table of ablation rows: which of the four pairings each experiment enables.
ABLATION_GRID = {
    "A": (True, False, False, False),
    "B": (False, True, False, False),
    "C": (False, False, True, False),
    "D": (False, False, False, True),
    "E": (True, False, True, False),
    "F": (True, False, False, True),
    "G": (True, True, False, False),
    "H": (True, True, True, False),
    "I": (True, True, False, True),
    "J": (True, True, True, True),
}

FEATURE_TAPS = ("none", "pool_feat")


class DivergenceError(FloatingPointError):
    """A training loss became NaN or infinite."""


@dataclass
class DistillConfig:
    tau_w: float = 0.75
    tau_s: float = 0.35
    temperature: float = 4.0
    lambda_wv: float = 1.0
    lambda_cv: float = 1.0
    lambda_kd: float = 1.0
    pairings: tuple = (True, True, True, True)
    view_mode: str = "strong_weak"
    lfkd: bool = False
    feature_tap: str = "none"
    # only the first (weak) view is formed; CE and KD use it alone
    single_view: bool = False
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.pairings = tuple(bool(p) for p in self.pairings)
        if len(self.pairings) != 4:
            raise ValueError("pairings needs four flags")
        for name in ("tau_w", "tau_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda_wv, self.lambda_cv, self.lambda_kd) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.view_mode not in VIEW_MODES:
            raise ValueError(f"unknown view_mode {self.view_mode!r}")
        if self.feature_tap not in FEATURE_TAPS:
            raise ValueError(f"unknown feature_tap {self.feature_tap!r}")
        if self.lfkd and not any(self.pairings):
            raise ValueError("lfkd without any pairing leaves no training signal")
        if self.single_view and any(self.pairings[1:]):
            raise ValueError("single_view supports only the Sw-Tw pairing")

    @property
    def pairing_mode(self):
        for name, flags in ABLATION_GRID.items():
            if flags == self.pairings:
                return f"expt_{name}"
        return "ce_only" if not any(self.pairings) else "custom"

    @property
    def mode(self):
        return "lfkd" if self.lfkd else self.pairing_mode

    def view_kinds(self):
        (ka, _), (kb, _) = VIEW_MODES[self.view_mode]
        return ka, (None if self.single_view else kb)

    def thresholds(self):
        """Confidence threshold per view slot, chosen by the slot's transform strength."""
        ka, kb = self.view_kinds()
        pick = {"weak": self.tau_w, "strong": self.tau_s, None: 1.0}
        return pick[ka], pick[kb]


@dataclass
class MaskVec:
    mask: np.ndarray

    @property
    def selected_count(self):
        return int(self.mask.sum())

    @property
    def rate(self):
        return float(self.mask.mean()) if self.mask.size else 0.0

    def __array__(self, dtype=None, copy=None):
        return self.mask.astype(dtype or np.float64)

    def __len__(self):
        return self.mask.size


def sls_mask(teacher_probs, tau: float) -> MaskVec:
    """Select rows whose highest class probability strictly exceeds ``tau``.

    Selected rows are used as they are; nothing is converted to one-hot.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    if p.size and np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-5:
        raise ValueError("sls_mask expects rows that are probability vectors")
    return MaskVec(p.max(axis=1) > tau)


def within_view_loss(pS_w, pS_s, pT_w, pT_s, M_w, M_s, T):
    return add(kld(pS_w, pT_w, T, M_w), kld(pS_s, pT_s, T, M_s))


def cross_view_loss(pS_w, pS_s, pT_w, pT_s, M_w, M_s, T):
    return add(kld(pS_s, pT_w, T, M_w), kld(pS_w, pT_s, T, M_s))


# ---------------------------------------------------------------------------
# feature-space variant
# ---------------------------------------------------------------------------


def build_regressors(student_dim, teacher_dim, seed=0, identity=False):
    """One linear regressor per student view, mapping student to teacher feature width."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
    regs = {}
    for view in ("w", "s"):
        if identity:
            w = np.eye(student_dim, teacher_dim)
        else:
            w = rng.standard_normal((student_dim, teacher_dim)) * np.sqrt(1.0 / student_dim)
        regs[f"reg_{view}.weight"] = Tensor(w, requires_grad=True)
        regs[f"reg_{view}.bias"] = Tensor(np.zeros(teacher_dim), requires_grad=True)
    return regs


def regress(feat, regressors, view):
    return linear(feat, regressors[f"reg_{view}.weight"], regressors[f"reg_{view}.bias"])


def feature_consistency_loss(fS_w, fS_s, fT_w, fT_s, regressors, M_w, M_s, pairings=(True,) * 4):
    """Masked MSE in place of each KLD pairing term, with the same mask routing."""
    if regressors["reg_w.weight"].shape[1] != fT_w.shape[1]:
        raise ValueError("regressor output width differs from teacher feature width")
    rw = regress(fS_w, regressors, "w")
    rs = regress(fS_s, regressors, "s")
    terms = [(rw, fT_w, M_w), (rs, fT_s, M_s), (rw, fT_s, M_s), (rs, fT_w, M_w)]
    total = None
    for on, (pred, target, m) in zip(pairings, terms):
        if on:
            term = masked_mse(pred, target, m)
            total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


@dataclass
class StepOutput:
    loss_ce: float
    loss_wv: float
    loss_cv: float
    loss_total: float
    mask_rate_w: float
    mask_rate_s: float
    batch_top1: float


@dataclass(frozen=True)
class BatchStreams:
    """Identifies the random streams of one batch: run seed, epoch, sample indices."""
    seed: int
    epoch: int
    indices: tuple


@dataclass
class StepContext:
    """Inputs of a step that stay fixed over a run."""
    teacher: Model
    student: Model
    cfg: DistillConfig
    opt: OptimizerState
    policy: StrongPolicy = field(default_factory=StrongPolicy)
    norm: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    regressors: dict | None = None
    workers: int = 1


def _sum_terms(terms):
    total = None
    for t in terms:
        total = t if total is None else add(total, t)
    return total


def _value(t):
    return 0.0 if t is None else t.item()


def top1_correct(logits, labels):
    return np.argmax(logits, axis=1) == np.asarray(labels)


def crld_step(images, labels, ctx: StepContext, streams: BatchStreams) -> StepOutput:
    """One optimisation step of the distillation objective on a uint8 image batch."""
    cfg = ctx.cfg
    labels = np.asarray(labels)
    va, vb = make_views(images, streams.indices, streams.seed, streams.epoch, cfg.view_mode,
                        ctx.policy, ctx.workers, single=cfg.single_view)
    mean, std = ctx.norm
    xa = normalize_batch(va, mean, std)
    xb = None if vb is None else normalize_batch(vb, mean, std)
    feature = cfg.feature_tap == "pool_feat"

    with no_grad():
        ta = ctx.teacher.forward(xa, train=False)
        tb = ctx.teacher.forward(xb, train=False) if xb is not None else None
    sa = ctx.student.forward(xa, train=True)
    sb = ctx.student.forward(xb, train=True) if xb is not None else None

    tau_a, tau_b = cfg.thresholds()
    m_a = sls_mask(softmax_t(ta.logits, 1.0), tau_a)
    m_b = sls_mask(softmax_t(tb.logits, 1.0), tau_b) if tb is not None else None

    def pair(s_out, s_view, t_out, mask):
        if feature:
            return masked_mse(regress(s_out.pool_feat, ctx.regressors, s_view), t_out.pool_feat, mask)
        return kld(s_out.logits, t_out.logits, cfg.temperature, mask)

    on = cfg.pairings
    wv_terms, cv_terms = [], []
    if on[0]:
        wv_terms.append(pair(sa, "w", ta, m_a))
    if on[1]:
        wv_terms.append(pair(sb, "s", tb, m_b))
    if on[2]:
        cv_terms.append(pair(sa, "w", tb, m_b))
    if on[3]:
        cv_terms.append(pair(sb, "s", ta, m_a))
    wv, cv = _sum_terms(wv_terms), _sum_terms(cv_terms)

    ce = None
    if not cfg.lfkd:
        ce = cross_entropy(sa.logits, labels)
        if sb is not None:
            ce = add(ce, cross_entropy(sb.logits, labels))
    kd = _sum_terms([mul(t, lam) for t, lam in ((wv, cfg.lambda_wv), (cv, cfg.lambda_cv)) if t is not None])
    if kd is not None:
        kd = mul(kd, cfg.lambda_kd)
    total = _sum_terms([t for t in (ce, kd) if t is not None])

    out = StepOutput(
        loss_ce=_value(ce), loss_wv=_value(wv), loss_cv=_value(cv), loss_total=_value(total),
        mask_rate_w=m_a.rate,
        mask_rate_s=m_b.rate if m_b is not None else 0.0,
        batch_top1=float(top1_correct(sa.logits.data, labels).mean()),
    )
    if not np.isfinite(out.loss_total):
        raise DivergenceError(f"non-finite loss at epoch {streams.epoch}: {out}")

    backward(total)
    params = dict(ctx.student.params)
    if feature:
        for view, used in (("w", on[0] or on[2]), ("s", on[1] or on[3])):
            if used:
                params[f"reg_{view}.weight"] = ctx.regressors[f"reg_{view}.weight"]
                params[f"reg_{view}.bias"] = ctx.regressors[f"reg_{view}.bias"]
    sgd_step(params, ctx.opt)
    return out


def supervised_step(images, labels, model: Model, opt: OptimizerState, streams: BatchStreams, norm):
    """Cross-entropy step on weak views; used to pretrain teachers."""
    va, _ = make_views(images, streams.indices, streams.seed, streams.epoch, single=True)
    out = model.forward(normalize_batch(va, *norm), train=True)
    loss = cross_entropy(out.logits, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at epoch {streams.epoch}")
    backward(loss)
    sgd_step(model.params, opt)
    return value, float(top1_correct(out.logits.data, labels).mean())


# ---------------------------------------------------------------------------
# evaluation and training loops
# ---------------------------------------------------------------------------


def topk_hits(logits, labels, k):
    """Label rank < k, ties broken in favour of the lower class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    target = logits[np.arange(len(labels)), labels][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    rank = (logits > target).sum(axis=1) + ((logits == target) & (cols < labels[:, None])).sum(axis=1)
    return rank < k


def predict_logits(model: Model, dataset: Dataset, batch_size=256):
    outs = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = normalize_batch(dataset.images[start:start + batch_size], dataset.channel_mean,
                                dataset.channel_std)
            outs.append(model.forward(x, train=False).logits.data)
    return np.concatenate(outs)


def evaluate(model: Model, dataset: Dataset, batch_size=256):
    """(top-1, top-5) accuracy on plain normalised images in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset, batch_size)
    return float(topk_hits(logits, dataset.labels, 1).mean()), float(topk_hits(logits, dataset.labels, 5).mean())


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    top1: float | None = None
    top5: float | None = None
    loss_ce: float | None = None
    loss_wv: float | None = None
    loss_cv: float | None = None
    mask_rate_w: float | None = None
    mask_rate_s: float | None = None
    lr: float | None = None

    def to_dict(self):
        return asdict(self)


def _weighted_means(outputs, sizes):
    w = np.asarray(sizes, dtype=np.float64)
    w = w / w.sum()
    keys = ("loss_ce", "loss_wv", "loss_cv", "loss_total", "mask_rate_w", "mask_rate_s", "batch_top1")
    return {k: float(np.dot(w, [getattr(o, k) for o in outputs])) for k in keys}


def train(ctx: StepContext, train_set: Dataset, test_set: Dataset, schedule: Schedule, start_epoch=0,
          on_epoch_end=None, stop_after=None):
    """Run epochs ``start_epoch .. cfg.epochs - 1`` of :func:`crld_step`.

    Returns the list of :class:`MetricsRecord` (one train and one test record
    per epoch). ``on_epoch_end(epoch, records)`` runs after each epoch;
    ``stop_after`` ends the run early after that many epochs.
    """
    cfg = ctx.cfg
    ctx.norm = (train_set.channel_mean, train_set.channel_std)
    metrics = []
    for epoch in range(start_epoch, cfg.epochs):
        if stop_after is not None and epoch - start_epoch >= stop_after:
            break
        ctx.opt.lr = lr_at(epoch, schedule)
        plan = BatchPlan(cfg.seed, epoch, min(cfg.batch_size, len(train_set)), len(train_set))
        outputs, sizes = [], []
        for idx, images, labels in batches(train_set, plan):
            outputs.append(crld_step(images, labels, ctx, BatchStreams(cfg.seed, epoch, tuple(int(i) for i in idx))))
            sizes.append(len(idx))
        agg = _weighted_means(outputs, sizes)
        top1, top5 = evaluate(ctx.student, test_set)
        records = [
            MetricsRecord(epoch, "train", agg["batch_top1"], None, agg["loss_ce"], agg["loss_wv"], agg["loss_cv"],
                          agg["mask_rate_w"], agg["mask_rate_s"], ctx.opt.lr),
            MetricsRecord(epoch, "test", top1, top5, lr=ctx.opt.lr),
        ]
        metrics.extend(records)
        if on_epoch_end is not None:
            on_epoch_end(epoch, records)
    return metrics


def train_supervised(model: Model, train_set: Dataset, test_set: Dataset, epochs, batch_size, seed,
                     schedule: Schedule, opt: OptimizerState, start_epoch=0, on_epoch_end=None, stop_after=None):
    """Cross-entropy training with weak augmentation (teacher pretraining)."""
    norm = (train_set.channel_mean, train_set.channel_std)
    metrics = []
    for epoch in range(start_epoch, epochs):
        if stop_after is not None and epoch - start_epoch >= stop_after:
            break
        opt.lr = lr_at(epoch, schedule)
        plan = BatchPlan(seed, epoch, min(batch_size, len(train_set)), len(train_set))
        losses, accs, sizes = [], [], []
        for idx, images, labels in batches(train_set, plan):
            loss, acc = supervised_step(images, labels, model, opt, BatchStreams(seed, epoch, tuple(int(i) for i in idx)), norm)
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(idx))
        w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
        top1, top5 = evaluate(model, test_set)
        records = [
            MetricsRecord(epoch, "train", float(np.dot(w, accs)), None, float(np.dot(w, losses)), lr=opt.lr),
            MetricsRecord(epoch, "test", top1, top5, lr=opt.lr),
        ]
        metrics.extend(records)
        if on_epoch_end is not None:
            on_epoch_end(epoch, records)
    return metrics
