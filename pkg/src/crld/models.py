"""Desk-scale teacher/student networks, SGD with momentum, and the step schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from crld import checkpoint
from crld.tensor import (BatchNormState, Tensor, batchnorm2d, conv2d, global_avg_pool, linear,
                         reshape, relu)

ARCHS = ("small_cnn", "mlp")


@dataclass
class ModelConfig:
    arch: str = "small_cnn"
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    num_classes: int = 10
    input_size: tuple = (32, 32)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if not self.stage_channels:
            raise ValueError("model needs at least one stage")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")


def teacher_config(num_classes=10, input_size=(32, 32)):
    return ModelConfig("small_cnn", (32, 64, 128), 2, num_classes, input_size)


def student_config(num_classes=10, input_size=(32, 32)):
    return ModelConfig("small_cnn", (16, 32, 64), 1, num_classes, input_size)


@dataclass
class ModelOutput:
    logits: Tensor
    pool_feat: Tensor


class Model:
    """Parameters, batch-norm running statistics and the forward pass for a ModelConfig."""

    def __init__(self, cfg: ModelConfig, params: dict, bn: dict):
        self.cfg = cfg
        self.params = params
        self.bn = bn

    @property
    def feature_dim(self):
        return self.cfg.stage_channels[-1]

    def blocks(self):
        for s, ch in enumerate(self.cfg.stage_channels):
            for b in range(self.cfg.blocks_per_stage):
                yield f"stage{s}.block{b}", ch, (2 if s > 0 and b == 0 else 1)

    def forward(self, x, train=False) -> ModelOutput:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h, w = self.cfg.input_size
        if x.data.ndim != 4 or x.shape[1:] != (3, h, w):
            raise ValueError(f"expected input N x 3 x {h} x {w}, got {x.shape}")
        p = self.params
        if self.cfg.arch == "mlp":
            out = reshape(x, (x.shape[0], -1))
            for i in range(len(self.cfg.stage_channels)):
                out = relu(linear(out, p[f"hidden{i}.weight"], p[f"hidden{i}.bias"]))
            feat = out
        else:
            out = x
            for name, _, stride in self.blocks():
                out = conv2d(out, p[f"{name}.conv.weight"], stride)
                out = batchnorm2d(out, p[f"{name}.bn.weight"], p[f"{name}.bn.bias"], self.bn[name], train)
                out = relu(out)
            feat = global_avg_pool(out)
        return ModelOutput(linear(feat, p["fc.weight"], p["fc.bias"]), feat)

    __call__ = forward

    def no_decay_names(self):
        return frozenset(n for n in self.params if ".bn." in n)

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def state_arrays(self) -> dict:
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.bn.running_mean"] = st.running_mean
            out[f"{name}.bn.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict):
        """Copy matching arrays into this model; every expected tensor must be present."""
        for name, current in self.state_arrays().items():
            if name not in arrays:
                raise checkpoint.CheckpointShapeError(f"checkpoint is missing tensor {name!r}")
            new = arrays[name]
            if new.shape != current.shape:
                raise checkpoint.CheckpointShapeError(
                    f"tensor {name!r}: checkpoint shape {new.shape}, model expects {current.shape}")
        for name, t in self.params.items():
            t.data = np.array(arrays[name], dtype=t.data.dtype)
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.bn.running_mean"], dtype=np.float32)
            st.running_var = np.array(arrays[f"{name}.bn.running_var"], dtype=np.float32)

    def clone(self, dtype=np.float32) -> "Model":
        params = {n: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for n, t in self.params.items()}
        bn = {n: BatchNormState(st.running_mean.copy(), st.running_var.copy(), st.momentum, st.eps)
              for n, st in self.bn.items()}
        return Model(self.cfg, params, bn)


def build_model(cfg: ModelConfig, seed=0) -> Model:
    """Kaiming fan-in normal init, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    h, w = cfg.input_size
    params, bn = {}, {}

    def normal(shape, fan_in, gain):
        return Tensor(rng.standard_normal(shape) * np.sqrt(gain / fan_in), requires_grad=True)

    if cfg.arch == "mlp":
        d = 3 * h * w
        for i, ch in enumerate(cfg.stage_channels):
            params[f"hidden{i}.weight"] = normal((d, ch), d, 2.0)
            params[f"hidden{i}.bias"] = Tensor(np.zeros(ch), requires_grad=True)
            d = ch
    else:
        need = 2 ** (len(cfg.stage_channels) - 1)
        if min(h, w) < need:
            raise ValueError(f"input {h}x{w} too small for {len(cfg.stage_channels)} stages (needs >= {need})")
        model = Model(cfg, {}, {})
        c = 3
        for name, ch, _ in model.blocks():
            params[f"{name}.conv.weight"] = normal((ch, c, 3, 3), c * 9, 2.0)
            params[f"{name}.bn.weight"] = Tensor(np.ones(ch), requires_grad=True)
            params[f"{name}.bn.bias"] = Tensor(np.zeros(ch), requires_grad=True)
            bn[name] = BatchNormState.fresh(ch)
            c = ch
        d = c
    params["fc.weight"] = normal((d, cfg.num_classes), d, 1.0)
    params["fc.bias"] = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    return Model(cfg, params, bn)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    no_decay: frozenset = frozenset()
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, state: OptimizerState):
    """buf <- momentum * buf + (grad + wd * param); param <- param - lr * buf; clears grads."""
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, p in params.items():
        d = p.grad
        if state.weight_decay and name not in state.no_decay:
            d = d + p.data * np.float32(state.weight_decay)
        buf = state.buffers.get(name)
        buf = d.astype(p.data.dtype) if buf is None else buf * np.float32(state.momentum) + d
        state.buffers[name] = buf
        p.data = p.data - np.float32(state.lr) * buf
        p.grad = None


REFERENCE_MILESTONES = (150, 180, 210)
REFERENCE_EPOCHS = 240


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.05
    milestones: tuple = REFERENCE_MILESTONES
    gamma: float = 0.1

    @classmethod
    def scaled(cls, total_epochs, base_lr=0.05, gamma=0.1):
        """Milestones at the same fractions of training as 150/180/210 of 240."""
        ms = tuple(int(m * total_epochs / REFERENCE_EPOCHS) for m in REFERENCE_MILESTONES)
        return cls(base_lr, ms, gamma)


def lr_at(epoch: int, schedule: Schedule) -> float:
    decays = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.base_lr * schedule.gamma ** decays


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path, extra: dict | None = None):
    arrays = dict(model.state_arrays())
    for name, arr in (extra or {}).items():
        if name in arrays:
            raise ValueError(f"extra tensor {name!r} collides with a model tensor")
        arrays[name] = arr
    checkpoint.write_tensors(path, arrays)


def load_checkpoint(path, cfg: ModelConfig, with_extra=False):
    """Rebuild a model for ``cfg`` from ``path``; nothing is returned on any error."""
    arrays = checkpoint.read_tensors(path)
    model = build_model(cfg, seed=0)
    model.load_state_arrays(arrays)
    if not with_extra:
        return model
    own = set(model.state_arrays())
    return model, {n: a for n, a in arrays.items() if n not in own}
