"""Gradient-check cases: name -> (function of tensors, input arrays, differentiated positions)."""

import numpy as np

from crld import tensor as tn
from crld.models import ModelConfig, build_model


def _positive(a):
    return np.abs(a) + 0.5


def _bn(train):
    def fn(x, g, b):
        st = tn.BatchNormState(np.full(3, 0.2, np.float32), np.full(3, 1.5, np.float32))
        return tn.tsum(tn.mul(tn.batchnorm2d(x, g, b, st, train), _W_BN))
    return fn


_W_BN = np.random.default_rng(7).standard_normal((4, 3, 3, 3))


def _network(cfg, seed):
    model = build_model(cfg, seed)
    names = list(model.params)
    arrays = [model.params[n].data for n in names]

    def fn(x, *params):
        model.params = dict(zip(names, params))
        for st in model.bn.values():
            st.running_mean[...] = 0.0
            st.running_var[...] = 1.0
        return tn.cross_entropy(model.forward(x, train=True).logits, np.arange(x.shape[0]) % cfg.num_classes)

    return fn, arrays


def cases():
    r = np.random.default_rng(2024)
    n = r.standard_normal
    w46 = n((4, 6))
    w35, w56 = n((3, 5)), n((5, 6))
    w_s1, w_s2, w_gap = n((2, 4, 6, 6)), n((2, 4, 4, 4)), n((2, 3))
    teacher = n((4, 6)) * 2
    target = n((4, 6))
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    out = {
        "add": (lambda a, b: tn.tsum(tn.mul(tn.add(a, b), w46)), [n((4, 6)), n((1, 6))], None),
        "sub": (lambda a, b: tn.tsum(tn.mul(tn.sub(a, b), w46)), [n((4, 6)), n((4, 6))], None),
        "mul": (lambda a, b: tn.tsum(tn.mul(a, b)), [n((4, 6)), n((4, 6))], None),
        "neg": (lambda a: tn.tsum(tn.mul(tn.neg(a), w46)), [n((4, 6))], None),
        "matmul": (lambda a, b: tn.tsum(tn.mul(tn.matmul(a, b), w35)), [n((3, 4)), n((4, 5))], None),
        "sum_axis": (lambda a: tn.tsum(tn.mul(tn.tsum(a, axis=1), np.arange(4.0))), [n((4, 6))], None),
        "mean": (lambda a: tn.tsum(tn.mul(tn.mean(a, axis=0), np.arange(6.0))), [n((4, 6))], None),
        "reshape": (lambda a: tn.tsum(tn.mul(tn.reshape(a, (6, 4)), w46.T)), [n((4, 6))], None),
        "relu": (lambda a: tn.tsum(tn.mul(tn.relu(a), w46)), [np.sign(n((4, 6))) * (0.1 + r.random((4, 6)))], None),
        "exp": (lambda a: tn.tsum(tn.mul(tn.exp(a), w46)), [n((4, 6))], None),
        "log": (lambda a: tn.tsum(tn.mul(tn.log(a), w46)), [_positive(n((4, 6)))], None),
        "concat": (lambda a, b: tn.tsum(tn.mul(tn.concat([a, b], 0), w56)), [n((2, 6)), n((3, 6))], None),
        "conv2d_s1": (lambda x, w: tn.tsum(tn.mul(tn.conv2d(x, w, 1), w_s1)), [n((2, 3, 6, 6)), n((4, 3, 3, 3))], None),
        "conv2d_s2": (lambda x, w: tn.tsum(tn.mul(tn.conv2d(x, w, 2), w_s2)), [n((2, 3, 8, 8)), n((4, 3, 3, 3))], None),
        "batchnorm_train": (_bn(True), [n((4, 3, 3, 3)) * 2 + 1, n(3), n(3)], None),
        "batchnorm_eval": (_bn(False), [n((4, 3, 3, 3)), n(3), n(3)], None),
        "global_avg_pool": (lambda x: tn.tsum(tn.mul(tn.global_avg_pool(x), w_gap)), [n((2, 3, 4, 4))], None),
        "linear": (lambda x, w, b: tn.tsum(tn.mul(tn.linear(x, w, b), w35)), [n((3, 4)), n((4, 5)), n(5)], None),
        "softmax_t": (lambda z: tn.tsum(tn.mul(tn.softmax_t(z, 2.0), w46)), [n((4, 6))], None),
        "log_softmax": (lambda z: tn.tsum(tn.mul(tn.log_softmax(z, 3.0), w46)), [n((4, 6))], None),
        "cross_entropy": (lambda z: tn.cross_entropy(z, [0, 5, 2, 3]), [n((4, 6))], None),
        "kld": (lambda s: tn.kld(s, teacher, 4.0), [n((4, 6))], None),
        "kld_masked": (lambda s: tn.kld(s, teacher, 1.0, mask), [n((4, 6))], None),
        "masked_mse": (lambda p: tn.masked_mse(p, target, mask), [n((4, 6))], None),
    }
    fn, arrays = _network(ModelConfig("small_cnn", (4, 6, 8), 1, 5, (8, 8)), 3)
    out["student_cnn"] = (fn, [n((4, 3, 8, 8))] + arrays, None)
    fn, arrays = _network(ModelConfig("mlp", (6,), 1, 3, (4, 4)), 4)
    out["mlp"] = (fn, [n((4, 3, 4, 4))] + arrays, None)
    return out
