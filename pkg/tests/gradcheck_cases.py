"""Gradient-check cases: every layer kind and every distillation loss.

Each case maps an rng to ``(fn, inputs)`` for :func:`gradcheck.check_grads`.
"""

import numpy as np

from dualkd import nn
from dualkd import tensor as T
from dualkd.distill import (
    DistillConfig,
    FeatureAdapter,
    SoftTargets,
    combined_loss,
    dfm_loss,
    feature_loss,
    gram,
    soft_loss,
    ssfm_loss,
)
from dualkd.tensor import Tensor
from gradcheck import rand, weighted_sum

N_INSTANCES = 5


def _to64(module):
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    return module


def _probs(rng, b, k):
    p = rng.dirichlet(np.ones(k), size=b)
    return SoftTargets(p)


def _unary(op, positive=False, kink=False):
    def build(rng):
        x = rand(rng, 2, 3, 4, away_from_zero=kink)
        if positive:
            x.data = np.abs(x.data) + 0.5
        w = rng.standard_normal(x.shape)
        return (lambda: (op(x) * Tensor(w)).sum()), [x]
    return build


def _binary(op, shape_b):
    def build(rng):
        a, b = rand(rng, 2, 3, 4), rand(rng, *shape_b)
        w = rng.standard_normal((2, 3, 4))
        return (lambda: (op(a, b) * Tensor(w)).sum()), [a, b]
    return build


def _conv(c_in, c_out, kernel, stride, padding, groups, bias, hw=(6, 5)):
    def build(rng):
        kh, kw = T._pair(kernel)
        x = rand(rng, 2, c_in, *hw)
        w = rand(rng, c_out, c_in // groups, kh, kw)
        bb = rand(rng, c_out) if bias else None
        inputs = [x, w] + ([bb] if bias else [])
        r = np.random.default_rng(1)
        ref = T.conv2d(x, w, bb, stride, padding, groups)
        wts = Tensor(r.standard_normal(ref.shape))
        return (lambda: (T.conv2d(x, w, bb, stride, padding, groups) * wts).sum()), inputs
    return build


def _batch_norm(train):
    def build(rng):
        x = rand(rng, 3, 2, 3, 4)
        g, b = rand(rng, 2), rand(rng, 2)
        rm = rng.standard_normal(2).astype(np.float32)
        rv = (rng.uniform(0.5, 2.0, 2)).astype(np.float32)
        wts = Tensor(rng.standard_normal(x.shape))

        def fn():
            # fresh copies so running-stat updates cannot leak between evaluations
            return (T.batch_norm(x, g, b, rm.copy(), rv.copy(), train) * wts).sum()
        return fn, [x, g, b]
    return build


def _linear(rng):
    x, w, b = rand(rng, 3, 5), rand(rng, 4, 5), rand(rng, 4)
    wts = Tensor(rng.standard_normal((3, 4)))
    return (lambda: (T.linear(x, w, b) * wts).sum()), [x, w, b]


def _matmul(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)
    wts = Tensor(rng.standard_normal((2, 3, 5)))
    return (lambda: (T.matmul(a, b) * wts).sum()), [a, b]


def _reshape_transpose(rng):
    x = rand(rng, 2, 3, 4)
    wts = Tensor(rng.standard_normal((4, 6)))
    return (lambda: (x.transpose(2, 0, 1).reshape(4, 6) * wts).sum()), [x]


def _reduce(kind):
    def build(rng):
        x = rand(rng, 2, 3, 4)
        wts = Tensor(rng.standard_normal((2, 4)))
        op = T.tsum if kind == "sum" else T.tmean
        return (lambda: (op(x, axis=1) * wts).sum()), [x]
    return build


def _softmax(log):
    def build(rng):
        x = rand(rng, 3, 5)
        wts = Tensor(rng.standard_normal((3, 5)))
        op = T.log_softmax if log else T.softmax
        return (lambda: (op(x, axis=1) * wts).sum()), [x]
    return build


def _pool(rng):
    x = rand(rng, 2, 2, 5, 6)
    wts = Tensor(rng.standard_normal((2, 2, 2, 3)))
    return (lambda: (T.avg_pool2d(x, 2) * wts).sum()), [x]


def _global_pool(rng):
    x = rand(rng, 2, 3, 4, 5)
    wts = Tensor(rng.standard_normal((2, 3)))
    return (lambda: (T.global_avg_pool(x) * wts).sum()), [x]


def _resample(out_hw):
    def build(rng):
        x = rand(rng, 2, 2, 5, 4)
        wts = Tensor(rng.standard_normal((2, 2) + out_hw))
        return (lambda: (T.resample2d(x, *out_hw) * wts).sum()), [x]
    return build


def _residual_block(rng):
    """Conv-BN-ReLU body with a strided projection shortcut, through the layer modules."""
    body = nn.Sequential(
        ("conv1", nn.Conv2d(2, 3, 3, stride=2, padding=1, bias=False, rng=rng)),
        ("bn1", nn.BatchNorm2d(3)),
        ("relu", nn.ReLU()),
        ("conv2", nn.Conv2d(3, 3, 3, padding=1, groups=3, bias=True, rng=rng)),
    )
    shortcut = nn.Sequential(("conv", nn.Conv2d(2, 3, 1, stride=2, bias=False, rng=rng)))
    block = _to64(nn.Residual(body, shortcut))
    x = rand(rng, 2, 2, 5, 5)
    wts = Tensor(rng.standard_normal((2, 3, 3, 3)))
    params = [p for _, p in block.named_parameters()]
    return (lambda: (block(x, False) * wts).sum()), [x] + params


def _head(rng):
    head = _to64(nn.Sequential(("pool", nn.GlobalAvgPool()), ("fc", nn.Linear(3, 4, rng=rng))))
    x = rand(rng, 2, 3, 2, 3)
    labels = rng.integers(0, 4, 2)
    params = [p for _, p in head.named_parameters()]
    return (lambda: T.cross_entropy(head(x, False), labels)), [x] + params


# losses ---------------------------------------------------------------------

def _cross_entropy(rng):
    z = rand(rng, 4, 10)
    y = rng.integers(0, 10, 4)
    return (lambda: T.cross_entropy(z, y)), [z]


def _soft(direction):
    def build(rng):
        z = rand(rng, 4, 6)
        tgt = _probs(rng, 4, 6)
        return (lambda: soft_loss(z, tgt, 2.0, direction)), [z]
    return build


def _gram(rng):
    f = rand(rng, 2, 3, 5, 6)
    wts = Tensor(rng.standard_normal((2, 16, 16)))
    return (lambda: (gram(f, 4) * wts).sum()), [f]


def _ssfm(rng):
    fs, ft = rand(rng, 2, 3, 4, 5), rand(rng, 2, 4, 6, 3)
    return (lambda: ssfm_loss(fs, ft, 3)), [fs, ft]


def _dfm(rng):
    fs, ft = rand(rng, 2, 3, 3, 4), rand(rng, 2, 5, 6, 7)
    ad = FeatureAdapter(5, 3, rng, dtype=np.float64)
    return (lambda: dfm_loss(fs, ft, ad)), [fs, ft, ad.weight]


def _combined(method):
    def build(rng):
        cfg = DistillConfig(feature_method=method)
        z = rand(rng, 3, 10)
        y = rng.integers(0, 10, 3)
        tgt = _probs(rng, 3, 10)
        fs = [rand(rng, 3, 2, 4, 4), rand(rng, 3, 3, 3, 3), rand(rng, 3, 4, 2, 2)]
        ft = [rand(rng, 3, 3, 5, 4), rand(rng, 3, 4, 4, 3), rand(rng, 3, 5, 3, 2)]
        adapters = {s: FeatureAdapter(ft[s - 1].shape[1], fs[s - 1].shape[1], rng, dtype=np.float64)
                    for s in cfg.stages} if method == "dfm" else None

        def fn():
            return combined_loss(
                soft_loss(z, tgt, cfg.T, cfg.kl_direction),
                feature_loss(fs, ft, cfg, adapters),
                T.cross_entropy(z, y),
                cfg,
            )
        extra = [a.weight for a in adapters.values()] if adapters else []
        return fn, [z] + fs + ft + extra
    return build


LAYER_CASES = {
    "add_broadcast": _binary(lambda a, b: a + b, (3, 1)),
    "mul_broadcast": _binary(lambda a, b: a * b, (1, 3, 4)),
    "sub": _binary(lambda a, b: a - b, (2, 3, 4)),
    "power": _unary(lambda x: x ** 3),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "relu": _unary(T.relu, kink=True),
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "reshape_transpose": _reshape_transpose,
    "matmul": _matmul,
    "log_softmax": _softmax(True),
    "softmax": _softmax(False),
    "conv2d_dense": _conv(2, 3, 3, 1, 1, 1, True),
    "conv2d_strided_rect": _conv(2, 3, (2, 3), (2, 1), (0, 1), 1, False),
    "conv2d_depthwise": _conv(3, 3, 3, 2, 1, 3, False),
    "conv2d_grouped": _conv(4, 6, 3, 1, 1, 2, True),
    "conv2d_pointwise": _conv(3, 4, 1, 1, 0, 1, False),
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "avg_pool2d": _pool,
    "global_avg_pool": _global_pool,
    "linear": _linear,
    "resample2d_shrink": _resample((3, 2)),
    "resample2d_grow": _resample((7, 6)),
    "residual_block": _residual_block,
    "pool_linear_head": _head,
}

LOSS_CASES = {
    "cross_entropy": _cross_entropy,
    "soft_loss_as_written": _soft("as_written"),
    "soft_loss_teacher_first": _soft("teacher_first"),
    "gram": _gram,
    "ssfm_loss": _ssfm,
    "dfm_loss": _dfm,
    "combined_dfm": _combined("dfm"),
    "combined_ssfm": _combined("ssfm"),
}

ALL_CASES = {**LAYER_CASES, **LOSS_CASES}
