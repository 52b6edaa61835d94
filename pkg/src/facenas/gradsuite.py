"""Finite-difference checks for every differentiable op and the four losses.

Each case builds a scalar function of one input from a seeded rng; inputs
that feed kinked ops (relu, max, clip, max pooling) are pushed away from the
kink so central differences stay on one branch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as Ls
from . import nn
from . import tensor as T

OP_TOL = 1e-5
LOSS_TOL = 1e-4


@dataclass
class CaseResult:
    name: str
    max_error: float
    tol: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _away(rng, shape, gap=0.1):
    z = rng.standard_normal(shape)
    return np.sign(z) * (gap + np.abs(z))


def _distinct(rng, shape):
    """Values whose pairwise gaps exceed 1e-3, so max-pool windows never tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.005, n)).reshape(shape) - n * 0.005


def _unary(fn, sampler=None):
    def build(rng):
        x = sampler(rng) if sampler else rng.standard_normal((3, 4))
        with T.no_grad():
            r = rng.standard_normal(fn(T.Tensor(x)).shape)
        return (lambda t: T.sum_(fn(t) * r)), x
    return build


def _binary(fn, which, shape_a=(3, 4), shape_b=(3, 4), sample_a=None, sample_b=None):
    def build(rng):
        a = sample_a(rng, shape_a) if sample_a else rng.standard_normal(shape_a)
        b = sample_b(rng, shape_b) if sample_b else rng.standard_normal(shape_b)
        out_shape = np.broadcast_shapes(shape_a, shape_b) if fn is not T.matmul else (shape_a[0], shape_b[1])
        r = rng.standard_normal(out_shape)
        if which == 0:
            return (lambda t: T.sum_(fn(t, b) * r)), a
        return (lambda t: T.sum_(fn(a, t) * r)), b
    return build


def _pos(rng, shape=(3, 4)):
    return rng.uniform(0.3, 2.0, shape)


def _conv(which, stride, padding, k=3):
    def build(rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, k, k))
        Ho = nn.out_size(5, k, stride, padding)
        r = rng.standard_normal((2, 4, Ho, Ho))
        if which == 0:
            return (lambda t: T.sum_(nn.conv2d(t, w, stride, padding) * r)), x
        return (lambda t: T.sum_(nn.conv2d(x, t, stride, padding) * r)), w
    return build


def _depthwise(which, stride, k=3):
    def build(rng):
        pad = (k - 1) // 2
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((3, k, k))
        Ho = nn.out_size(5, k, stride, pad)
        r = rng.standard_normal((2, 3, Ho, Ho))
        if which == 0:
            return (lambda t: T.sum_(nn.depthwise_conv2d(t, w, stride, pad) * r)), x
        return (lambda t: T.sum_(nn.depthwise_conv2d(x, t, stride, pad) * r)), w
    return build


def _separable(which, k):
    def build(rng):
        x = rng.standard_normal((2, 3, 5, 5))
        dw = rng.standard_normal((3, k, k))
        pw = rng.standard_normal((4, 3, 1, 1))
        r = rng.standard_normal((2, 4, 5, 5))
        if which == 0:
            return (lambda t: T.sum_(nn.separable_conv(t, nn.ConvParams(dw, pw)) * r)), x
        if which == 1:
            return (lambda t: T.sum_(nn.separable_conv(x, nn.ConvParams(t, pw)) * r)), dw
        return (lambda t: T.sum_(nn.separable_conv(x, nn.ConvParams(dw, t)) * r)), pw
    return build


def _pool(kind, k, stride, padding):
    def build(rng):
        x = _distinct(rng, (2, 2, 5, 5)) if kind == "max" else rng.standard_normal((2, 2, 5, 5))
        Ho = nn.out_size(5, k, stride, padding)
        r = rng.standard_normal((2, 2, Ho, Ho))
        return (lambda t: T.sum_(nn.pool(t, kind, k, stride, padding) * r)), x
    return build


def _batch_norm(which, training):
    def build(rng):
        x = rng.standard_normal((3, 2, 3, 3)) * 2 + 0.5
        s = nn.BatchNormState.create(2)
        s.gamma.data[...] = rng.uniform(0.5, 1.5, 2)
        s.beta.data[...] = rng.standard_normal(2)
        s.running_mean[...] = rng.standard_normal(2)
        s.running_var[...] = rng.uniform(0.5, 2.0, 2)
        r = rng.standard_normal(x.shape)

        def f(t):
            st = nn.BatchNormState(s.gamma, s.beta, s.running_mean.copy(), s.running_var.copy())
            if which == 1:
                st = nn.BatchNormState(t, s.beta, st.running_mean, st.running_var)
            elif which == 2:
                st = nn.BatchNormState(s.gamma, t, st.running_mean, st.running_var)
            return T.sum_(nn.batch_norm(t if which == 0 else x, st, training) * r)

        return f, (x, s.gamma.data, s.beta.data)[which]
    return build


def _dropblock(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    r = rng.standard_normal(x.shape)
    seed = int(rng.integers(1 << 30))
    return (lambda t: T.sum_(nn.dropblock(t, 3, 0.8, True, np.random.default_rng(seed)) * r)), x


def _linear(which):
    def build(rng):
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)
        r = rng.standard_normal((4, 5))
        args = [x, w, b]

        def f(t):
            a = list(args)
            a[which] = t
            return T.sum_(nn.linear(*a) * r)

        return f, args[which]
    return build


def _loss(key, which, **params):
    fn = Ls.get_loss(key, **params)

    def build(rng):
        n, d, c = 5, 4, 3
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, c))
        y = rng.integers(0, c, n)
        b = rng.standard_normal(c) * 0.1
        if which == 0:
            return (lambda t: fn(t, y, w, b)), x
        return (lambda t: fn(x, y, t, b)), w
    return build


def _near_margin_arcface(rng):
    """Target angles placed around pi - m, the point where the clamp engages."""
    m = 0.5
    fn = Ls.get_loss("arcface", m=m, s=8.0)
    n, d, c = 4, 3, 3
    w = rng.standard_normal((d, c))
    y = rng.integers(0, c, n)
    wn = w / np.linalg.norm(w, axis=0)
    x = np.empty((n, d))
    for i in range(n):
        u = wn[:, y[i]]
        v = rng.standard_normal(d)
        v -= v.dot(u) * u
        v /= np.linalg.norm(v)
        theta = np.pi - m + rng.choice([-1, 1]) * rng.uniform(0.02, 0.2)
        x[i] = np.cos(theta) * u + np.sin(theta) * v
    return (lambda t: fn(t, y, w)), x


CASES: dict[str, tuple[Callable, float]] = {
    "neg": (_unary(T.neg), OP_TOL),
    "relu": (_unary(T.relu, lambda r: _away(r, (3, 4))), OP_TOL),
    "exp": (_unary(T.exp), OP_TOL),
    "log": (_unary(T.log, _pos), OP_TOL),
    "cos": (_unary(T.cos), OP_TOL),
    "sin": (_unary(T.sin), OP_TOL),
    "arcsin": (_unary(T.arcsin, lambda r: r.uniform(-0.9, 0.9, (3, 4))), OP_TOL),
    "arccos": (_unary(T.arccos, lambda r: r.uniform(-0.9, 0.9, (3, 4))), OP_TOL),
    "sqrt": (_unary(T.sqrt, _pos), OP_TOL),
    "tanh": (_unary(T.tanh), OP_TOL),
    "sigmoid": (_unary(T.sigmoid), OP_TOL),
    "power": (_unary(lambda t: T.power(t, 2.5), _pos), OP_TOL),
    "clip": (_unary(lambda t: T.clip(t, -0.5, 0.5),
                    lambda r: r.choice([-1, 1], (3, 4)) * r.choice([0.2, 1.0], (3, 4)) + r.uniform(-0.05, 0.05, (3, 4))),
             OP_TOL),
    "add/a": (_binary(T.add, 0), OP_TOL),
    "add/b_broadcast": (_binary(T.add, 1, shape_b=(4,)), OP_TOL),
    "sub/a": (_binary(T.sub, 0), OP_TOL),
    "sub/b_broadcast": (_binary(T.sub, 1, shape_b=(3, 1)), OP_TOL),
    "mul/a": (_binary(T.mul, 0), OP_TOL),
    "mul/b_broadcast": (_binary(T.mul, 1, shape_b=(1, 4)), OP_TOL),
    "div/a": (_binary(T.div, 0, sample_b=_pos), OP_TOL),
    "div/b": (_binary(T.div, 1, sample_b=_pos), OP_TOL),
    "maximum/a": (_binary(T.maximum, 0, sample_a=lambda r, s: _away(r, s, 0.2), sample_b=lambda r, s: np.zeros(s)),
                  OP_TOL),
    "maximum/b": (_binary(T.maximum, 1, sample_a=lambda r, s: np.zeros(s), sample_b=lambda r, s: _away(r, s, 0.2)),
                  OP_TOL),
    "matmul/a": (_binary(T.matmul, 0, (3, 4), (4, 2)), OP_TOL),
    "matmul/b": (_binary(T.matmul, 1, (3, 4), (4, 2)), OP_TOL),
    "sum/axis": (_unary(lambda t: T.sum_(t, axis=1)), OP_TOL),
    "mean/axis": (_unary(lambda t: T.mean(t, axis=0, keepdims=True)), OP_TOL),
    "reshape": (_unary(lambda t: T.reshape(t, (2, 6))), OP_TOL),
    "transpose": (_unary(lambda t: T.transpose(t)), OP_TOL),
    "concat": (_unary(lambda t: T.concat([t, t * 2.0], axis=1)), OP_TOL),
    "take_along_rows": (_unary(lambda t: T.take_along_rows(t, np.array([0, 3, 1]))), OP_TOL),
    "index": (_unary(lambda t: T.index(t, np.array([2, 0, 2]))), OP_TOL),
    "logsumexp": (_unary(lambda t: T.logsumexp(t, axis=1)), OP_TOL),
    "log_softmax": (_unary(lambda t: T.log_softmax(t, axis=1)), OP_TOL),
    "softmax": (_unary(lambda t: T.softmax(t, axis=1)), OP_TOL),
    "conv2d/x": (_conv(0, 1, 1), OP_TOL),
    "conv2d/w": (_conv(1, 1, 1), OP_TOL),
    "conv2d/x_stride2": (_conv(0, 2, 1), OP_TOL),
    "conv2d/w_stride2": (_conv(1, 2, 1), OP_TOL),
    "conv1x1/x": (_conv(0, 1, 0, k=1), OP_TOL),
    "conv1x1/w": (_conv(1, 1, 0, k=1), OP_TOL),
    "depthwise/x": (_depthwise(0, 1), OP_TOL),
    "depthwise/w": (_depthwise(1, 1), OP_TOL),
    "depthwise/x_stride2": (_depthwise(0, 2), OP_TOL),
    "depthwise/w_stride2": (_depthwise(1, 2), OP_TOL),
    "separable3x3/x": (_separable(0, 3), OP_TOL),
    "separable3x3/dw": (_separable(1, 3), OP_TOL),
    "separable3x3/pw": (_separable(2, 3), OP_TOL),
    "separable5x5/x": (_separable(0, 5), OP_TOL),
    "separable5x5/dw": (_separable(1, 5), OP_TOL),
    "avgpool/k3s1p1": (_pool("avg", 3, 1, 1), OP_TOL),
    "avgpool/k2s2": (_pool("avg", 2, 2, 0), OP_TOL),
    "avgpool/k1s2": (_pool("avg", 1, 2, 0), OP_TOL),
    "maxpool/k3s1p1": (_pool("max", 3, 1, 1), OP_TOL),
    "maxpool/k2s2": (_pool("max", 2, 2, 0), OP_TOL),
    "global_avg_pool": (_unary(nn.global_avg_pool, lambda r: r.standard_normal((2, 3, 4, 4))), OP_TOL),
    "shift_lower_right": (_unary(nn.shift_lower_right, lambda r: r.standard_normal((2, 2, 4, 4))), OP_TOL),
    "batch_norm/x_train": (_batch_norm(0, True), OP_TOL),
    "batch_norm/gamma_train": (_batch_norm(1, True), OP_TOL),
    "batch_norm/beta_train": (_batch_norm(2, True), OP_TOL),
    "batch_norm/x_eval": (_batch_norm(0, False), OP_TOL),
    "dropblock": (_dropblock, OP_TOL),
    "linear/x": (_linear(0), OP_TOL),
    "linear/w": (_linear(1), OP_TOL),
    "linear/b": (_linear(2), OP_TOL),
    "loss/cross_entropy/x": (_loss("cross_entropy", 0), LOSS_TOL),
    "loss/cross_entropy/w": (_loss("cross_entropy", 1), LOSS_TOL),
    "loss/a_softmax/x": (_loss("a_softmax", 0), LOSS_TOL),
    "loss/a_softmax/w": (_loss("a_softmax", 1), LOSS_TOL),
    "loss/am_softmax/x": (_loss("am_softmax", 0), LOSS_TOL),
    "loss/am_softmax/w": (_loss("am_softmax", 1), LOSS_TOL),
    "loss/arcface/x": (_loss("arcface", 0), LOSS_TOL),
    "loss/arcface/w": (_loss("arcface", 1), LOSS_TOL),
    "loss/arcface/near_margin": (_near_margin_arcface, LOSS_TOL),
}


def run_case(name: str, seeds: int = 20) -> CaseResult:
    build, tol = CASES[name]
    worst = 0.0
    for seed in range(seeds):
        f, x = build(np.random.default_rng([seed, hash_name(name)]))
        worst = max(worst, T.gradient_check(f, x))
    return CaseResult(name, worst, tol, seeds)


def hash_name(name: str) -> int:
    # stable across processes, unlike hash()
    return sum((i + 1) * ord(ch) for i, ch in enumerate(name))


def run_suite(seeds: int = 20, names=None, report: Callable[[CaseResult], None] | None = None):
    t0 = time.perf_counter()
    results = []
    for name in names or CASES:
        res = run_case(name, seeds)
        results.append(res)
        if report:
            report(res)
    return results, time.perf_counter() - t0
