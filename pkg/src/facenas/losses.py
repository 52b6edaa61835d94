"""Softmax-family classification losses over (embedding, label, class weight) triples.

Embeddings are rows of an (N, d) tensor; class weights are the columns of a
(d, n) tensor. The margin losses drop the bias term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-12
COS_CLAMP = 1e-7


class ConfigError(ValueError):
    pass


@dataclass
class MarginConfig:
    m: float
    s: float = 30.0


DEFAULTS = {
    "cross_entropy": {},
    "a_softmax": {"m": 4},
    "am_softmax": {"m": 0.35, "s": 30.0},
    "arcface": {"m": 0.5, "s": 30.0},
}


def _check_labels(labels, n: int, N: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (N,):
        raise T.DimensionError(f"expected {N} labels, got shape {labels.shape}")
    if N < 1 or labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    return labels


def l2_normalize(x: Tensor, axis: int) -> Tensor:
    sq = T.sum_(x * x, axis=axis, keepdims=True)
    return x / T.sqrt(sq + NORM_EPS)


def _nll_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    lse = T.logsumexp(logits, axis=1).reshape(-1)
    picked = T.take_along_rows(logits, labels)
    return T.mean(lse - picked)


def cross_entropy(embeddings, labels, class_weights, bias=None) -> Tensor:
    """Mean negative log-softmax of ``x W + b`` at the true class (row-max stabilized)."""
    x, w = T.as_tensor(embeddings), T.as_tensor(class_weights)
    labels = _check_labels(labels, w.shape[1], x.shape[0])
    logits = T.matmul(x, w)
    if bias is not None:
        logits = logits + bias
    return _nll_from_logits(logits, labels)


def logits_cross_entropy(logits, labels) -> Tensor:
    logits = T.as_tensor(logits)
    return _nll_from_logits(logits, _check_labels(labels, logits.shape[1], logits.shape[0]))


def _cosines(x: Tensor, w: Tensor, normalize_x: bool) -> tuple[Tensor, Tensor]:
    wn = l2_normalize(w, axis=0)
    if normalize_x:
        return T.matmul(l2_normalize(x, axis=1), wn), None
    norms = T.sqrt(T.sum_(x * x, axis=1, keepdims=True) + NORM_EPS)
    return T.matmul(x / norms, wn), norms


def _replace_target(others: Tensor, target: Tensor, labels: np.ndarray) -> Tensor:
    """Logit matrix equal to ``others`` except at (i, y_i) where it takes ``target[i]``."""
    onehot = np.zeros(others.shape)
    onehot[np.arange(others.shape[0]), labels] = 1.0
    return others * (1.0 - onehot) + target.reshape(-1, 1) * onehot


def psi(theta: np.ndarray | float, m: int) -> np.ndarray:
    """Piecewise monotone extension of cos(m*theta) used by the angular softmax."""
    theta = np.asarray(theta, dtype=np.float64)
    k = np.clip(np.floor(theta * m / math.pi), 0, m - 1)
    return (-1.0) ** k * np.cos(m * theta) - 2.0 * k


def _psi_tensor(theta: Tensor, m: int) -> Tensor:
    k = np.clip(np.floor(theta.data * m / math.pi), 0, m - 1)
    sign = (-1.0) ** k
    return T.cos(theta * float(m)) * sign - 2.0 * k


def a_softmax(embeddings, labels, class_weights, cfg: MarginConfig) -> Tensor:
    m = cfg.m
    if float(m) != int(m) or int(m) < 1:
        raise ConfigError(f"a_softmax margin must be an integer >= 1, got {m}")
    m = int(m)
    x, w = T.as_tensor(embeddings), T.as_tensor(class_weights)
    labels = _check_labels(labels, w.shape[1], x.shape[0])
    cosines, norms = _cosines(x, w, normalize_x=False)
    cos_y = T.clip(T.take_along_rows(cosines, labels), -1 + COS_CLAMP, 1 - COS_CLAMP)
    target = _psi_tensor(T.arccos(cos_y), m)
    logits = _replace_target(cosines, target, labels) * norms
    return _nll_from_logits(logits, labels)


def am_softmax(embeddings, labels, class_weights, cfg: MarginConfig) -> Tensor:
    x, w = T.as_tensor(embeddings), T.as_tensor(class_weights)
    labels = _check_labels(labels, w.shape[1], x.shape[0])
    cosines, _ = _cosines(x, w, normalize_x=True)
    target = T.take_along_rows(cosines, labels) - float(cfg.m)
    logits = _replace_target(cosines, target, labels) * float(cfg.s)
    return _nll_from_logits(logits, labels)


def arcface(embeddings, labels, class_weights, cfg: MarginConfig) -> Tensor:
    m = float(cfg.m)
    if not 0 <= m < math.pi:
        raise ConfigError(f"arcface margin must lie in [0, pi), got {m}")
    x, w = T.as_tensor(embeddings), T.as_tensor(class_weights)
    labels = _check_labels(labels, w.shape[1], x.shape[0])
    cosines, _ = _cosines(x, w, normalize_x=True)
    cos_y = T.clip(T.take_along_rows(cosines, labels), -1 + COS_CLAMP, 1 - COS_CLAMP)
    theta = T.clip(T.arccos(cos_y), 0.0, math.pi - m)
    target = T.cos(theta + m)
    logits = _replace_target(cosines, target, labels) * float(cfg.s)
    return _nll_from_logits(logits, labels)


LOSSES = {
    "cross_entropy": cross_entropy,
    "a_softmax": a_softmax,
    "am_softmax": am_softmax,
    "arcface": arcface,
}


def get_loss(key: str, **params):
    """Return ``f(embeddings, labels, class_weights, bias=None)`` for a config key."""
    if key not in LOSSES:
        raise ConfigError(f"unknown loss {key!r}; choose from {sorted(LOSSES)}")
    merged = {**DEFAULTS[key], **params}
    if key == "cross_entropy":
        return lambda x, y, w, b=None: cross_entropy(x, y, w, b)
    cfg = MarginConfig(**merged)
    fn = LOSSES[key]
    return lambda x, y, w, b=None: fn(x, y, w, cfg)
