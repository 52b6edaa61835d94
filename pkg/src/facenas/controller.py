"""Recurrent architecture controller trained with REINFORCE.

Every architecture is emitted through the same token sequence: for node i,
one 4-way op decision followed by i binary skip decisions (one per earlier
node). Because that sequence is fixed, sampling and teacher-forced scoring
run batched across traces.

Sampling uses a plain-numpy LSTM; scoring for the policy gradient replays
the decisions through the autograd tape. The two paths are checked against
each other in the tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import OPS, ArchEncoding
from .schedules import sgd_step
from .tensor import ContractError, Tensor

HIDDEN = 100
EMBED = 32


def decision_plan(L: int) -> list[tuple[str, int, int]]:
    """Token sequence as (kind, node, predecessor) triples."""
    seq = []
    for i in range(L):
        seq.append(("op", i, -1))
        seq.extend(("skip", i, j) for j in range(i))
    return seq


@dataclass
class ControllerState:
    L: int
    params: dict
    temperature: float = 1.0
    baseline: float = 0.0
    baseline_decay: float = 0.95
    entropy_weight: float = 1e-4
    baseline_mode: str = "ema"  # or "batch_mean"
    hidden: int = HIDDEN

    @classmethod
    def create(cls, L: int, seed: int = 0, hidden: int = HIDDEN, embed: int = EMBED, **kw) -> "ControllerState":
        rng = np.random.default_rng(seed)

        def u(*shape):
            return rng.uniform(-0.1, 0.1, shape)

        params = {
            "lstm.w": u(embed + hidden, 4 * hidden),
            "lstm.b": np.zeros(4 * hidden),
            "emb.go": u(1, embed),
            "emb.op": u(len(OPS), embed),
            "emb.skip": u(2, embed),
            # zero heads: a fresh controller is uniform over every decision
            "head.op.w": np.zeros((hidden, len(OPS))),
            "head.op.b": np.zeros(len(OPS)),
        }
        for j in range(max(L - 1, 0)):
            params[f"head.skip{j}.w"] = np.zeros((hidden, 2))
            params[f"head.skip{j}.b"] = np.zeros(2)
        return cls(L, {k: T.parameter(v, k) for k, v in params.items()}, hidden=hidden, **kw)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"controller/{k}": v.data for k, v in sorted(self.params.items())}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            name = k.removeprefix("controller/")
            if name not in self.params or self.params[name].shape != v.shape:
                raise ContractError(f"controller parameter {name!r} missing or mis-shaped")
            self.params[name].data[...] = v

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


@dataclass
class SampleTrace:
    arch: ArchEncoding
    log_prob: float
    entropy: float
    decisions: tuple = field(default=(), repr=False)

    def to_json(self, reward: float | None = None) -> dict:
        out = {"arch": str(self.arch), "log_prob": self.log_prob, "entropy": self.entropy}
        if reward is not None:
            out["reward"] = reward
        return out


# -- numpy path (sampling, argmax) ---------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_np(p, x, h, c):
    H = h.shape[1]
    z = np.concatenate([x, h], axis=1) @ p["lstm.w"].data + p["lstm.b"].data
    i, f, o, g = _sigmoid(z[:, :H]), _sigmoid(z[:, H:2 * H]), _sigmoid(z[:, 2 * H:3 * H]), np.tanh(z[:, 3 * H:])
    c = f * c + i * g
    return o * np.tanh(c), c


def _head(kind, j):
    return ("head.op.w", "head.op.b") if kind == "op" else (f"head.skip{j}.w", f"head.skip{j}.b")


def _probs_np(logits, temperature):
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _decode(state: ControllerState, n: int, choose):
    p = state.params
    h = np.zeros((n, state.hidden))
    c = np.zeros((n, state.hidden))
    x = np.repeat(p["emb.go"].data, n, axis=0)
    decisions, logp, ent = [], np.zeros(n), np.zeros(n)
    for kind, i, j in decision_plan(state.L):
        h, c = _lstm_np(p, x, h, c)
        wk, bk = _head(kind, j)
        probs = _probs_np(h @ p[wk].data + p[bk].data, state.temperature)
        tok = choose(probs)
        rows = np.arange(n)
        with np.errstate(divide="ignore"):
            logp += np.log(probs[rows, tok])
            ent -= np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0).sum(axis=1)
        decisions.append(tok)
        x = (p["emb.op"] if kind == "op" else p["emb.skip"]).data[tok]
    return np.stack(decisions, axis=1) if decisions else np.zeros((n, 0), dtype=np.int64), logp, ent


def decisions_to_arch(L: int, tokens) -> ArchEncoding:
    ops, skips = [], [[] for _ in range(L)]
    for (kind, i, j), t in zip(decision_plan(L), tokens):
        if kind == "op":
            ops.append(int(t))
        elif t:
            skips[i].append(j)
    return ArchEncoding(tuple(ops), tuple(tuple(s) for s in skips))


def arch_to_decisions(arch: ArchEncoding) -> np.ndarray:
    return np.array([arch.ops[i] if kind == "op" else int(j in arch.skips[i])
                     for kind, i, j in decision_plan(arch.L)], dtype=np.int64)


def sample_batch(state: ControllerState, rng: np.random.Generator, n: int) -> list[SampleTrace]:
    def choose(probs):
        u = rng.random(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)

    toks, logp, ent = _decode(state, n, choose)
    return [SampleTrace(decisions_to_arch(state.L, toks[k]), float(logp[k]), float(ent[k]), tuple(toks[k].tolist()))
            for k in range(n)]


def sample(state: ControllerState, rng: np.random.Generator) -> SampleTrace:
    return sample_batch(state, rng, 1)[0]


def argmax_decode(state: ControllerState) -> ArchEncoding:
    # np.argmax returns the first maximal index: ties go to the lowest op id / no skip
    toks, _, _ = _decode(state, 1, lambda probs: probs.argmax(axis=1))
    return decisions_to_arch(state.L, toks[0])


def first_decision_probs(state: ControllerState) -> np.ndarray:
    p = state.params
    h, _ = _lstm_np(p, p["emb.go"].data, np.zeros((1, state.hidden)), np.zeros((1, state.hidden)))
    return _probs_np(h @ p["head.op.w"].data + p["head.op.b"].data, state.temperature)[0]


# -- tape path (scoring for gradients) ----------------------------------------------

def score(state: ControllerState, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    """Teacher-forced (log_prob, entropy) per trace, each of shape (n,), on the tape.

    ``tokens`` is an (n, decisions) integer array.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    p = state.params
    Hd = state.hidden
    h = T.Tensor(np.zeros((n, Hd)))
    c = T.Tensor(np.zeros((n, Hd)))
    x = T.index(p["emb.go"], np.zeros(n, dtype=np.int64))
    logp = T.Tensor(np.zeros(n))
    ent = T.Tensor(np.zeros(n))
    inv_t = 1.0 / state.temperature
    for step, (kind, i, j) in enumerate(decision_plan(state.L)):
        z = T.matmul(T.concat([x, h], axis=1), p["lstm.w"]) + p["lstm.b"]
        ig = T.sigmoid(T.index(z, (slice(None), slice(0, Hd))))
        fg = T.sigmoid(T.index(z, (slice(None), slice(Hd, 2 * Hd))))
        og = T.sigmoid(T.index(z, (slice(None), slice(2 * Hd, 3 * Hd))))
        gg = T.tanh(T.index(z, (slice(None), slice(3 * Hd, 4 * Hd))))
        c = fg * c + ig * gg
        h = og * T.tanh(c)
        wk, bk = _head(kind, j)
        logits = (T.matmul(h, p[wk]) + p[bk]) * inv_t
        lsm = T.log_softmax(logits, axis=1)
        tok = tokens[:, step]
        logp = logp + T.take_along_rows(lsm, tok)
        ent = ent - T.sum_(T.exp(lsm) * lsm, axis=1)
        x = T.index(p["emb.op"] if kind == "op" else p["emb.skip"], tok)
    return logp, ent


def reinforce_update(state: ControllerState, traces: list[SampleTrace], rewards, lr: float) -> dict:
    """One SGD ascent step on mean((r - b) * log_prob) + entropy_weight * mean(entropy)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(traces) != len(rewards) or len(traces) == 0:
        raise ContractError(f"need equal, non-zero trace/reward counts, got {len(traces)} and {len(rewards)}")
    baseline = float(rewards.mean()) if state.baseline_mode == "batch_mean" else state.baseline
    adv = rewards - baseline
    tokens = np.array([t.decisions or tuple(arch_to_decisions(t.arch)) for t in traces], dtype=np.int64)
    params = list(state.params.values())
    for prm in params:
        prm.zero_grad()
    logp, ent = score(state, tokens)
    objective = T.mean(logp * adv)
    if state.entropy_weight:
        objective = objective + T.mean(ent) * state.entropy_weight
    loss = -objective
    loss.backward()
    sgd_step(params, [prm.grad for prm in params], lr)
    state.baseline = state.baseline_decay * state.baseline + (1 - state.baseline_decay) * float(rewards.mean())
    return {"baseline": baseline, "mean_reward": float(rewards.mean()), "loss": loss.item()}


def op_probability(state: ControllerState, arch: ArchEncoding) -> float:
    """Probability the controller emits exactly ``arch``."""
    with T.no_grad():
        logp, _ = score(state, arch_to_decisions(arch)[None, :])
    return math.exp(logp.data[0])
