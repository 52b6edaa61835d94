"""Alternating search (shared-weight child training, then controller updates), ranking and retraining."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import arch as A
from . import controller as C
from . import losses
from . import tensor as T
from .config import ConfigError, RunConfig, config_from_dict
from .data import AugmentConfig, SplitDataset, augment_batch, batch_rng
from .reward import LatencyModel, compute_reward, load_cost_table, measure_latency
from .schedules import OptimState, ScheduleConfig, momentum_step, piecewise_controller_lr, warmup_then_cosine

METRIC_FIELDS = ("epoch", "phase", "loss", "val_acc", "latency", "reward", "lr", "clamp_count")

# rng stream ids for batch_rng
_SHUFFLE, _AUGMENT, _SAMPLE, _DROPBLOCK, _CONTROLLER = range(5)


class PhaseViolation(RuntimeError):
    pass


@dataclass
class RankedArch:
    arch: A.ArchEncoding
    val_accuracy: float
    latency: float
    rank: int

    def to_json(self) -> dict:
        return {"arch": str(self.arch), "val_accuracy": self.val_accuracy, "latency": self.latency,
                "rank": self.rank}


@dataclass
class SearchState:
    shared: A.SharedParams
    controller: C.ControllerState
    optim: OptimState
    epoch: int = 0  # epochs completed
    history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    audit: list = field(default_factory=list)


@dataclass
class SearchResult:
    ranked: list
    state: SearchState
    checkpoint: Path | None = None


@dataclass
class RetrainResult:
    arch: A.ArchEncoding
    test_accuracy: float
    curve: list
    param_count: int
    latency: float

    def to_json(self) -> dict:
        return {"arch": str(self.arch), "test_accuracy": self.test_accuracy, "curve": self.curve,
                "param_count": self.param_count, "latency": self.latency}


# -- small helpers ------------------------------------------------------------------

def digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def latency_model(cfg: RunConfig) -> LatencyModel:
    kw = {"costs": load_cost_table(cfg.cost_table)} if cfg.cost_table else {}
    return LatencyModel(cfg.latency_mode, target=cfg.target, q=cfg.q, **kw)


def schedule(cfg: RunConfig, total_epochs: int) -> ScheduleConfig:
    # warmup never eats the whole run
    warm = min(cfg.warmup_epochs, max(total_epochs - 1, 0))
    return ScheduleConfig(cfg.lr_min, cfg.lr_max, max(total_epochs - warm, 1), warm)


def augment_config(cfg: RunConfig) -> AugmentConfig:
    return AugmentConfig(cfg.flip_prob, cfg.pad_pixels, cfg.crop_size, cfg.cutout_size)


def batches(n: int, size: int, order=None) -> list[np.ndarray]:
    """Minibatch index arrays; a trailing batch of one sample is dropped (batch norm needs two)."""
    order = np.arange(n) if order is None else order
    out = [order[s:s + size] for s in range(0, n, size)]
    return [b for b in out if len(b) >= 2]


def child_loss(plan: A.NetworkPlan, x, y, loss_fn, training: bool, rng=None):
    logits, emb = A.forward(plan, x, training, rng, return_embedding=True)
    p = plan.shared.params
    return loss_fn(emb, y, p["head/fc_w"], p["head/fc_b"]), logits


def predict(plan: A.NetworkPlan, x, loss_key: str, cache=None, cache_key=None, batch_stats=False) -> np.ndarray:
    with T.no_grad():
        logits, emb = A.forward(plan, x, False, cache=cache, cache_key=cache_key, return_embedding=True,
                                batch_stats=batch_stats)
    if loss_key == "cross_entropy":
        return logits.data.argmax(axis=1)
    # margin losses train angles only: classify by cosine to each class weight
    w = plan.shared.params["head/fc_w"].data
    return (emb.data @ (w / np.linalg.norm(w, axis=0, keepdims=True))).argmax(axis=1)


def accuracy(plan, x, y, loss_key: str, batch_size: int) -> float:
    hits = 0
    for idx in batches(len(y), batch_size) if len(y) >= 2 else [np.arange(len(y))]:
        hits += int((predict(plan, x[idx], loss_key) == y[idx]).sum())
    return hits / len(y)


def train_step(plan: A.NetworkPlan, x, y, loss_fn, optim: OptimState, lr: float, rng) -> float:
    params = plan.parameters()
    for p in params:
        p.zero_grad()
    loss, _ = child_loss(plan, x, y, loss_fn, True, rng)
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    momentum_step(params, grads, optim, lr, keys=plan.param_keys)
    return loss.item()


# -- search ------------------------------------------------------------------------

def init_state(cfg: RunConfig, data: SplitDataset) -> SearchState:
    cin = data.image_shape[0]
    shared = A.SharedParams.create(cfg.L, cin, cfg.stem_channels, data.n_classes, seed=cfg.seed)
    ctrl = C.ControllerState.create(cfg.L, seed=cfg.seed + 1, hidden=cfg.hidden, temperature=cfg.temperature,
                                    baseline_decay=cfg.baseline_decay, entropy_weight=cfg.entropy_weight)
    return SearchState(shared, ctrl, OptimState(cfg.momentum, cfg.weight_decay))


class _Plans:
    """Compiled plans memoized by encoding; shapes only depend on the architecture."""

    def __init__(self, shared, input_shape, n_classes, cfg: RunConfig):
        self.shared, self.input_shape, self.n_classes, self.cfg = shared, input_shape, n_classes, cfg
        self.plans: dict[str, A.NetworkPlan] = {}

    def __call__(self, arch: A.ArchEncoding) -> A.NetworkPlan:
        key = str(arch)
        if key not in self.plans:
            self.plans[key] = A.compile(arch, self.shared, self.input_shape, self.n_classes,
                                        self.cfg.dropblock_size, self.cfg.keep_prob)
        return self.plans[key]


def child_phase(state: SearchState, cfg: RunConfig, data: SplitDataset, epoch: int, plans: _Plans) -> dict:
    loss_fn = losses.get_loss(cfg.loss, **cfg.loss_params())
    sched = schedule(cfg, cfg.search_epochs)
    aug = augment_config(cfg)
    order = batch_rng(cfg.seed, epoch, 0, _SHUFFLE).permutation(len(data.train_y))
    blist = batches(len(order), cfg.batch_size, order)
    total = 0.0
    for b, idx in enumerate(blist):
        x = data.train_x[idx]
        if cfg.augment:
            x = augment_batch(x, aug, batch_rng(cfg.seed, epoch, b, _AUGMENT))
        trace = C.sample(state.controller, batch_rng(cfg.seed, epoch, b, _SAMPLE))
        lr = warmup_then_cosine(sched, epoch + b / len(blist), cfg.search_epochs)
        total += train_step(plans(trace.arch), x, data.train_y[idx], loss_fn, state.optim, lr,
                            batch_rng(cfg.seed, epoch, b, _DROPBLOCK))
    return {"epoch": epoch, "phase": "child", "loss": total / max(len(blist), 1), "val_acc": "", "latency": "",
            "reward": "", "lr": warmup_then_cosine(sched, epoch, cfg.search_epochs), "clamp_count": ""}


Evaluator = Callable[[A.ArchEncoding, int], "tuple[float, float]"]


def controller_phase(state: SearchState, cfg: RunConfig, data: SplitDataset, epoch: int, plans: _Plans,
                     evaluator: Evaluator | None = None) -> dict:
    """S controller steps of Q samples each. ``evaluator(arch, minibatch) -> (accuracy, latency)``
    replaces the shared-weight evaluation (rigged environments in tests)."""
    vb = batches(len(data.val_y), cfg.val_batch)
    if not vb:
        raise ConfigError("ratios", "validation split is empty")
    model = latency_model(cfg)
    lr = piecewise_controller_lr(epoch, cfg.controller_lr, cfg.controller_lr_min, cfg.controller_lr_every)
    memo: dict = {}
    cache: dict = {}

    def evaluate(arch, k):
        key = (str(arch), k)
        if key not in memo:
            if evaluator is not None:
                memo[key] = evaluator(arch, k)
            else:
                plan = plans(arch)
                idx = vb[k]
                pred = predict(plan, data.val_x[idx], cfg.loss, cache=cache, cache_key=k,
                               batch_stats=cfg.search_eval_bn == "batch")
                memo[key] = (float((pred == data.val_y[idx]).mean()), measure_latency(arch, model, plan))
        return memo[key]

    accs, lats, rews, ctrl_losses, clamps = [], [], [], [], 0
    for s in range(cfg.S):
        k = (epoch * cfg.S + s) % len(vb)
        traces = C.sample_batch(state.controller, batch_rng(cfg.seed, epoch, s, _CONTROLLER), cfg.Q)
        recs = [compute_reward(*evaluate(t.arch, k), model) for t in traces]
        rewards = [r.reward for r in recs]
        if cfg.reward_mode == "averaged":
            rewards = [sum(rewards) / len(rewards)] * len(rewards)
        info = C.reinforce_update(state.controller, traces, rewards, lr)
        for q, (t, r) in enumerate(zip(traces, recs)):
            state.history.append({"epoch": epoch, "step": s, "index": q, "minibatch": k, "arch": str(t.arch),
                                  "accuracy": r.accuracy, "latency": r.latency, "reward": r.reward,
                                  "clamped": r.clamped, "log_prob": t.log_prob, "entropy": t.entropy})
        accs += [r.accuracy for r in recs]
        lats += [r.latency for r in recs]
        rews += [r.reward for r in recs]
        clamps += sum(r.clamped for r in recs)
        ctrl_losses.append(info["loss"])
    return {"epoch": epoch, "phase": "controller", "loss": float(np.mean(ctrl_losses)),
            "val_acc": float(np.mean(accs)), "latency": float(np.mean(lats)), "reward": float(np.mean(rews)),
            "lr": lr, "clamp_count": clamps}


def run_epoch(state: SearchState, cfg: RunConfig, data: SplitDataset, plans: _Plans,
              evaluator: Evaluator | None = None, train_child: bool = True) -> None:
    epoch = state.epoch
    ctrl0 = digest(state.controller.arrays())
    if train_child:
        state.metrics.append(child_phase(state, cfg, data, epoch, plans))
    ctrl1 = digest(state.controller.arrays())
    shared1 = digest(state.shared.state_arrays())
    state.metrics.append(controller_phase(state, cfg, data, epoch, plans, evaluator))
    shared2 = digest(state.shared.state_arrays())
    state.audit.append({"epoch": epoch, "controller_before": ctrl0, "controller_after": ctrl1,
                        "shared_before": shared1, "shared_after": shared2})
    if ctrl0 != ctrl1:
        raise PhaseViolation(f"epoch {epoch}: controller parameters changed during child training")
    if shared1 != shared2:
        raise PhaseViolation(f"epoch {epoch}: shared weights changed during controller training")
    state.epoch += 1


def search(cfg: RunConfig, data: SplitDataset, checkpoint: str | Path | None = None,
           resume: str | Path | None = None, evaluator: Evaluator | None = None, train_child: bool = True,
           stop_after: int | None = None, on_epoch: Callable | None = None) -> SearchResult:
    """Run the alternating loop to ``cfg.search_epochs`` (or ``stop_after`` epochs in this call)."""
    if len(data.val_y) < 2:
        raise ConfigError("ratios", "validation split needs at least two samples")
    state = load_state(resume) if resume else init_state(cfg, data)
    plans = _Plans(state.shared, data.image_shape, data.n_classes, cfg)
    done = 0
    while state.epoch < cfg.search_epochs and (stop_after is None or done < stop_after):
        run_epoch(state, cfg, data, plans, evaluator, train_child)
        done += 1
        if on_epoch is not None:
            on_epoch(state)
    if checkpoint is not None:
        save_state(state, cfg, checkpoint)
    return SearchResult(rank_architectures(state.history, cfg.rank_by), state,
                        Path(checkpoint) if checkpoint else None)


# -- checkpoints ---------------------------------------------------------------------

def save_state(state: SearchState, cfg: RunConfig, path) -> None:
    arrays = {f"shared/{k}": v for k, v in state.shared.state_arrays().items()}
    arrays.update(state.controller.arrays())
    arrays.update({f"optim/{k}": v for k, v in state.optim.velocity.items()})
    meta = {"epoch": state.epoch, "baseline": state.controller.baseline, "config": cfg.to_dict(),
            "history": state.history, "metrics": state.metrics, "audit": state.audit,
            "shared": {"L": state.shared.L, "in_channels": state.shared.in_channels,
                       "stem_channels": state.shared.stem_channels, "n_classes": state.shared.n_classes}}
    A.write_checkpoint(path, arrays, meta)


def state_config(path) -> dict:
    return A.read_checkpoint(path)[1]["config"]


def load_state(path) -> SearchState:
    arrays, meta = A.read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    sh = meta["shared"]
    state = SearchState(
        A.SharedParams.create(sh["L"], sh["in_channels"], sh["stem_channels"], sh["n_classes"], seed=cfg.seed),
        C.ControllerState.create(cfg.L, seed=cfg.seed + 1, hidden=cfg.hidden, temperature=cfg.temperature,
                                 baseline_decay=cfg.baseline_decay, entropy_weight=cfg.entropy_weight),
        OptimState(cfg.momentum, cfg.weight_decay),
        meta["epoch"], meta["history"], meta["metrics"], meta["audit"])
    state.shared.load_arrays({k[7:]: v for k, v in arrays.items() if k.startswith("shared/")})
    state.controller.load_arrays({k: v for k, v in arrays.items() if k.startswith("controller/")})
    state.controller.baseline = meta["baseline"]
    state.optim.velocity = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("optim/")}
    return state


# -- ranking -------------------------------------------------------------------------

def rank_architectures(history: list, rank_by: str = "best") -> list[RankedArch]:
    if not history:
        raise ValueError("cannot rank an empty sample history")
    seen: dict[str, list] = {}
    for h in history:
        seen.setdefault(h["arch"], []).append(h)
    rows = []
    for key, hs in seen.items():  # dicts keep first-seen order
        accs = [h["accuracy"] for h in hs]
        if rank_by == "mean":
            acc = sum(accs) / len(accs)
        else:
            acc = max(accs)
        rows.append((key, acc, hs[0]["latency"]))
    rows.sort(key=lambda r: -r[1])  # stable: ties keep first-seen order
    return [RankedArch(A.decode(k), acc, lat, i + 1) for i, (k, acc, lat) in enumerate(rows)]


# -- fixed retraining ----------------------------------------------------------------

def retrain_fixed(arch: A.ArchEncoding, cfg: RunConfig, data: SplitDataset, tag: int = 0,
                  on_epoch: Callable | None = None) -> RetrainResult:
    """Fresh init, train on train+val for ``retrain_epochs``, test accuracy after every epoch."""
    seed = int(np.random.SeedSequence([cfg.seed, 1000 + tag]).generate_state(1)[0])
    shared = A.SharedParams.create(cfg.L, data.image_shape[0], cfg.stem_channels, data.n_classes, seed=seed)
    plan = A.compile(arch, shared, data.image_shape, data.n_classes, cfg.dropblock_size, cfg.keep_prob)
    loss_fn = losses.get_loss(cfg.loss, **cfg.loss_params())
    optim = OptimState(cfg.momentum, cfg.weight_decay)
    sched = schedule(cfg, cfg.retrain_epochs)
    aug = augment_config(cfg)
    x_all, y_all = data.train_plus_val()
    curve = []
    for epoch in range(cfg.retrain_epochs):
        order = batch_rng(seed, epoch, 0, _SHUFFLE).permutation(len(y_all))
        blist = batches(len(order), cfg.batch_size, order)
        for b, idx in enumerate(blist):
            x = x_all[idx]
            if cfg.augment:
                x = augment_batch(x, aug, batch_rng(seed, epoch, b, _AUGMENT))
            lr = warmup_then_cosine(sched, epoch + b / len(blist), cfg.retrain_epochs)
            train_step(plan, x, y_all[idx], loss_fn, optim, lr, batch_rng(seed, epoch, b, _DROPBLOCK))
        curve.append(accuracy(plan, data.test_x, data.test_y, cfg.loss, cfg.val_batch))
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    lat = measure_latency(arch, latency_model(cfg), plan)
    return RetrainResult(arch, curve[-1], curve, plan.param_count(), lat)


def random_baseline_arch(cfg: RunConfig, tag: int = 0) -> A.ArchEncoding:
    return A.random_architecture(cfg.L, np.random.default_rng([cfg.seed, 2000 + tag]))


def paired_experiment(cfg: RunConfig, data: SplitDataset, log: Callable | None = None) -> dict:
    """Search, retrain the top-1 architecture, and retrain a random architecture under identical settings."""
    import time
    t0 = time.perf_counter()
    result = search(cfg, data, on_epoch=(lambda s: log(f"search epoch {s.epoch - 1} "
                                                       f"val_acc {s.metrics[-1]['val_acc']:.4f}")) if log else None)
    t1 = time.perf_counter()
    top = result.ranked[0]
    best = retrain_fixed(top.arch, cfg, data, tag=1)
    t2 = time.perf_counter()
    rand = retrain_fixed(random_baseline_arch(cfg), cfg, data, tag=1)
    t3 = time.perf_counter()
    return {"seed": cfg.seed, "top1": best.to_json(), "random": rand.to_json(),
            "top1_val_accuracy": top.val_accuracy, "search_seconds": t1 - t0,
            "retrain_seconds": t2 - t1, "baseline_seconds": t3 - t2}


# -- reports -------------------------------------------------------------------------

def model_size_rows(ranked: list[RankedArch], cfg: RunConfig, data: SplitDataset) -> list[dict]:
    shared = A.SharedParams.create(cfg.L, data.image_shape[0], cfg.stem_channels, data.n_classes)
    model = latency_model(cfg)
    model.mode = "analytic"
    rows = []
    for r in ranked:
        plan = A.compile(r.arch, shared, data.image_shape, data.n_classes)
        rows.append({"rank": r.rank, "arch": str(r.arch), "param_count": plan.param_count(),
                     "macs": plan.total_macs(), "latency": measure_latency(r.arch, model, plan)})
    return rows


def to_csv(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def to_jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
