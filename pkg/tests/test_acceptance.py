"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The desk experiment runs three full searches and is the slow part (tens of
minutes on one core). Set FACENAS_DESK_RESULTS to a JSON file written by
scripts/desk_search.py to score an existing run instead of repeating it.
"""
import json
import math
import os
import time

import numpy as np
import pytest

from facenas import arch as A
from facenas import cli
from facenas import engine as E
from facenas import gradsuite
from facenas import nn
from facenas import reward as R
from facenas import schedules as S
from facenas import tensor as T
from facenas.config import load_config
from facenas.data import load_dataset

from _helpers import bandit_run
from test_nn import naive_bn_train, naive_depthwise, naive_pointwise, naive_pool


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}  {detail}", flush=True)
        assert ok, f"{name}: {detail}"
    return emit


def test_gradient_suite(report):
    results, secs = gradsuite.run_suite(20)
    bad = [f"{r.name}={r.max_error:.1e}" for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_error / r.tol)
    report("gradient suite", not bad and secs < 120,
           f"{len(results)} cases x 20 seeds in {secs:.1f}s, worst {worst.name} {worst.max_error:.1e}"
           + (f", failing {bad}" if bad else ""))


def test_kernel_oracles(report):
    rng = np.random.default_rng(0)
    errs = {}
    for k, stride in ((1, 1), (3, 1), (5, 1), (3, 2), (5, 2)):
        x = rng.standard_normal((2, 3, 8, 8))
        p = nn.ConvParams(T.Tensor(rng.standard_normal((3, k, k))), T.Tensor(rng.standard_normal((4, 3, 1, 1))),
                          stride)
        want = naive_pointwise(naive_depthwise(x, p.depthwise_kernel.data, stride, p.pad), p.pointwise_kernel.data)
        errs[f"sep{k}s{stride}"] = np.max(np.abs(nn.separable_conv(x, p).data - want))
    for kind in ("max", "avg"):
        for k, stride, pad in ((3, 1, 1), (2, 2, 0), (3, 2, 1)):
            x = rng.standard_normal((2, 3, 8, 8))
            got = nn.pool(x, kind, k, stride, pad).data
            errs[f"{kind}{k}s{stride}"] = np.max(np.abs(got - naive_pool(x, kind, k, stride, pad)))
    x = rng.standard_normal((4, 3, 8, 8)) * 2 + 1
    s = nn.BatchNormState.create(3)
    s.gamma.data[:], s.beta.data[:] = rng.standard_normal(3), rng.standard_normal(3)
    out = nn.batch_norm(x, s, training=True).data
    errs["batch_norm"] = np.max(np.abs(out - naive_bn_train(x, s.gamma.data, s.beta.data, s.epsilon)))
    worst = max(errs, key=errs.get)
    report("kernel oracles", errs[worst] <= 1e-10, f"{len(errs)} kernels, worst {worst} {errs[worst]:.1e}")


def test_schedule_exactness(report):
    cfg = S.ScheduleConfig(1e-4, 0.1, 80, 0)
    e0 = abs(S.cosine_mod_lr(cfg, 0) - 0.1)
    e1 = abs(S.cosine_mod_lr(cfg, 80) - 1e-4)
    mid = abs(S.cosine_mod_lr(cfg, 40) - (1e-4 + 0.4142135623730951 * (0.1 - 1e-4)))
    warm = S.ScheduleConfig(1e-4, 0.1, 80, 20)
    cont = S.warmup_then_cosine(warm, 20, 100) == 0.1 and S.warmup_then_cosine(warm, 0, 100) == 0.0
    ok = e0 <= 1e-12 and e1 <= 1e-12 and mid <= 1e-9 and cont
    report("schedule exactness", ok, f"endpoints {e0:.1e}/{e1:.1e}, midpoint {mid:.1e}, warmup handoff exact={cont}")


def test_reward_exactness(report):
    m = R.LatencyModel(target=2.0, q=-0.07)
    errs = [abs(R.compute_reward(1.0, 2.0, m).reward - math.pi / 2),
            abs(R.compute_reward(0.5, 2.0, m).reward - math.pi / 6),
            abs(R.compute_reward(0.0, 3.0, m).reward)]
    rng = np.random.default_rng(1)
    mono = True
    for _ in range(1000):
        mq = R.LatencyModel(target=rng.uniform(0.5, 5), q=rng.uniform(-0.2, 0.0))
        a1, a2 = np.sort(rng.uniform(0, 1, 2))
        l1, l2 = np.sort(rng.uniform(0.1, 10, 2))
        mono &= R.compute_reward(a1, l1, mq).reward <= R.compute_reward(a2, l1, mq).reward
        mono &= R.compute_reward(a1, l2, mq).reward <= R.compute_reward(a1, l1, mq).reward
    steep = R.LatencyModel(target=2.0, q=-0.2)
    clamp = (R.compute_reward(1.0, 0.5, steep).clamped and not R.compute_reward(0.7, 0.5, steep).clamped
             and not R.compute_reward(1.0, 2.0, steep).clamped)
    ok = max(errs) <= 1e-12 and mono and clamp
    report("reward exactness", ok, f"max point error {max(errs):.1e}, 1000-triple monotone={mono}, clamp={clamp}")


def test_controller_bandit(report):
    t0 = time.perf_counter()
    hits = [bandit_run(seed)[0] for seed in range(10)]
    secs = time.perf_counter() - t0
    n = sum(h is not None for h in hits)
    report("controller bandit", n >= 9 and secs < 60, f"{n}/10 seeds, updates {hits}, {secs:.1f}s")


def test_exhaustive_l3(report):
    shared = A.SharedParams.create(3, 3, 4, 5, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    cache: dict = {}
    archs = list(A.all_architectures(3))
    good = 0
    with T.no_grad():
        for a in archs:
            out = A.forward(A.compile(a, shared, (3, 8, 8), 5), x, False, cache=cache, cache_key=0)
            good += A.decode(A.encode(a)) == a and out.shape == (2, 5) and bool(np.isfinite(out.data).all())
    report("exhaustive L=3", len(archs) == 512 and good == 512, f"{good}/{len(archs)} compile, run and round-trip")


def _desk_results():
    path = os.environ.get("FACENAS_DESK_RESULTS")
    if path:
        blob = json.load(open(path))
        return blob["results"], blob["total_seconds"]
    t0 = time.perf_counter()
    results = []
    for seed in (0, 1, 2):
        cfg = load_config(cli._config_path("builtin:desk"), seed=seed)
        results.append(E.paired_experiment(cfg, load_dataset(cfg.source, cfg.ratios, cfg.data_seed)))
    return results, time.perf_counter() - t0


def test_desk_search(report):
    results, secs = _desk_results()
    top = [r["top1"]["test_accuracy"] for r in results]
    rnd = [r["random"]["test_accuracy"] for r in results]
    margin = float(np.mean(top) - np.mean(rnd))
    ok = margin >= 0.02 and min(top) >= 0.90 and secs <= 3600
    report("desk search", ok, f"top1 {top} vs random {rnd}, mean margin {100 * margin:+.1f} pts, {secs / 60:.1f} min")


def test_determinism(report, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
    for name in ("a", "b"):
        assert cli.main(["search", "--config", "builtin:smoke", "--name", name,
                         "--override", "reward.latency_mode=analytic"]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.csv", "manifest.json", "traces.jsonl")}
    report("determinism", all(same.values()), f"byte-identical {same}")


def test_phase_audit(report):
    cfg = load_config(cli._config_path("builtin:smoke"))
    res = E.search(cfg, load_dataset(cfg.source, cfg.ratios, cfg.data_seed))
    rows = res.state.audit
    ok = len(rows) == cfg.search_epochs and all(
        r["controller_before"] == r["controller_after"] and r["shared_before"] == r["shared_after"] for r in rows)
    report("phase audit", ok, f"{len(rows)} epochs audited")


def test_model_size_report(report):
    cfg = load_config(cli._config_path("builtin:smoke"))
    data = load_dataset(cfg.source, cfg.ratios, cfg.data_seed)
    res = E.search(cfg, data)
    rows = E.model_size_rows(res.ranked, cfg, data)
    emitted = len(rows) == len(res.ranked) and all(r["param_count"] > 0 and r["latency"] > 0 for r in rows)
    checked, mono = 0, True
    for r in res.ranked:
        for i, op in enumerate(r.arch.ops):
            if op != 0:
                continue
            swapped = A.ArchEncoding(r.arch.ops[:i] + (1,) + r.arch.ops[i + 1:], r.arch.skips)
            a, b = E.model_size_rows([r, E.RankedArch(swapped, 0.0, 0.0, 0)], cfg, data)
            mono &= b["param_count"] > a["param_count"] and b["latency"] > a["latency"] and b["macs"] > a["macs"]
            checked += 1
    report("model-size report", emitted and mono and checked > 0,
           f"{len(rows)} ranked rows, {checked} 3x3->5x5 swaps monotone={mono}")
