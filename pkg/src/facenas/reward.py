"""Latency-aware arcsin reward and the latency model it consumes."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# per-op (a, b): cost = a * MACs + b. Units are abstract; a=1e-6 reads as mega-MACs.
DEFAULT_COSTS = {
    "conv": (1e-6, 0.002),
    "conv1x1": (1e-6, 0.001),
    "depthwise": (2e-6, 0.002),
    "pool": (0.5e-6, 0.001),
    "bn": (0.25e-6, 0.0005),
    "add": (0.1e-6, 0.0002),
    "relu": (0.1e-6, 0.0),
    "concat": (0.0, 0.0002),
    "dropblock": (0.0, 0.0),
    "fc": (1e-6, 0.001),
}


@dataclass
class LatencyModel:
    mode: str = "analytic"
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))
    target: float = 2.0
    q: float = -0.07
    probe_repeats: int = 5

    def __post_init__(self):
        if self.mode not in ("analytic", "wallclock"):
            raise ValueError(f"latency mode must be 'analytic' or 'wallclock', got {self.mode!r}")
        if self.target <= 0:
            raise ValueError("latency target must be positive")


@dataclass
class RewardRecord:
    accuracy: float
    latency: float
    reward: float
    clamped: bool


def load_cost_table(path: str | Path) -> dict:
    """Parse ``op_name a b`` lines; '#' starts a comment."""
    costs = dict(DEFAULT_COSTS)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'op_name a b', got {line!r}")
        costs[parts[0]] = (float(parts[1]), float(parts[2]))
    return costs


def write_cost_table(costs: dict, path: str | Path) -> None:
    Path(path).write_text("".join(f"{k} {a!r} {b!r}\n" for k, (a, b) in sorted(costs.items())))


def analytic_latency(layers, costs: dict) -> float:
    total = 0.0
    for layer in layers:
        a, b = costs[layer.op_name]
        total += a * layer.macs + b
    return total


def measure_latency(arch, model: LatencyModel, plan, probe=None) -> float:
    """Analytic: cost-table sum over the plan's layers. Wallclock: median of timed eval forwards."""
    if model.mode == "analytic":
        return analytic_latency(plan.layers, model.costs)
    from .arch import forward
    if probe is None:
        rng = np.random.default_rng(0)
        probe = rng.standard_normal((8,) + tuple(plan.input_shape))
    times = []
    for _ in range(model.probe_repeats):
        t0 = time.perf_counter()
        forward(plan, probe, training=False)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def compute_reward(accuracy: float, latency: float, model: LatencyModel) -> RewardRecord:
    if not 0 <= accuracy <= 1:
        raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
    if latency <= 0:
        raise ValueError(f"latency must be positive, got {latency}")
    z = accuracy * (latency / model.target) ** model.q
    clamped = z > 1.0
    return RewardRecord(accuracy, latency, math.asin(min(z, 1.0)), clamped)
