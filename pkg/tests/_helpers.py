"""Shared oracles and tiny fixtures for the test modules."""
import numpy as np

from facenas import controller as C
from facenas.arch import ArchEncoding
from facenas.config import RunConfig

BANDIT_GOOD = ArchEncoding((3,), ((),))


def bandit_run(seed: int, updates: int = 500, Q: int = 8, lr: float = 0.1):
    """L=1 controller where BANDIT_GOOD pays 1 and every other arch pays 0.

    Returns (update index at which P(good) first exceeded 0.9 or None, final state).
    """
    state = C.ControllerState.create(1, seed=seed)
    rng = np.random.default_rng(seed)
    hit = None
    for step in range(updates):
        traces = C.sample_batch(state, rng, Q)
        rewards = [1.0 if t.arch == BANDIT_GOOD else 0.0 for t in traces]
        C.reinforce_update(state, traces, rewards, lr)
        if C.op_probability(state, BANDIT_GOOD) > 0.9:
            hit = step + 1
            break
    return hit, state


def toy_dataset(n_per_class=24, size=8, seed=0, classes=2):
    """Linearly separable images: class k brightens horizontal band k."""
    from facenas.data import split_and_normalize
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    x = rng.standard_normal((len(y), 3, size, size)) * 0.3
    band = size // classes
    for k in range(classes):
        x[y == k, :, k * band:(k + 1) * band, :] += 1.5
    return split_and_normalize(x, y, classes, (8, 1, 1), seed)


def tiny_config(**kw) -> RunConfig:
    base = dict(source="synthetic:4,16,8", L=3, Q=4, S=2, search_epochs=2, batch_size=16, stem_channels=4,
                warmup_epochs=1, retrain_epochs=2, top_k=2, crop_size=8, pad_pixels=1, cutout_size=2)
    base.update(kw)
    return RunConfig(**base)
