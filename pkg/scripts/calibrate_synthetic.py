"""Calibrate the synthetic identity set: linear vs. 2-layer CNN test accuracy.

Writes tests/fixtures/synthetic_calibration.json. Run from the repo root:

    python scripts/calibrate_synthetic.py
"""
import json
import sys
import time
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from facenas import nn
from facenas import tensor as T
from facenas.data import SYNTH_NOISE, synth_identity_dataset
from facenas.losses import logits_cross_entropy
from facenas.schedules import OptimState, momentum_step


def two_layer_cnn(d, epochs=12, batch=64, lr=0.05, seed=0):
    rng = np.random.default_rng(seed)
    C = d.image_shape[0]
    w1 = T.parameter(rng.standard_normal((16, C, 3, 3)) * np.sqrt(2 / (C * 9)))
    w2 = T.parameter(rng.standard_normal((32, 16, 3, 3)) * np.sqrt(2 / (16 * 9)))
    bn1, bn2 = nn.BatchNormState.create(16), nn.BatchNormState.create(32)
    fw = T.parameter(rng.standard_normal((32, d.n_classes)) * np.sqrt(1 / 32))
    fb = T.parameter(np.zeros(d.n_classes))
    params = [w1, w2, bn1.gamma, bn1.beta, bn2.gamma, bn2.beta, fw, fb]

    def net(x, training):
        h = T.relu(nn.batch_norm(nn.conv2d(x, w1, 1, 1), bn1, training))
        h = nn.pool(h, "max", 2, 2)
        h = T.relu(nn.batch_norm(nn.conv2d(h, w2, 1, 1), bn2, training))
        return nn.linear(nn.global_avg_pool(h), fw, fb)

    opt = OptimState(0.9, 1e-4)
    n = len(d.train_y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        step_lr = lr * 0.5 * (1 + np.cos(np.pi * epoch / epochs))
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            if len(idx) < 2:
                continue
            for p in params:
                p.zero_grad()
            loss = logits_cross_entropy(net(d.train_x[idx], True), d.train_y[idx])
            loss.backward()
            momentum_step(params, [p.grad for p in params], opt, step_lr)
    with T.no_grad():
        pred = net(d.test_x, False).data.argmax(axis=1)
    return float((pred == d.test_y).mean())


def main(out=Path("tests/fixtures/synthetic_calibration.json")):
    d = synth_identity_dataset(10, 200, 32, seed=0)
    clf = LogisticRegression(max_iter=300)
    clf.fit(d.train_x.reshape(len(d.train_y), -1), d.train_y)
    lin = float(clf.score(d.test_x.reshape(len(d.test_y), -1), d.test_y))
    t0 = time.time()
    cnn = two_layer_cnn(d)
    result = {"dataset": "synthetic 10 classes x 200, 32x32, seed 0", "noise": SYNTH_NOISE, "linear_test_acc": lin,
              "cnn2_test_acc": cnn, "cnn2_seconds": round(time.time() - t0, 1)}
    out.write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main(*(Path(a) for a in sys.argv[1:]))
