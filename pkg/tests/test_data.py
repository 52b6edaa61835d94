import json
from pathlib import Path

import numpy as np
import pytest

from facenas import data as D

FIXTURE = Path(__file__).parent / "fixtures" / "synthetic_calibration.json"


def test_split_counts_and_disjointness():
    d = D.synth_identity_dataset(10, 100, 8, seed=0)
    assert d.sizes() == (800, 100, 100)
    assert D.split_counts(1000, (8, 1, 1)) == (800, 100, 100)
    # rows are distinct random images, so equality of any pair would mean overlap
    rows = np.concatenate([d.train_x, d.val_x, d.test_x]).reshape(1000, -1)
    assert len(np.unique(rows, axis=0)) == 1000
    assert set(np.unique(d.train_y)) == set(range(10))


def test_requested_counts_respected():
    x, y = D.synth_images(7, 13, 12, seed=1)
    assert x.shape == (91, 3, 12, 12)
    assert np.array_equal(np.bincount(y), [13] * 7)


def test_normalization_fit_on_train_only():
    d = D.synth_identity_dataset(10, 50, 16, seed=2)
    assert np.allclose(d.train_x.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(d.train_x.std(axis=(0, 2, 3)), 1, atol=1e-6)
    # the test split is transformed with train statistics and is not exactly standardized
    assert not np.allclose(d.test_x.mean(axis=(0, 2, 3)), 0, atol=1e-9)


def test_same_seed_same_split():
    a = D.synth_identity_dataset(5, 20, 8, seed=3)
    b = D.synth_identity_dataset(5, 20, 8, seed=3)
    c = D.synth_identity_dataset(5, 20, 8, seed=4)
    assert a.train_x.tobytes() == b.train_x.tobytes() and np.array_equal(a.test_y, b.test_y)
    assert a.train_x.tobytes() != c.train_x.tobytes()


def test_flip_involution():
    img = np.random.default_rng(0).standard_normal((3, 5, 6))
    assert np.array_equal(D.flip(D.flip(img)), img)
    forced = D.AugmentConfig(flip_prob=1.0, crop=False, cutout=False)
    once = D.augment(img, forced, np.random.default_rng(1))
    assert np.array_equal(once, img[..., ::-1])
    assert np.array_equal(D.augment(once, forced, np.random.default_rng(2)), img)


def test_crop_offsets_cover_slack():
    # a unique marker at the top-left pixel reveals each crop offset
    img = np.zeros((1, 32, 32))
    img[0, 0, 0] = 1.0
    cfg = D.AugmentConfig(flip=False, cutout=False, pad_pixels=4, crop_size=32)
    rng = np.random.default_rng(0)
    offs = set()
    for _ in range(2000):
        out = D.augment(img, cfg, rng)
        assert out.shape == (1, 32, 32)
        r, c = np.argwhere(out[0] == 1.0)[0] if out.any() else (None, None)
        if r is not None:
            offs.add((4 - int(r), 4 - int(c)))
    assert offs <= {(i, j) for i in range(9) for j in range(9)}
    assert {i for i, _ in offs} == set(range(5))  # offsets 5..8 push the marker out of frame


def test_cutout_count_interior():
    cfg = D.AugmentConfig(flip=False, crop=False, cutout_size=4)
    img = np.ones((3, 16, 16))
    for seed in range(50):
        rng = np.random.default_rng(seed)
        out = D.augment(img, cfg, rng)
        zeros = (out == 0).sum(axis=(1, 2))
        rng = np.random.default_rng(seed)
        cy, cx = rng.integers(0, 16, size=(1, 2))[0]
        if 2 <= cy <= 14 and 2 <= cx <= 14:
            assert list(zeros) == [16, 16, 16]
        else:
            assert zeros[0] < 16
        assert (out[0] == 0).tolist() == (out[1] == 0).tolist() == (out[2] == 0).tolist()


def test_augment_shape_contract():
    batch = np.random.default_rng(0).standard_normal((5, 3, 32, 32))
    out = D.augment_batch(batch, D.AugmentConfig(), np.random.default_rng(0))
    assert out.shape == batch.shape
    with pytest.raises(ValueError):
        D.augment_batch(batch, D.AugmentConfig(crop_size=48), np.random.default_rng(0))


def test_batch_rng_streams():
    a = D.batch_rng(0, 1, 2, 0).random(3)
    assert np.array_equal(a, D.batch_rng(0, 1, 2, 0).random(3))
    assert not np.array_equal(a, D.batch_rng(0, 1, 2, 1).random(3))
    assert not np.array_equal(a, D.batch_rng(0, 1, 3, 0).random(3))


# -- shards -----------------------------------------------------------------------------

def test_shard_round_trip(tmp_path):
    x, y = D.synth_images(3, 4, 6, seed=0)
    D.write_shard(tmp_path / "a.shard", x[:6], y[:6], 3)
    D.write_shard(tmp_path / "b.shard", x[6:], y[6:], 3)
    xs, ys, n = D.read_source(tmp_path)
    assert n == 3
    assert np.array_equal(ys, y)
    assert np.array_equal(xs, x.astype(np.float32).astype(np.float64))
    d = D.load_dataset(tmp_path)
    assert sum(d.sizes()) == 12


def test_shard_errors_name_the_record(tmp_path):
    x, y = D.synth_images(2, 3, 4, seed=0)
    p = tmp_path / "x.shard"
    D.write_shard(p, x, y, 2)
    raw = bytearray(p.read_bytes())
    p.write_bytes(bytes(raw[:-10]))
    with pytest.raises(D.IngestionError, match="record 5"):
        D.read_shard(p)
    y_bad = y.copy()
    y_bad[4] = 9
    D.write_shard(p, x, y_bad, 2)
    with pytest.raises(D.IngestionError, match="record 4"):
        D.read_shard(p)
    x_bad = x.copy()
    x_bad[2, 0, 0, 0] = np.nan
    D.write_shard(p, x_bad, y, 2)
    with pytest.raises(D.IngestionError, match="record 2"):
        D.read_shard(p)


def test_ragged_and_missing_sources(tmp_path):
    x1, y1 = D.synth_images(2, 2, 4, seed=0)
    x2, y2 = D.synth_images(2, 2, 6, seed=0)
    D.write_shard(tmp_path / "a.shard", x1, y1, 2)
    D.write_shard(tmp_path / "b.shard", x2, y2, 2)
    with pytest.raises(D.IngestionError, match="b.shard"):
        D.read_source(tmp_path)
    with pytest.raises(D.IngestionError):
        D.read_source(tmp_path / "nope")


def test_sparse_labels_rejected(tmp_path):
    x, _ = D.synth_images(1, 4, 4, seed=0)
    D.write_shard(tmp_path / "a.shard", x, np.array([0, 0, 2, 2]), 3)
    with pytest.raises(D.IngestionError, match="missing"):
        D.load_dataset(tmp_path / "a.shard")


# -- calibration -----------------------------------------------------------------------

def test_calibration_fixture():
    cal = json.loads(FIXTURE.read_text())
    assert cal["noise"] == D.SYNTH_NOISE
    assert cal["linear_test_acc"] <= 0.70
    assert cal["cnn2_test_acc"] >= 0.90


def test_linear_baseline_reproduces_fixture():
    from sklearn.linear_model import LogisticRegression
    cal = json.loads(FIXTURE.read_text())
    d = D.synth_identity_dataset(10, 200, 32, seed=0)
    clf = LogisticRegression(max_iter=300)
    clf.fit(d.train_x.reshape(len(d.train_y), -1), d.train_y)
    acc = clf.score(d.test_x.reshape(len(d.test_y), -1), d.test_y)
    assert acc == pytest.approx(cal["linear_test_acc"], abs=0.02)
    assert acc <= 0.70
