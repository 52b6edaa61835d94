import csv
import json
import os
import time
from pathlib import Path

import pytest

from facenas import cli


def _ini(path: Path, body: str) -> str:
    path.write_text(body)
    return str(path)


TINY = """
[data]
source = synthetic:4,16,8
pad_pixels = 1
crop_size = 8
cutout_size = 2

[search]
L = 2
Q = 2
S = 2
search_epochs = 2
batch_size = 16
top_k = 2

[child]
stem_channels = 4
warmup_epochs = 1

[retrain]
retrain_epochs = 2
"""


@pytest.fixture
def root(tmp_path, monkeypatch):
    out = tmp_path / "out"
    out.mkdir()
    monkeypatch.setenv(cli.OUTPUT_ENV, str(out))
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_missing_field_exits_2_and_names_it(root, tmp_path, capsys):
    cfg = _ini(tmp_path / "bad.ini", TINY.replace("source = synthetic:4,16,8", ""))
    assert cli.main(["search", "--config", cfg]) == cli.EXIT_CONFIG
    assert "data.source" in capsys.readouterr().err
    assert cli.main(["search", "--config", "builtin:nope"]) == cli.EXIT_CONFIG
    assert cli.main(["search", "--config", cfg, "--override", "nonsense"]) == cli.EXIT_CONFIG


def test_seed_flag_changes_only_the_seed(root, tmp_path):
    cfg = _ini(tmp_path / "t.ini", TINY)
    assert cli.main(["search", "--config", cfg, "--name", "a"]) == 0
    assert cli.main(["search", "--config", cfg, "--name", "b", "--seed", "7"]) == 0
    a = json.loads((root / "a" / "manifest.json").read_text())["config"]
    b = json.loads((root / "b" / "manifest.json").read_text())["config"]
    assert b["seed"] == 7
    assert {k for k in a if a[k] != b[k]} == {"seed"}


def test_search_retrain_export_cycle(root, tmp_path, capsys):
    cfg = _ini(tmp_path / "t.ini", TINY)
    assert cli.main(["search", "--config", cfg, "--name", "run"]) == 0
    run = root / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert "rank" in capsys.readouterr().out
    for f in manifest["files"].values():
        assert (run / f).is_file()
    n = len(manifest["ranked"])
    assert cli.main(["retrain", "--manifest", str(run), "--rank", str(n + 1)]) == cli.EXIT_CONFIG
    assert cli.main(["retrain", "--manifest", str(run / "missing.json")]) == cli.EXIT_DATA
    assert cli.main(["retrain", "--manifest", str(run), "--rank", "1"]) == 0
    first = (run / "retrain_rank1.csv").read_text()
    assert cli.main(["retrain", "--manifest", str(run), "--rank", "1"]) == 0
    assert (run / "retrain_rank1.csv").read_text() == first
    assert len(json.loads((run / "manifest.json").read_text())["retrain"]) == 1

    assert cli.main(["export-plots", "--manifest", str(run)]) == 0
    snap = {p.name: p.read_bytes() for p in (run / "plots").iterdir()}
    assert cli.main(["export-plots", "--manifest", str(run)]) == 0
    assert snap == {p.name: p.read_bytes() for p in (run / "plots").iterdir()}
    traces = (run / "traces.jsonl").read_text().splitlines()
    hist = _rows(run / "plots" / "latency_histogram.csv")
    assert sum(int(r["count"]) for r in hist) == len(traces)
    assert len(_rows(run / "plots" / "accuracy_vs_epoch.csv")) == 2
    assert len(_rows(run / "plots" / "retrain_rank1_curve.csv")) == 2


def test_lr_export_tracks_warmup(root, tmp_path):
    body = TINY.replace("L = 2", "L = 1").replace("Q = 2", "Q = 1").replace("S = 2", "S = 1")
    body = body.replace("search_epochs = 2", "search_epochs = 21").replace("warmup_epochs = 1", "warmup_epochs = 20")
    body = body.replace("synthetic:4,16,8", "synthetic:2,8,8")
    cfg = _ini(tmp_path / "lr.ini", body)
    assert cli.main(["search", "--config", cfg, "--name", "lr"]) == 0
    assert cli.main(["export-plots", "--manifest", str(root / "lr")]) == 0
    rows = _rows(root / "lr" / "plots" / "lr_vs_epoch.csv")
    assert len(rows) == 21
    assert float(rows[0]["lr"]) == 0.0
    assert float(rows[20]["lr"]) == pytest.approx(0.1, abs=1e-12)


def test_outputs_stay_under_root(root, tmp_path):
    assert cli.main(["synth-data", "--out", "../escape.shard", "--classes", "2", "--per-class", "2",
                     "--size", "4"]) == cli.EXIT_CONFIG
    assert not (tmp_path / "escape.shard").exists()
    assert cli.main(["synth-data", "--out", "d/x.shard", "--classes", "2", "--per-class", "3", "--size", "4"]) == 0
    assert (root / "d" / "x.shard").is_file()
    assert cli.main(["search", "--config", _ini(tmp_path / "t.ini", TINY), "--name", "/etc/x"]) == cli.EXIT_CONFIG


def test_bundled_smoke_run(root, tmp_path, monkeypatch):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    t0 = time.perf_counter()
    assert cli.main(["search", "--config", "builtin:smoke", "--name", "smoke"]) == 0
    assert cli.main(["retrain", "--manifest", str(root / "smoke"), "--rank", "1"]) == 0
    curve = (root / "smoke" / "retrain_rank1.csv").read_bytes()
    assert cli.main(["retrain", "--manifest", str(root / "smoke"), "--rank", "1"]) == 0
    assert (root / "smoke" / "retrain_rank1.csv").read_bytes() == curve
    assert time.perf_counter() - t0 < 300
    assert os.listdir(cwd) == []
    audit = _rows(root / "smoke" / "audit.csv")
    assert all(r["controller_before"] == r["controller_after"] and r["shared_before"] == r["shared_after"]
               for r in audit)
