"""Command-line entry point: ``facenas {search,retrain,export-plots,gradcheck,synth-data}``.

All outputs land under the output root (``$FACENAS_OUTPUT``, default ``./runs``).
Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import engine as E
from .arch import decode
from .config import ConfigError, RunConfig, _coerce, _resolve_key, config_from_dict, load_config
from .data import IngestionError, load_dataset, synth_images, write_shard

log = logging.getLogger("facenas")

OUTPUT_ENV = "FACENAS_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
BUILTIN_PREFIX = "builtin:"


class DataError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs")).resolve()


def inside_root(path: str | Path, root: Path | None = None) -> Path:
    """Resolve ``path`` against the output root and refuse anything that escapes it."""
    root = root or output_root()
    p = Path(path)
    p = (p if p.is_absolute() else root / p).resolve()
    if p != root and root not in p.parents:
        raise ConfigError("output", f"{p} lies outside the output root {root}")
    return p


def _config_path(arg: str | None):
    if arg and arg.startswith(BUILTIN_PREFIX):
        name = arg[len(BUILTIN_PREFIX):]
        ref = resources.files("facenas") / "configs" / f"{name}.ini"
        if not ref.is_file():
            raise ConfigError("config", f"no bundled config named {name!r}")
        return str(ref)
    return arg


def _load_data(cfg: RunConfig):
    try:
        return load_dataset(cfg.source, cfg.ratios, cfg.data_seed)
    except (IngestionError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_manifest(path: str) -> tuple[Path, dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    return p, json.loads(p.read_text())


def _write_manifest(path: Path, manifest: dict) -> None:
    _write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def top_k_table(rows: list[dict]) -> str:
    lines = [f"{'rank':>4}  {'val_acc':>8}  {'latency':>9}  {'params':>8}  arch"]
    for r in rows:
        lines.append(f"{r['rank']:>4}  {r['val_accuracy']:>8.4f}  {r['latency']:>9.4f}  {r['param_count']:>8}  {r['arch']}")
    return "\n".join(lines)


# -- commands ------------------------------------------------------------------------

def cmd_search(args) -> int:
    cfg = load_config(_config_path(args.config), args.override, args.seed)
    run_dir = inside_root(args.name or f"search-seed{cfg.seed}")
    data = _load_data(cfg)
    ckpt = run_dir / "checkpoint.nasf"
    resume = ckpt if args.resume and ckpt.is_file() else None
    run_dir.mkdir(parents=True, exist_ok=True)

    def progress(state):
        m = state.metrics[-1]
        log.info("epoch %d  val_acc %.4f  reward %.4f", m["epoch"], m["val_acc"], m["reward"])

    result = E.search(cfg, data, checkpoint=ckpt, resume=resume, on_epoch=progress)
    state = result.state
    ranked = result.ranked[: cfg.top_k]
    sizes = E.model_size_rows(result.ranked, cfg, data)
    files = {"metrics": "metrics.csv", "traces": "traces.jsonl", "audit": "audit.csv",
             "model_size": "model_size.csv", "checkpoint": "checkpoint.nasf", "config": "config.ini"}
    _write(run_dir / files["metrics"], E.to_csv(state.metrics, E.METRIC_FIELDS))
    _write(run_dir / files["traces"], E.to_jsonl(state.history))
    _write(run_dir / files["audit"], E.to_csv(state.audit, ("epoch", "controller_before", "controller_after",
                                                              "shared_before", "shared_after")))
    _write(run_dir / files["model_size"], E.to_csv(sizes, ("rank", "arch", "param_count", "macs", "latency")))
    _write(run_dir / files["config"], cfg.to_ini())
    size_by_arch = {r["arch"]: r for r in sizes}
    top = [{**r.to_json(), "param_count": size_by_arch[str(r.arch)]["param_count"]} for r in ranked]
    manifest = {"code_version": __version__, "seed": cfg.seed, "config": cfg.to_dict(), "data": cfg.source,
                "epochs_completed": state.epoch, "files": files, "ranked": top, "retrain": []}
    mpath = run_dir / "manifest.json"
    if mpath.is_file():  # keep earlier retrain results on a resumed run
        manifest["retrain"] = json.loads(mpath.read_text()).get("retrain", [])
    _write_manifest(mpath, manifest)
    print(top_k_table(top))
    print(f"manifest: {mpath}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    mpath, manifest = _read_manifest(args.manifest)
    inside_root(mpath.parent)
    cfg = config_from_dict(manifest["config"])
    if args.override:
        cfg = _apply_overrides(cfg, args.override)
    ranked = manifest["ranked"]
    if args.random_baseline:
        arch, label = E.random_baseline_arch(cfg, args.rank), f"random{args.rank}"
    else:
        if not 1 <= args.rank <= len(ranked):
            raise ConfigError("rank", f"rank {args.rank} out of range 1..{len(ranked)}")
        arch, label = decode(ranked[args.rank - 1]["arch"]), f"rank{args.rank}"
    data = _load_data(cfg)
    res = E.retrain_fixed(arch, cfg, data, tag=args.rank,
                          on_epoch=lambda e, a: log.info("retrain %s epoch %d  test_acc %.4f", label, e, a))
    curve_file = f"retrain_{label}.csv"
    _write(mpath.parent / curve_file, E.to_csv([{"epoch": i, "test_acc": a} for i, a in enumerate(res.curve)],
                                               ("epoch", "test_acc")))
    record = {**res.to_json(), "label": label, "curve_file": curve_file, "retrain_epochs": cfg.retrain_epochs}
    manifest["retrain"] = [r for r in manifest.get("retrain", []) if r.get("label") != label] + [record]
    _write_manifest(mpath, manifest)
    print(f"{label}  {res.arch}  test_acc {res.test_accuracy:.4f}  params {res.param_count}")
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    d = cfg.to_dict()
    for item in overrides:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(item, "override must look like key=value")
        name = _resolve_key(key.strip())
        d[name] = _coerce(name, raw)
    return config_from_dict(d)


def export_plots(run_dir: Path, manifest: dict) -> dict[str, Path]:
    metrics = [r for r in _read_csv(run_dir / manifest["files"]["metrics"])]
    traces = [json.loads(line) for line in (run_dir / manifest["files"]["traces"]).read_text().splitlines()]
    out = run_dir / "plots"

    steps: dict[tuple, list] = {}
    for t in traces:
        steps.setdefault((t["epoch"], t["step"]), []).append(t["reward"])
    reward_rows = [{"global_step": i, "epoch": e, "step": s, "mean_reward": float(np.mean(v))}
                   for i, ((e, s), v) in enumerate(sorted(steps.items()))]
    child = [m for m in metrics if m["phase"] == "child"]
    ctrl = [m for m in metrics if m["phase"] == "controller"]
    acc_rows = [{"epoch": int(m["epoch"]), "val_acc": float(m["val_acc"])} for m in ctrl]
    lr_rows = [{"epoch": int(m["epoch"]), "lr": float(m["lr"])} for m in child]
    lats = np.array([t["latency"] for t in traces])
    counts, edges = np.histogram(lats, bins=20) if lats.size else (np.zeros(0, int), np.zeros(1))
    hist_rows = [{"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "count": int(c)}
                 for i, c in enumerate(counts)]
    files = {
        "reward_vs_step": (reward_rows, ("global_step", "epoch", "step", "mean_reward")),
        "accuracy_vs_epoch": (acc_rows, ("epoch", "val_acc")),
        "lr_vs_epoch": (lr_rows, ("epoch", "lr")),
        "latency_histogram": (hist_rows, ("bin_lo", "bin_hi", "count")),
    }
    for r in manifest.get("retrain", []):
        files[f"retrain_{r['label']}_curve"] = ([{"epoch": i, "test_acc": a} for i, a in enumerate(r["curve"])],
                                                 ("epoch", "test_acc"))
    paths = {}
    for name, (rows, fields) in files.items():
        paths[name] = out / f"{name}.csv"
        _write(paths[name], E.to_csv(rows, fields))
    return paths


def _read_csv(path: Path) -> list[dict]:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_export_plots(args) -> int:
    mpath, manifest = _read_manifest(args.manifest)
    inside_root(mpath.parent)
    for name, p in export_plots(mpath.parent, manifest).items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite
    failed = []

    def report(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} max_rel_err {r.max_error:.3e}  tol {r.tol:.0e}",
              flush=True)
        if not r.passed:
            failed.append(r.name)

    _, secs = gradsuite.run_suite(args.seeds, report=report)
    print(f"{len(gradsuite.CASES) - len(failed)}/{len(gradsuite.CASES)} cases passed in {secs:.1f}s")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_synth_data(args) -> int:
    dest = inside_root(args.out)
    if min(args.classes, args.per_class, args.size) <= 0:
        raise ConfigError("synth-data", "classes, per-class and size must be positive")
    x, y = synth_images(args.classes, args.per_class, args.size, args.seed)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_shard(dest, x, y, args.classes)
    print(f"wrote {len(y)} records to {dest}")
    return EXIT_OK


# -- wiring --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facenas", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the alternating search and write a manifest")
    s.add_argument("--config", help=f"INI file, or {BUILTIN_PREFIX}smoke for the bundled smoke config")
    s.add_argument("--seed", type=int)
    s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--name", help="run directory under the output root")
    s.add_argument("--resume", action="store_true", help="continue from the run's checkpoint if present")
    s.set_defaults(fn=cmd_search)

    r = sub.add_parser("retrain", help="retrain a ranked architecture from scratch")
    r.add_argument("--manifest", required=True)
    r.add_argument("--rank", type=int, default=1)
    r.add_argument("--random-baseline", action="store_true", help="retrain a uniformly random architecture instead")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    r.set_defaults(fn=cmd_retrain)

    e = sub.add_parser("export-plots", help="write CSV data for reward, accuracy, lr and latency plots")
    e.add_argument("--manifest", required=True)
    e.set_defaults(fn=cmd_export_plots)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("synth-data", help="write a synthetic identity dataset shard")
    d.add_argument("--out", required=True, help="shard path under the output root")
    d.add_argument("--classes", type=int, default=10)
    d.add_argument("--per-class", type=int, default=200)
    d.add_argument("--size", type=int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_synth_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IngestionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
