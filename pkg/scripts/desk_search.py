"""Paired desk-scale experiment: search + top-1 retrain vs a random architecture, per seed."""
import argparse
import json
import sys
import time

from facenas import engine as E
from facenas.cli import _config_path
from facenas.config import load_config
from facenas.data import load_dataset

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
ap.add_argument("--override", action="append", default=[])
ap.add_argument("--out", default="desk_results.json")
args = ap.parse_args()

results = []
t0 = time.perf_counter()
for seed in args.seeds:
    cfg = load_config(_config_path("builtin:desk"), args.override, seed)
    data = load_dataset(cfg.source, cfg.ratios, cfg.data_seed)
    res = E.paired_experiment(cfg, data, log=lambda m: print(m, flush=True))
    print(json.dumps({k: v for k, v in res.items()}), flush=True)
    results.append(res)
json.dump({"results": results, "total_seconds": time.perf_counter() - t0}, open(args.out, "w"), indent=1)
print(f"total {time.perf_counter() - t0:.0f}s", file=sys.stderr)
