"""Full pipeline for several seeds, then the tables averaged across them.

    python scripts/run_seeds.py --out runs/experiment --seeds 0 1 2
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from gcrlab import experiments as ex
from gcrlab.config import load_config, merge, parse_override
from gcrlab.evaluation import table

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "experiment.yaml")
    ap.add_argument("--out", type=Path, default=Path("runs/experiment"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    overrides = {}
    for item in args.set:
        overrides = merge(overrides, parse_override(item))
    reports, times = [], []
    for seed in args.seeds:
        cfg = replace(load_config(args.config, overrides), seed=seed, output_dir=str(args.out / f"seed{seed}"))
        done = cfg.out / "eval" / "times.json"
        if not done.exists():
            print(f"seed {seed}: running pipeline in {cfg.out}", flush=True)
            ex.run_all(cfg, log=lambda line: None)
        reports.append(json.loads((cfg.out / "eval" / "report.json").read_text()))
        times.append(json.loads(done.read_text()))

    def averaged(section, key, fields):
        names = [r[key] for r in reports[0][section]]
        rows = []
        for name in names:
            per = [next(r for r in rep[section] if r[key] == name) for rep in reports]
            rows.append({key: name, **{f: float(np.mean([p[f] for p in per])) for f in fields}})
        return rows

    print(f"\nmeans over seeds {args.seeds}\n")
    print(table(averaged("critics", "model", ["pv_pay", "click_pay", "slate_pay"]),
                ["model", "pv_pay", "click_pay", "slate_pay"]))
    print(table(averaged("replacement", "algorithm", ["replacement_ratio", "oracle_value", "brand_entropy"]),
                ["algorithm", "replacement_ratio", "oracle_value", "brand_entropy"]))
    print(table(averaged("ips", "algorithm", ["ips", "wips"]), ["algorithm", "ips", "wips"]))
    print(table(averaged("entropy", "slates", ["brand_entropy", "price_entropy"]),
                ["slates", "brand_entropy", "price_entropy"]))
    stages = sorted(times[0])
    print(table([{"stage": s, "minutes": float(np.sum([t[s] for t in times])) / 60} for s in stages],
                ["stage", "minutes"]))


if __name__ == "__main__":
    main()
