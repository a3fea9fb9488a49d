"""PPO-Exploration at several bonus factors c against one trained critic.

Reuses data and critic from a finished run directory and writes each policy
under <run>/sweep/c=<value>/.

    python scripts/bonus_sweep.py runs/experiment/seed0 --c 0 0.03 0.1 0.3 1
"""
import argparse
import shutil
from dataclasses import replace
from pathlib import Path

from gcrlab import experiments as ex
from gcrlab.config import load_config
from gcrlab.evaluation import table

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", type=Path)
    ap.add_argument("--config", type=Path, default=HERE / "experiment.yaml")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--c", type=float, nargs="+", default=[0.0, 0.03, 0.1, 0.3, 1.0])
    args = ap.parse_args()
    ex.deterministic()
    base = load_config(args.config)
    rows = []
    for c in args.c:
        out = args.run / "sweep" / f"c={c:g}"
        cfg = replace(base, seed=args.seed, output_dir=str(out), trainer=replace(base.trainer, c=c))
        for sub in ("data", "critic"):
            if not (out / sub).exists():
                shutil.copytree(args.run / sub, out / sub)
        if not ex.policy_path(cfg, "ppo-exploration").exists():
            ex.train_policies(cfg, ["ppo-exploration"], log=lambda line: None)
        critic = ex.load_critic(cfg)
        sets = ex.load_candidates(cfg, "policy_eval")[:cfg.eval.entropy_contexts]
        pe = ex.eval_policy(cfg, ex.load_policy(cfg, "ppo-exploration"), critic, sets, "ppo-exploration")
        rows.append({"c": c, "replacement_ratio": pe.replacement_ratio, "oracle_value": pe.oracle_value,
                     "brand_entropy": pe.brand_entropy, "price_entropy": pe.price_entropy})
        print(f"c={c:g} done", flush=True)
    print(table(rows, ["c", "replacement_ratio", "oracle_value", "brand_entropy", "price_entropy"]))


if __name__ == "__main__":
    main()
