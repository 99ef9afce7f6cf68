"""Recovery, model selection and AUC comparison over simulated replicates.

    python3 scripts/replicate_study.py --replicates 10 --out results/
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd

from tvjlcm.experiments import (
    ReplicateCache,
    auc_study,
    evaluable_seeds,
    recovery_study,
    selection_study,
)
from tvjlcm.mcmc import MCMCConfig
from tvjlcm.workflow import TIME_VARYING


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--replicates", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--burn-in", type=int, default=2000)
    ap.add_argument("--skip", nargs="*", default=[], choices=["recovery", "selection", "auc"])
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cache = ReplicateCache(config=MCMCConfig(iterations=args.iterations, burn_in=args.burn_in))
    seeds = list(range(args.replicates))
    tables = {}
    start = time.perf_counter()

    if "recovery" not in args.skip:
        rec = recovery_study(cache, seeds)
        tab = pd.DataFrame(
            {
                "truth": rec.truth[0],
                "bias": rec.bias,
                "mean_abs_error": np.abs(rec.mean - rec.truth).mean(axis=0),
                "covered": rec.coverage_counts,
            },
            index=rec.names,
        )
        tables["recovery"] = tab
        print(tab.round(4).to_string())

    if "selection" not in args.skip:
        outcomes = selection_study(cache, seeds)
        rows = []
        for o in outcomes:
            for r in o.rows:
                rows.append({"seed": o.seed, "model": f"{r.variant} K={r.K}", "dic": r.dic, "p_d": r.p_d, "error_rate": r.error_rate})
        tab = pd.DataFrame(rows)
        tables["selection"] = tab
        print(tab.pivot(index="seed", columns="model", values="dic").round(1).to_string())
        print(tab.pivot(index="seed", columns="model", values="error_rate").round(3).to_string())
        for key in ("dic", "error_rate"):
            wins = sum(o.winner(key) == (TIME_VARYING, 2) for o in outcomes)
            print(f"{key}: time-varying K=2 selected in {wins}/{len(outcomes)}")
        marginal = selection_study(cache, seeds, dic_variant="marginal")
        wins = sum(o.winner("dic") == (TIME_VARYING, 2) for o in marginal)
        print(f"marginal dic: time-varying K=2 selected in {wins}/{len(marginal)}")
        tab["marginal_dic"] = [r.dic for o in marginal for r in o.rows]

    if "auc" not in args.skip:
        auc_seeds = evaluable_seeds(cache, args.replicates, 0.5, 0.3)
        comps = auc_study(cache, auc_seeds)
        tab = pd.DataFrame([vars(c) for c in comps])
        landmark = auc_study(cache, auc_seeds, weighting="landmark")
        tab["time_varying_landmark"] = [c.time_varying for c in landmark]
        tab["basic_landmark"] = [c.basic for c in landmark]
        tables["auc"] = tab
        print(tab.round(4).to_string())
        print(f"time-varying >= basic in {(tab.time_varying >= tab.basic).sum()}/{len(tab)}")
        print(f"landmark weights: {(tab.time_varying_landmark >= tab.basic_landmark).sum()}/{len(tab)}")

    print(f"total {time.perf_counter() - start:.0f}s")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        for name, tab in tables.items():
            tab.to_csv(args.out / f"{name}.csv")


if __name__ == "__main__":
    main()
