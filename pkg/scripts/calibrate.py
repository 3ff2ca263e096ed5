"""Train MCCAN and CCADN on the acceptance setup over several seeds and tabulate.

    python3 scripts/calibrate.py --seeds 0 1 2 --steps 3000 --json calib.json
"""

import argparse
import json

from mccan.experiments import acceptance_config, run_variant


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--variants", nargs="+", default=["mccan", "ccadn"])
    p.add_argument("--json")
    args = p.parse_args()

    rows = []
    for seed in args.seeds:
        cfg = acceptance_config(seed=seed, steps=args.steps)
        for variant in args.variants:
            r = run_variant(cfg, variant)
            row = {"seed": seed, "variant": variant, "seconds": round(r.seconds, 1),
                   "mean_normalized_sd": r.mean_normalized_sd,
                   "area_mean": r.summary.area_mean, "area_sd": r.summary.area_sd,
                   "walk_monotone_fraction": r.walk_monotone_fraction,
                   "walk_sd": None if r.walk_sd is None else r.walk_sd.mean(axis=0).tolist()}
            rows.append(row)
            means = " ".join(f"{v:.3f}" for v in r.summary.area_mean.values())
            print(f"seed={seed} {variant:16s} sd={r.mean_normalized_sd:.3f} means=[{means}] "
                  f"walk={row['walk_monotone_fraction']} t={r.seconds:.0f}s", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
