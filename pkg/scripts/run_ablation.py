"""Compare affordance-conditioned and language-only grasp models on the unseen split.

    python scripts/run_ablation.py [--seeds 0 1 2] [--json out.json]
"""

import argparse
import json
import time

from afforddex.cli import AblationConfig, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--json", help="write the per-seed rows here")
    args = ap.parse_args()

    t0 = time.perf_counter()
    rows = run_ablation(AblationConfig(seeds=tuple(args.seeds)), progress=lambda r: print(f"seed {r['seed']} done, ratio {r['ratio']:.3f}", flush=True))
    print(f"{'seed':>4} {'CD affordance':>14} {'CD language':>12} {'ratio':>7}")
    for r in rows:
        print(f"{r['seed']:>4} {r['cd_affordance']:>14.5f} {r['cd_language']:>12.5f} {r['ratio']:>7.3f}")
    wins = sum(r["ratio"] <= 0.9 for r in rows)
    print(f"{wins}/{len(rows)} seeds with at least 10% lower CD, {time.perf_counter() - t0:.0f}s")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
