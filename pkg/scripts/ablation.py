"""Models A, B and C trained on the same data and seeds, per seed.

    python scripts/ablation.py --seeds 1 2 3 --out runs/ablation.csv
"""

import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from regionreg.evalbench import EvalReport
from regionreg.experiments import SEEDS, desk_config, run_desk, run_ablation, scaled


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    rows = []
    for seed in args.seeds:
        with threadpool_limits(limits=1):
            run = run_desk(scaled(desk_config(seed), args.epochs))
            report = run_ablation(run)
        rows += report.rows
        rmse = {m: report.row(m).rmse_r for m in ("ModelA", "ModelB", "ModelC")}
        print(f"seed {seed}: " + ", ".join(f"{m} RMSE(R) {v:.3f}" for m, v in rmse.items()))
    full = EvalReport(rows)
    print(full.to_table())
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(full.to_csv())


if __name__ == "__main__":
    main()
