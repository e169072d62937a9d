"""Desk-scale training on synthetic primitives, one run per seed.

    python scripts/train_desk.py --seeds 1 2 3 --out runs/desk

Writes a checkpoint, loss trace and held-out report per seed, and prints a
summary against the untrained (identity) network.
"""

import argparse
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from regionreg.evalbench import EvalReport
from regionreg.experiments import SEEDS, desk_config, run_desk, scaled
from regionreg.pipeline import save_checkpoint, write_trace_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=None, help="override the 300-epoch default")
    ap.add_argument("--n-train", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    def progress(row):
        if row["epoch"] % 25 == 24:
            logging.info("  epoch %d loss %.5f chamfer %.5f", row["epoch"], row["loss"], row["chamfer"])

    for seed in args.seeds:
        cfg = scaled(desk_config(seed), args.epochs, args.n_train)
        logging.info("seed %d", seed)
        with threadpool_limits(limits=1):
            run = run_desk(cfg, progress=progress)
        out = args.out / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", run.params)
        write_trace_csv(out / "trace.csv", run.trace)
        (out / "config.json").write_text(cfg.to_json())
        (out / "eval.csv").write_text(EvalReport(run.untrained.rows + run.trained.rows).to_csv())
        c, b = run.clean, run.baseline
        print(f"seed {seed}: geodesic {c.geodesic_deg:.2f} deg, MAE(t) {c.mae_t:.4f} "
              f"(untrained {b.geodesic_deg:.2f} deg, {b.mae_t:.4f}), {run.seconds:.0f}s")


if __name__ == "__main__":
    main()
