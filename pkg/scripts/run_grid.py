"""The nine-cell client-count x split-ratio grid on synthetic data.

Writes one row per run, a mean/sd row per cell (with the reference accuracy
as a reference column) and the per-client-count spread.

    python scripts/run_grid.py --samples 400 --epochs 10 --repeats 3 --out grid.csv
"""
import argparse
import time

from splitwing import GridSpec, RunConfig, run_grid, synthetic_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trainable-clients", action="store_true")
    ap.add_argument("--out", default="grid.csv")
    args = ap.parse_args()

    t0 = time.perf_counter()

    def progress(run):
        final = run.result.history.final
        print(f"[{time.perf_counter() - t0:6.0f}s] n={run.n_clients} {str(run.ratio):<10} "
              f"seed={run.seed} test_acc={100 * final.test_acc:.2f}", flush=True)

    result = run_grid(GridSpec(repeats=args.repeats, base_seed=args.seed),
                      synthetic_dataset(args.samples, 1),
                      RunConfig(epochs=args.epochs, client_trainable=args.trainable_clients),
                      on_run=progress)
    with open(args.out, "w") as fh:
        fh.write(result.to_csv())
    for (n, ratio), (mean, sd) in result.cell_means().items():
        print(f"n={n} {ratio:<10} {mean:6.2f} +- {sd:.2f}")
    for n, spread in result.spreads().items():
        print(f"n={n} spread {spread:.2f} pp")


if __name__ == "__main__":
    main()
