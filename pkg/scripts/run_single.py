"""Train one configuration and print the per-epoch curve.

    python scripts/run_single.py --ratio 7:2:1 --samples 200 --epochs 20
"""
import argparse
import time

from splitwing import RunConfig, SplitRatio, synthetic_dataset, train
from splitwing.data import load_directory


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ratio", default="7:2:1")
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--data", help="flame/nonflame image directory instead of synthetic data")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trainable-clients", action="store_true")
    ap.add_argument("--transport", default="inprocess", choices=("inprocess", "socket"))
    ap.add_argument("--out", default=None, help="write metrics CSV here")
    args = ap.parse_args()

    ratio = SplitRatio.parse(args.ratio)
    data = load_directory(args.data) if args.data else synthetic_dataset(args.samples, 1)
    cfg = RunConfig(n_clients=len(ratio), ratio=ratio, epochs=args.epochs, seed=args.seed,
                    client_trainable=args.trainable_clients, transport=args.transport)
    t0 = time.perf_counter()

    def show(rec):
        print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.4f}/{rec.train_acc:.3f}  "
              f"test {rec.test_loss:.4f}/{rec.test_acc:.3f}  {rec.wall_ms:7.0f} ms", flush=True)

    result = train(cfg, data, on_epoch=show)
    print(f"done in {time.perf_counter() - t0:.1f}s")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(result.history.to_csv(wall_clock=True))


if __name__ == "__main__":
    main()
