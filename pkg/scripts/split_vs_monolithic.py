"""Train the split pipeline and the centralised chain side by side and report the gap.

    python scripts/split_vs_monolithic.py --precision f64 --trainable-clients
"""
import argparse

import numpy as np

from splitwing import RunConfig, synthetic_dataset, train, train_monolithic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ratio", default="7:2:1")
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--precision", default="f64", choices=("f32", "f64"))
    ap.add_argument("--trainable-clients", action="store_true")
    args = ap.parse_args()

    n = len(args.ratio.split(":"))
    cfg = RunConfig(n_clients=n, ratio=args.ratio, epochs=args.epochs, precision=args.precision,
                    client_trainable=args.trainable_clients)
    data = synthetic_dataset(args.samples, 1)
    split, mono = train(cfg, data), train_monolithic(cfg, data)
    gap = 0.0
    for a, b in zip(split.server.params(), mono.model.server.params()):
        gap = max(gap, float(np.abs(a.kernels - b.kernels).max()), float(np.abs(a.bias - b.bias).max()))
    for c, f in zip(split.clients, mono.model.first):
        gap = max(gap, float(np.abs(c.conv.kernels - f.kernels).max()))
    same = [r.metrics() for r in split.history.records] == [r.metrics() for r in mono.history.records]
    print(f"max parameter difference {gap:.3e}; metrics identical: {same}")


if __name__ == "__main__":
    main()
