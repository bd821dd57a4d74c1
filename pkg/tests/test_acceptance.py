"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

Run standalone with ``python tests/test_acceptance.py`` or through pytest;
under pytest the lines are repeated in the terminal summary.
"""
import hashlib
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import decode_fully, mutate, random_envelope  # noqa: E402
from splitwing import cli  # noqa: E402
from splitwing import model as M  # noqa: E402
from splitwing import transport as T  # noqa: E402
from splitwing.data import (SplitRatio, apportion, partition_by_ratio, schedule_epoch,  # noqa: E402
                            synthetic_dataset)
from splitwing.errors import ProtocolError, RoundAbortError  # noqa: E402
from splitwing.gradcheck import grad_check  # noqa: E402
from splitwing.grid import DEFAULT_CELLS, REFERENCE_ACCURACY, GridSpec, run_grid  # noqa: E402
from splitwing.orchestrator import RunConfig, train, train_monolithic  # noqa: E402

RESULTS: list = []

GRID_EPOCHS = 10  # no epoch count is fixed for the grid; see README
GRID_SAMPLES = 400


def report(num: int, name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{num}] {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


def params_hash(layer) -> str:
    h = hashlib.sha256()
    h.update(layer.kernels.tobytes())
    h.update(layer.bias.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------

def test_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for case in ("conv2d", "dense", "bce_sigmoid", "client", "server", "split_chain"):
        worst[case] = max(grad_check(case, seed, 1e-4) for seed in range(5))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-5 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(1, "gradient suite", ok, f"max rel err {top:.2e} (< 1e-5) [{detail}] in {elapsed:.1f}s (< 30s)")


def test_2_oracle_equivalence():
    t0 = time.perf_counter()
    data = synthetic_dataset(64, 1)
    cfg = RunConfig(n_clients=3, ratio="7:2:1", epochs=5, seed=0, client_trainable=True, precision="f64")
    split = train(cfg, data)
    mono = train_monolithic(cfg, data)
    diffs = [float(np.abs(a.kernels - b.kernels).max()) for a, b in
             zip(split.server.params(), mono.model.server.params())]
    diffs += [float(np.abs(a.bias - b.bias).max()) for a, b in zip(split.server.params(), mono.model.server.params())]
    diffs += [float(np.abs(c.conv.kernels - f.kernels).max()) for c, f in zip(split.clients, mono.model.first)]
    diffs += [float(np.abs(c.conv.bias - f.bias).max()) for c, f in zip(split.clients, mono.model.first)]
    moved = float(np.abs(split.clients[0].conv.kernels - M.init_client(0, dtype=np.float64).conv.kernels).max())
    trainable_ok = max(diffs) < 1e-12 and moved > 0

    frozen = RunConfig(n_clients=1, ratio=(1,), epochs=5, seed=0)
    a = train(frozen, data).history
    b = train_monolithic(frozen, data).history
    frozen_ok = [r.metrics() for r in a.records] == [r.metrics() for r in b.records]
    elapsed = time.perf_counter() - t0
    ok = trainable_ok and frozen_ok and elapsed < 60
    assert report(2, "oracle equivalence", ok,
                  f"trainable max |split - monolithic| {max(diffs):.1e} (< 1e-12, client moved {moved:.1e}); "
                  f"frozen 1-client metrics bitwise equal: {frozen_ok}; {elapsed:.1f}s (< 60s)")


def test_3_transport_equivalence():
    t0 = time.perf_counter()
    data = synthetic_dataset(100, 2)
    same = []
    for trainable in (False, True):
        cfg = dict(n_clients=3, ratio="7:2:1", epochs=3, seed=4, client_trainable=trainable)
        a = train(RunConfig(transport="inprocess", **cfg), data).history.to_csv()
        b = train(RunConfig(transport="socket", **cfg), data).history.to_csv()
        same.append(a.encode() == b.encode())
    elapsed = time.perf_counter() - t0
    ok = all(same) and elapsed < 120
    assert report(3, "transport equivalence", ok,
                  f"metrics.csv byte-identical frozen={same[0]} trainable={same[1]}; {elapsed:.1f}s (< 120s)")


def test_4_partition_and_schedule_exactness():
    t0 = time.perf_counter()
    ratios = [r for _, r in DEFAULT_CELLS]
    checked, problems = 0, []
    for total in range(1, 41):
        for n1 in range(total + 1):
            labels = np.r_[np.zeros(total - n1), np.ones(n1)].astype(np.uint8)
            labels = np.random.default_rng(total * 41 + n1).permutation(labels)
            for ratio in ratios:
                if total < len(ratio):
                    continue
                w = ratio.weights
                shards = partition_by_ratio(labels, ratio, seed=total + n1)
                idx = np.concatenate([s.indices for s in shards])
                if len(idx) != total or len(set(idx.tolist())) != total:
                    problems.append(("cover", total, n1, str(ratio)))
                for cls, cnt in ((0, total - n1), (1, n1)):
                    for s, wk in zip(shards, w):
                        if abs(int((labels[s.indices] == cls).sum()) * sum(w) - cnt * wk) >= sum(w):
                            problems.append(("class", total, n1, str(ratio)))
                for batch in (32, 8):
                    target = apportion(batch, w)
                    for rnd in schedule_epoch(shards, batch, 1, 0, w):
                        if rnd.full and sum(rnd.sizes) != batch:
                            problems.append(("round", total, n1, str(ratio), batch))
                        if not rnd.full and rnd.sizes == target:
                            problems.append(("flag", total, n1, str(ratio), batch))
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 10
    assert report(4, "partition/scheduling exactness", ok,
                  f"{checked} (dataset, ratio) cases, {len(problems)} violations; {elapsed:.1f}s (< 10s)")


def test_5_learning_works():
    t0 = time.perf_counter()
    data = synthetic_dataset(200, 1)
    outcomes = []
    for seed in range(5):
        hit = []

        def stop(rec, hit=hit):
            if rec.train_acc >= 0.95 and rec.test_acc >= 0.90:
                hit.append(rec.epoch)
                return True
            return False

        train(RunConfig(n_clients=3, ratio="7:2:1", lr=0.01, epochs=50, seed=seed), data, on_epoch=stop)
        outcomes.append(hit[0] if hit else None)
    elapsed = time.perf_counter() - t0
    passed = sum(e is not None for e in outcomes)
    ok = passed >= 4 and elapsed < 300
    assert report(5, "learning works", ok,
                  f"{passed}/5 seeds reach train >= 95% and test >= 90% (epochs reached: {outcomes}); "
                  f"{elapsed:.1f}s (< 300s)")


@pytest.fixture(scope="module")
def grid_result():
    t0 = time.perf_counter()
    base = RunConfig(epochs=GRID_EPOCHS)
    result = run_grid(GridSpec(), synthetic_dataset(GRID_SAMPLES, 1), base)
    return result, time.perf_counter() - t0


def test_6_table_structure(grid_result):
    result, elapsed = grid_result
    means = result.cell_means()
    spreads = result.spreads()
    ok = len(result.runs) == 27 and len(means) == 9 and max(spreads.values()) <= 5.0 and elapsed < 1800
    cells = "; ".join(f"n={n} {r}: {m:.1f}+-{sd:.1f} (ref {REFERENCE_ACCURACY[(n, r)]})"
                      for (n, r), (m, sd) in means.items())
    spread_txt = ", ".join(f"n={n} {s:.2f}pp" for n, s in spreads.items())
    assert report(6, "grid structure", ok,
                  f"{len(result.runs)} runs, spreads {spread_txt} (<= 5pp), {GRID_EPOCHS} epochs, "
                  f"{elapsed:.0f}s (< 1800s) | {cells}")


def test_7_frozen_immutability(grid_result):
    result, _ = grid_result
    bad = []
    for run in result.runs:
        ref = params_hash(M.init_client(run.seed).conv)
        bad += [(run.n_clients, str(run.ratio), run.seed, k) for k, c in enumerate(run.result.clients)
                if params_hash(c.conv) != ref]
    total = sum(len(r.result.clients) for r in result.runs)
    assert report(7, "frozen client immutability", not bad,
                  f"{total - len(bad)}/{total} client layers hash-identical to initialisation after the grid")


def test_8_protocol_robustness():
    rng = np.random.default_rng(8)
    counts = {"typed error": 0, "valid": 0}
    crashes = []
    for _ in range(1000):
        frame = mutate(rng, T.encode(random_envelope(rng)))
        try:
            decode_fully(frame)
            counts["valid"] += 1
        except ProtocolError:
            counts["typed error"] += 1
        except Exception as exc:  # anything untyped is a failure
            crashes.append(repr(exc))
    server = T.ServerEndpoint()
    ends = T.inprocess_links(server, [0, 1, 2])
    for cid in (0, 1):
        x = np.zeros((1, 4, 4, 2), np.float32)
        ends[cid].send(T.feature_envelope(M.CutActivation(x, np.zeros((1, 1), np.uint8), cid, 0)))
    message = ""
    try:
        T.round_rendezvous(server, [0, 1, 2], 0, 0.1)
    except RoundAbortError as exc:
        message = str(exc)
    named = "client 2" in message and "client 0" not in message and "client 1" not in message
    ok = not crashes and named
    assert report(8, "protocol robustness", ok,
                  f"1000 mutated frames: {counts['typed error']} typed errors, {counts['valid']} valid, "
                  f"{len(crashes)} crashes; timeout message {message!r}")


def test_9_distortion_anchor(tmp_path):
    rc_id = cli.main(["distort", "--identity", "--out", str(tmp_path / "identity")])
    ident = json.loads((tmp_path / "identity/report.json").read_text())
    rc_rand = cli.main(["distort", "--seed", "1", "--out", str(tmp_path / "random")])
    rand = json.loads((tmp_path / "random/report.json").read_text())
    renders = len(list((tmp_path / "random").glob("channel_*.pgm")))
    ok = (rc_id == 0 and rc_rand == 0 and abs(ident["max_abs_ncc"] - 1.0) <= 1e-6
          and renders == 16 and np.isfinite(rand["psnr"]))
    assert report(9, "distortion anchor", ok,
                  f"identity max |NCC| {ident['max_abs_ncc']:.9f} (1 +- 1e-6); random client {renders} renders, "
                  f"PSNR {rand['psnr']:.2f} dB, max |NCC| {rand['max_abs_ncc']:.3f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
