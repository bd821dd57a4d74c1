"""Command-line entry point: ``splitwing {train,grid,distort,gendata,serve,client}``."""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import model as M
from . import transport as T
from .data import Dataset, SplitRatio, encode_pgm, load_directory, load_image, synthetic_dataset, write_synthetic
from .distort import distortion_report, identity_client, render_channel
from .errors import FormatError, ModeError, ProtocolError, ValidationError
from .grid import REFERENCE_ACCURACY, GridSpec, run_grid
from .ops import LayerParams
from .orchestrator import RunConfig, SplitServer, run_client, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PROTOCOL = 0, 2, 3, 4
SEED_ENV = "SPLITWING_SEED"

RATIO_HELP = "known configurations:\n" + "\n".join(
    f"  --clients {n} --ratio {r}" for n, r in REFERENCE_ACCURACY)

log = logging.getLogger("splitwing")


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# shared flags

def _run_flags(p: argparse.ArgumentParser, *, grid: bool = False) -> None:
    if not grid:
        p.add_argument("--clients", type=int, default=3, help="number of clients (1..16)")
        p.add_argument("--ratio", default=None, help="data split ratio, e.g. 7:2:1 (default: equal)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32, help="global batch size per round")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=None, help=f"base seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--trainable-clients", action="store_true", help="update the client layer too")
    p.add_argument("--transport", choices=("inprocess", "socket"), default="inprocess")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="directory with flame/ and nonflame/ images")
    src.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic images")
    p.add_argument("--synthetic-seed", type=int, default=1, help="seed for --synthetic data")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--timing", action="store_true", help="record wall_ms (breaks byte-identical reruns)")
    p.add_argument("--timeout", type=float, default=30.0, help="round barrier timeout in seconds")


def _dataset(args) -> Dataset:
    if args.data is not None:
        return load_directory(args.data)
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive count")
        return synthetic_dataset(args.synthetic, args.synthetic_seed)
    raise UsageError("give a dataset with --data DIR or --synthetic N")


def _config(args, **over) -> RunConfig:
    seed = args.seed if args.seed is not None else _default_seed()
    n = over.pop("n_clients", getattr(args, "clients", 3))
    ratio = over.pop("ratio", None) or getattr(args, "ratio", None) or ":".join(["1"] * max(n, 1))
    transport = over.pop("transport", getattr(args, "transport", "inprocess"))
    try:
        return RunConfig(n_clients=n, ratio=ratio, epochs=args.epochs, batch=args.batch, lr=args.lr,
                         client_trainable=args.trainable_clients, seed=seed,
                         transport=transport, precision=args.precision,
                         timeout=args.timeout, **over)
    except ValidationError as exc:
        raise UsageError(str(exc)) from None


def save_model(path: Path, clients, server: M.ServerModel, config: RunConfig) -> None:
    arrays = {}
    for k, c in enumerate(clients):
        arrays[f"client{k}_kernels"] = c.conv.kernels
        arrays[f"client{k}_bias"] = c.conv.bias
    for i, p in enumerate(server.params()):
        arrays[f"server{i}_kernels"] = p.kernels
        arrays[f"server{i}_bias"] = p.bias
    meta = {"n_clients": config.n_clients, "ratio": str(config.ratio), "seed": config.seed,
            "precision": config.precision, "trainable": config.client_trainable}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, buf.getvalue())


def load_client(path: Path, index: int = 0) -> M.ClientModel:
    with np.load(path) as z:
        key = f"client{index}_kernels"
        if key not in z:
            raise FormatError(f"{path} has no client {index}")
        return M.ClientModel(LayerParams(z[key], z[f"client{index}_bias"]))


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    config = _config(args)
    data = _dataset(args)
    result = train(config, data)
    _atomic_write(args.out / "metrics.csv", result.history.to_csv(wall_clock=args.timing))
    save_model(args.out / "model.npz", result.clients, result.server, config)
    final = result.history.final
    print(f"epochs {len(result.history)} train_acc {final.train_acc:.4f} test_acc {final.test_acc:.4f} "
          f"-> {args.out / 'metrics.csv'}")
    return EXIT_OK


def cmd_grid(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.ratios:
        try:
            cells = tuple((len(r), r) for r in map(SplitRatio.parse, args.ratios))
        except ValidationError as exc:
            raise UsageError(str(exc)) from None
        spec = GridSpec(cells, args.repeats, seed)
    else:
        spec = GridSpec(repeats=args.repeats, base_seed=seed)
    base = _config(args)
    data = _dataset(args)

    def progress(run):
        print(f"n={run.n_clients} ratio={run.ratio} repeat={run.repeat} "
              f"test_acc={100 * run.result.history.final.test_acc:.2f}", flush=True)
        if not args.trainable_clients:
            ref = M.init_client(run.seed, filters=base.filters, dtype=base.dtype)
            if not all(c.conv.equal(ref.conv) for c in run.result.clients):
                raise ModeError(f"frozen client weights changed in run seed {run.seed}")

    result = run_grid(spec, data, base, on_run=progress)
    _atomic_write(args.out / "grid.csv", result.to_csv())
    for n, spread in result.spreads().items():
        print(f"n={n} spread {spread:.2f} pp")
    return EXIT_OK


def cmd_gendata(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be positive")
    seed = args.seed if args.seed is not None else _default_seed()
    written = write_synthetic(args.out, args.count, seed)
    print(f"wrote {len(written) - 1} images and manifest.csv under {args.out}")
    return EXIT_OK


def cmd_distort(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.image is not None:
        image = load_image(args.image.read_bytes())
    else:
        data = synthetic_dataset(max(args.index + 1, 2), args.synthetic_seed)
        pick = np.flatnonzero(data.labels == 1)[0] if args.index < 0 else args.index
        image = data.images[pick]
    if args.identity:
        client = identity_client()
    elif args.model is not None:
        client = load_client(args.model, args.client_index)
    else:
        client = M.init_client(seed)
    report, feats = distortion_report(image, client)
    args.out.mkdir(parents=True, exist_ok=True)
    raw_u8 = np.round(np.clip(np.asarray(image).reshape(image.shape[:2]), 0, 1) * 255).astype(np.uint8)
    _atomic_write(args.out / "raw.pgm", encode_pgm(raw_u8))
    for c in range(feats.shape[-1]):
        _atomic_write(args.out / f"channel_{c:02d}.pgm", encode_pgm(render_channel(feats[..., c])))
    _atomic_write(args.out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    flag = " (constant input)" if report.constant_input else ""
    print(f"max |NCC| {report.max_abs_ncc:.6f} PSNR {report.psnr:.2f} dB{flag}")
    return EXIT_OK


def cmd_serve(args) -> int:
    config = _config(args, transport="socket")
    data = _dataset(args)
    endpoint = T.SocketServerEndpoint(args.host, args.port)
    print(f"listening on {endpoint.address[0]}:{endpoint.address[1]}", flush=True)
    server = SplitServer(endpoint, config)
    try:
        result = server.run(data)
    finally:
        server.shutdown()
        endpoint.close()
    _atomic_write(args.out / "metrics.csv", result.history.to_csv(wall_clock=args.timing))
    save_model(args.out / "model.npz", result.clients, result.server, config)
    return EXIT_OK


def cmd_client(args) -> int:
    data = _dataset(args)
    endpoint = T.SocketClientEndpoint(args.client_id, args.host, args.port, args.timeout)
    try:
        run_client(endpoint, data, timeout=args.timeout)
    finally:
        endpoint.close()
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitwing", description=__doc__.splitlines()[0],
                                     epilog=RATIO_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("train", help="one split-learning run", epilog=RATIO_HELP, formatter_class=fmt)
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="client count x split ratio grid", epilog=RATIO_HELP, formatter_class=fmt)
    _run_flags(p, grid=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--ratios", nargs="+", metavar="RATIO",
                   help="cells to run instead of the default nine; client count = number of parts")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gendata", help="write a synthetic image set")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("distort", help="feature-map distortion report")
    p.add_argument("--image", type=Path, help="image file (default: a synthetic flame image)")
    p.add_argument("--synthetic-seed", type=int, default=1)
    p.add_argument("--index", type=int, default=-1, help="synthetic sample index (default: first flame)")
    who = p.add_mutually_exclusive_group()
    who.add_argument("--identity", action="store_true", help="use the copy-the-input client")
    who.add_argument("--model", type=Path, help="model.npz written by train")
    p.add_argument("--client-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=None, help="seed for a random client")
    p.add_argument("--out", type=Path, default=Path("distort"))
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("serve", help="socket server for a multi-process run", epilog=RATIO_HELP,
                       formatter_class=fmt)
    _run_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5757)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="socket client for a multi-process run")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5757)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path)
    src.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--synthetic-seed", type=int, default=1)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_client)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValidationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"splitwing: error: {exc}\n{RATIO_HELP}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, TimeoutError) as exc:
        print(f"splitwing: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (OSError, FormatError) as exc:
        print(f"splitwing: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModeError as exc:
        print(f"splitwing: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
