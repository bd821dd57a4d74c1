"""Split-learning training loop, its client runtime, and the monolithic baseline."""
from __future__ import annotations

import csv
import io
import logging
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import model as M
from . import transport as T
from .data import Dataset, SplitRatio, partition_by_ratio, schedule_epoch, train_test_split
from .errors import ProtocolError, RoundAbortError, ValidationError
from .ops import LayerParams, bce_loss, dtype_for

log = logging.getLogger(__name__)

TRANSPORTS = ("inprocess", "socket")
CSV_HEADER = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc", "wall_ms")
TEST_PARTITION_SALT = 7919


@dataclass
class RunConfig:
    n_clients: int = 3
    ratio: SplitRatio | str | tuple = (1, 1, 1)
    epochs: int = 50
    batch: int = 32
    lr: float = 0.01
    client_trainable: bool = False
    seed: int = 0
    transport: str = "inprocess"
    precision: str = "f32"
    test_fraction: float = 0.2
    timeout: float = 30.0
    blocks: tuple = M.DEFAULT_BLOCKS
    hidden: int = M.DEFAULT_HIDDEN
    filters: int = M.DEFAULT_FILTERS

    def __post_init__(self):
        if isinstance(self.ratio, str):
            self.ratio = SplitRatio.parse(self.ratio)
        elif not isinstance(self.ratio, SplitRatio):
            self.ratio = SplitRatio(tuple(self.ratio))
        if not 1 <= self.n_clients <= 16:
            raise ValidationError(f"n_clients must be in 1..16, got {self.n_clients}")
        if len(self.ratio) != self.n_clients:
            raise ValidationError(f"ratio {self.ratio} has {len(self.ratio)} parts for {self.n_clients} clients")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.batch < 1:
            raise ValidationError("batch must be at least 1")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.transport not in TRANSPORTS:
            raise ValidationError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if not 0 < self.test_fraction < 1:
            raise ValidationError("test_fraction must be in (0, 1)")
        self.lr = float(self.lr)
        self.blocks = tuple(self.blocks)
        dtype_for(self.precision)

    @property
    def dtype(self):
        return dtype_for(self.precision)

    @property
    def client_ids(self) -> list:
        return list(range(self.n_clients))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    wall_ms: float = 0.0

    def metrics(self) -> tuple:
        """Everything except wall-clock time."""
        return (self.epoch, self.train_loss, self.train_acc, self.test_loss, self.test_acc)


@dataclass
class MetricsHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self, wall_clock: bool = False) -> str:
        """CSV text. Wall time is written as 0 unless ``wall_clock`` so reruns are byte-identical."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.test_loss),
                        repr(r.test_acc), round(r.wall_ms) if wall_clock else 0])
        return buf.getvalue()


class TrainResult(NamedTuple):
    clients: list
    server: M.ServerModel
    history: MetricsHistory


class MonolithicResult(NamedTuple):
    model: M.MonolithicModel
    history: MetricsHistory


class _Tally:
    """Running loss/accuracy over the rounds of one pass."""

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold
        self.loss_sum = 0.0
        self.correct = 0
        self.count = 0

    def add(self, pred: np.ndarray, labels: np.ndarray, loss: float) -> None:
        n = pred.shape[0]
        self.loss_sum += loss * n
        self.correct += int(np.sum((pred >= self.threshold) == (labels == 1)))
        self.count += n

    @property
    def loss(self) -> float:
        return self.loss_sum / self.count

    @property
    def accuracy(self) -> float:
        return self.correct / self.count


def _score(preds: list, labels: list, threshold: float = 0.5):
    if not preds:
        raise ValidationError("cannot evaluate an empty dataset")
    p = np.concatenate(preds)
    y = np.concatenate(labels)
    return bce_loss(p, y), float(np.mean((p >= threshold) == (y == 1)))


class _Plan(NamedTuple):
    train_shards: list
    test_shards: list


def _plan(config: RunConfig, dataset: Dataset) -> _Plan:
    train_idx, test_idx = train_test_split(dataset, config.test_fraction, config.seed)
    if test_idx.size == 0:
        raise ValidationError("dataset too small to hold out a test split")
    return _Plan(
        partition_by_ratio(dataset, config.ratio, config.seed, indices=train_idx),
        partition_by_ratio(dataset, config.ratio, config.seed + TEST_PARTITION_SALT, indices=test_idx),
    )


def init_models(config: RunConfig):
    client = M.init_client(config.seed, filters=config.filters, dtype=config.dtype,
                           trainable=config.client_trainable)
    server = M.init_server(config.seed, in_channels=config.filters, blocks=config.blocks,
                           hidden=config.hidden, dtype=config.dtype)
    return client, server


def _eval_rounds(config: RunConfig, shards) -> list:
    return schedule_epoch(shards, config.batch, 0, config.seed, config.ratio.weights, shuffle=False)


# ---------------------------------------------------------------------------
# client runtime

def run_client(endpoint, dataset: Dataset, on_metrics: Callable | None = None,
               timeout: float | None = None) -> M.ClientModel:
    """Serve one client until the server sends shutdown; returns the final client layer."""
    cid = endpoint.client_id
    endpoint.send(T.control(cid, op="hello"))
    try:
        env = endpoint.recv(timeout)
        cfg = T.decode_payload(env) if env.msg_type == T.MsgType.CONTROL else {}
        if cfg.get("op") != "config":
            raise ProtocolError(f"expected config from server, got {env.msg_type.name}")
        if cfg["digest"] != dataset.digest():
            raise ProtocolError("local dataset differs from the server's (digest mismatch)")
        client = M.init_client(cfg["seed"], filters=cfg["filters"], dtype=dtype_for(cfg["precision"]),
                               trainable=cfg["trainable"])
        lr = cfg["lr"]
        last_round = -1
        pending = None
        while True:
            env = endpoint.recv(timeout)
            if env.msg_type == T.MsgType.CONTROL:
                body = T.decode_payload(env)
                op = body.get("op")
                if op == "forward":
                    if env.round_id <= last_round:
                        continue  # re-request of a round already answered
                    idx = np.asarray(body["indices"], dtype=np.intp)
                    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
                        raise ProtocolError("forward request indexes outside the local dataset")
                    batch = dataset.images[idx]
                    act = M.client_forward(client, batch, dataset.labels[idx], cid, env.round_id)
                    endpoint.send(T.feature_envelope(act))
                    last_round = env.round_id
                    pending = (env.round_id, batch) if body.get("train") and client.trainable else None
                elif op == "params":
                    endpoint.send(T.control(cid, env.round_id, op="params",
                                            kernels=T.tensor_to_text(client.conv.kernels),
                                            bias=T.tensor_to_text(client.conv.bias)))
                elif op == "shutdown":
                    return client
                else:
                    raise ProtocolError(f"unknown control op {op!r}")
            elif env.msg_type == T.MsgType.CUT_GRADIENT:
                if pending is None or pending[0] != env.round_id:
                    raise ProtocolError(f"cut gradient for round {env.round_id} without a pending batch")
                grad = T.decode_payload(env)
                client = M.client_step(client, M.client_backward(client, pending[1], grad), lr)
                pending = None
            elif env.msg_type == T.MsgType.METRICS:
                if on_metrics is not None:
                    on_metrics(T.decode_payload(env))
            else:
                raise ProtocolError(f"client cannot handle {env.msg_type.name}")
    except Exception as exc:
        try:
            endpoint.send(T.control(cid, op="error", message=f"{type(exc).__name__}: {exc}"))
        except Exception:
            pass
        raise


# ---------------------------------------------------------------------------
# server side

class SplitServer:
    """Drives connected clients round by round over a ServerEndpoint."""

    def __init__(self, endpoint: T.ServerEndpoint, config: RunConfig):
        self.endpoint = endpoint
        self.config = config
        self.ids = config.client_ids
        self.round_id = 0

    def handshake(self, dataset: Dataset) -> None:
        self.endpoint.wait_for_clients(self.ids, self.config.timeout)
        digest = dataset.digest()
        for cid in self.ids:
            self.endpoint.send(cid, T.control(
                cid, op="config", seed=self.config.seed, precision=self.config.precision,
                trainable=self.config.client_trainable, lr=self.config.lr,
                filters=self.config.filters, digest=digest))

    def exchange(self, rnd, train: bool) -> list:
        """Ask every client for its share of ``rnd`` and wait at the barrier."""
        rid = self.round_id
        self.round_id += 1
        for cid, idx in zip(self.ids, rnd.indices):
            self.endpoint.send(cid, T.control(cid, rid, op="forward", indices=idx.tolist(), train=train))
        got: dict = {}
        try:
            return T.round_rendezvous(self.endpoint, self.ids, rid, self.config.timeout, got)
        except RoundAbortError as exc:
            log.warning("%s; retrying once", exc)
            for cid in exc.missing:
                idx = rnd.indices[self.ids.index(cid)]
                self.endpoint.send(cid, T.control(cid, rid, op="forward", indices=idx.tolist(),
                                                  train=train))
            return T.round_rendezvous(self.endpoint, self.ids, rid, self.config.timeout, got)

    def send_gradients(self, slots, cut) -> None:
        rid = self.round_id - 1
        for slot, g in zip(slots, cut):
            self.endpoint.send(slot.client_id, T.gradient_envelope(slot.client_id, rid, g))

    def broadcast_metrics(self, record: EpochRecord) -> None:
        body = {f.name: getattr(record, f.name) for f in fields(record)}
        for cid in self.ids:
            self.endpoint.send(cid, T.json_envelope(T.MsgType.METRICS, cid, self.round_id, body))

    def collect_clients(self) -> list:
        for cid in self.ids:
            self.endpoint.send(cid, T.control(cid, self.round_id, op="params"))
        models: dict = {}
        deadline = time.monotonic() + self.config.timeout
        while len(models) < len(self.ids):
            env = self.endpoint.recv(max(deadline - time.monotonic(), 0))
            body = T.decode_payload(env)
            if env.msg_type != T.MsgType.CONTROL or body.get("op") not in ("params", "error"):
                raise ProtocolError(f"unexpected {env.msg_type.name} while collecting parameters")
            if body["op"] == "error":
                raise ProtocolError(f"client {env.client_id} failed: {body.get('message')}")
            conv = LayerParams(T.tensor_from_text(body["kernels"]), T.tensor_from_text(body["bias"]))
            models[env.client_id] = M.ClientModel(conv, self.config.client_trainable)
        return [models[c] for c in self.ids]

    def shutdown(self) -> None:
        for cid in self.ids:
            try:
                self.endpoint.send(cid, T.control(cid, self.round_id, op="shutdown"))
            except (ProtocolError, OSError):
                pass

    def run(self, dataset: Dataset, on_epoch: Callable | None = None) -> TrainResult:
        cfg = self.config
        plan = _plan(cfg, dataset)
        _, server = init_models(cfg)
        history = MetricsHistory()
        weights = cfg.ratio.weights
        test_rounds = _eval_rounds(cfg, plan.test_shards)
        self.handshake(dataset)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            tally = _Tally()
            for rnd in schedule_epoch(plan.train_shards, cfg.batch, epoch, cfg.seed, weights):
                parts = self.exchange(rnd, train=True)
                feats, labels, slots = M.concat_features(parts)
                pred, cache = M.server_forward(server, feats)
                loss = bce_loss(pred, labels)
                grads, cut = M.server_backward(server, cache, pred, labels, slots,
                                               need_cut_grad=cfg.client_trainable)
                server = M.server_step(server, grads, cfg.lr)
                if cfg.client_trainable:
                    self.send_gradients(slots, cut)
                tally.add(pred, labels, loss)
            preds, ys = [], []
            for rnd in test_rounds:
                feats, labels, _ = M.concat_features(self.exchange(rnd, train=False))
                preds.append(M.server_forward(server, feats)[0])
                ys.append(labels)
            test_loss, test_acc = _score(preds, ys)
            record = EpochRecord(epoch, tally.loss, tally.accuracy, test_loss, test_acc,
                                 (time.perf_counter() - t0) * 1000)
            history.records.append(record)
            log.info("epoch %d train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f",
                     *record.metrics())
            self.broadcast_metrics(record)
            if on_epoch is not None and on_epoch(record):
                break
        clients = self.collect_clients()
        return TrainResult(clients, server, history)


def _spawn_clients(config: RunConfig, dataset: Dataset, make_endpoint) -> tuple:
    results: dict = {}
    errors: list = []

    def work(cid):
        ep = None
        try:
            ep = make_endpoint(cid)
            results[cid] = run_client(ep, dataset)
        except Exception as exc:  # surfaced by the server side or after join
            errors.append(exc)
        finally:
            if ep is not None:
                ep.close()

    threads = [threading.Thread(target=work, args=(cid,), daemon=True, name=f"client-{cid}")
               for cid in config.client_ids]
    for t in threads:
        t.start()
    return threads, results, errors


def train(config: RunConfig, dataset: Dataset, on_epoch: Callable | None = None) -> TrainResult:
    """Split training with every client running in its own thread.

    ``on_epoch(record)`` is called after each epoch; returning True stops training.
    """
    if config.transport == "socket":
        endpoint = T.SocketServerEndpoint("127.0.0.1", 0)
        host, port = endpoint.address

        def make_endpoint(cid):
            return T.SocketClientEndpoint(cid, host, port, config.timeout)
    else:
        endpoint = T.ServerEndpoint()
        ends = T.inprocess_links(endpoint, config.client_ids)
        make_endpoint = ends.__getitem__
    threads, _, errors = _spawn_clients(config, dataset, make_endpoint)
    server = SplitServer(endpoint, config)
    try:
        result = server.run(dataset, on_epoch)
    finally:
        server.shutdown()
        for t in threads:
            t.join(timeout=config.timeout)
        endpoint.close()
    if errors:
        raise errors[0]
    return result


# ---------------------------------------------------------------------------
# centralised oracle

def _gather(dataset: Dataset, rnd):
    idx = np.concatenate(rnd.indices)
    owners = np.repeat(np.arange(len(rnd.indices)), rnd.sizes)
    return dataset.images[idx], dataset.labels[idx].reshape(-1, 1), owners


def train_monolithic(config: RunConfig, dataset: Dataset,
                     on_epoch: Callable | None = None) -> MonolithicResult:
    """Same schedule and arithmetic as :func:`train`, without clients or transport.

    Each data owner keeps its own copy of the first layer, so trainable runs
    stay comparable to the split run parameter for parameter.
    """
    cfg = config
    plan = _plan(cfg, dataset)
    client, server = init_models(cfg)
    model = M.compose_monolithic([client] * cfg.n_clients, server)
    history = MetricsHistory()
    test_rounds = _eval_rounds(cfg, plan.test_shards)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        tally = _Tally()
        for rnd in schedule_epoch(plan.train_shards, cfg.batch, epoch, cfg.seed, cfg.ratio.weights):
            x, y, owners = _gather(dataset, rnd)
            pred, cache = M.monolithic_forward(model, x, owners)
            loss = bce_loss(pred, y)
            first_grads, server_grads = M.monolithic_backward(model, cache, pred, y)
            model = M.monolithic_step(model, first_grads, server_grads, cfg.lr)
            tally.add(pred, y, loss)
        preds, ys = [], []
        for rnd in test_rounds:
            x, y, owners = _gather(dataset, rnd)
            preds.append(M.monolithic_forward(model, x, owners)[0])
            ys.append(y)
        test_loss, test_acc = _score(preds, ys)
        record = EpochRecord(epoch, tally.loss, tally.accuracy, test_loss, test_acc,
                             (time.perf_counter() - t0) * 1000)
        history.records.append(record)
        if on_epoch is not None and on_epoch(record):
            break
    return MonolithicResult(model, history)


def evaluate(clients: Sequence[M.ClientModel], server: M.ServerModel, dataset: Dataset,
             shards, batch: int = 32, threshold: float = 0.5):
    """(loss, accuracy) with each sample routed through its shard owner's client layer."""
    if sum(len(s.indices) for s in shards) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    by_id = {s.client_id: i for i, s in enumerate(shards)}
    preds, ys = [], []
    for rnd in schedule_epoch(shards, batch, 0, 0, shuffle=False):
        parts = []
        for s, idx in zip(shards, rnd.indices):
            c = clients[by_id[s.client_id]]
            parts.append(M.client_forward(c, dataset.images[idx], dataset.labels[idx], s.client_id, 0))
        feats, labels, _ = M.concat_features(parts)
        preds.append(M.server_forward(server, feats)[0])
        ys.append(labels)
    return _score(preds, ys, threshold)
