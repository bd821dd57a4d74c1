"""The two halves of the split network and their monolithic composition.

Clients own a single conv3x3 + relu stage. The server stacks VGG-style
conv3x3 + relu + maxpool blocks, then dense + relu + dense + sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import ops
from .errors import DimensionError, ModeError, ProtocolError, ValidationError
from .ops import LayerParams

CLIENT_STREAM = 101
SERVER_STREAM = 202

DEFAULT_BLOCKS = (32, 64, 64)
DEFAULT_HIDDEN = 128
DEFAULT_FILTERS = 16
INPUT_SIZE = 64


@dataclass
class ClientModel:
    conv: LayerParams
    trainable: bool = False
    input_shape: tuple = (INPUT_SIZE, INPUT_SIZE, 1)

    @property
    def out_channels(self) -> int:
        return self.conv.kernels.shape[-1]

    def feature_shape(self) -> tuple:
        h, w, _ = self.input_shape
        return (h, w, self.out_channels)


@dataclass
class ServerModel:
    blocks: list
    hidden: LayerParams
    out: LayerParams
    input_shape: tuple = (INPUT_SIZE, INPUT_SIZE, DEFAULT_FILTERS)

    def params(self) -> list:
        return [*self.blocks, self.hidden, self.out]

    @classmethod
    def from_params(cls, params: Sequence[LayerParams], input_shape) -> "ServerModel":
        *blocks, hidden, out = params
        return cls(list(blocks), hidden, out, tuple(input_shape))

    def spatial_trace(self) -> list:
        h = self.input_shape[0]
        trace = [h]
        for _ in self.blocks:
            h = -(-h // 2)
            trace.append(h)
        return trace


@dataclass(frozen=True)
class CutActivation:
    features: np.ndarray  # (b_k, H, W, C)
    labels: np.ndarray  # (b_k, 1)
    client_id: int
    round_id: int

    def __post_init__(self):
        if self.features.ndim != 4:
            raise DimensionError(f"cut features must be rank 4, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0], 1):
            raise DimensionError(
                f"labels {self.labels.shape} do not match {self.features.shape[0]} feature rows"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")

    @property
    def rows(self) -> int:
        return self.features.shape[0]


class Slot(NamedTuple):
    client_id: int
    start: int
    stop: int


def init_client(seed: int, *, filters: int = DEFAULT_FILTERS, in_channels: int = 1,
                kernel: int = 3, input_size: int = INPUT_SIZE, dtype=np.float32,
                trainable: bool = False) -> ClientModel:
    """Seeded client layer. Every client of a run calls this with the same seed."""
    rng = ops.make_rng(seed, CLIENT_STREAM)
    shape = (kernel, kernel, in_channels, filters)
    conv = LayerParams(ops.he_uniform(rng, shape, kernel * kernel * in_channels, dtype),
                       np.zeros(filters, dtype=dtype))
    return ClientModel(conv, trainable, (input_size, input_size, in_channels))


def init_server(seed: int, *, in_channels: int = DEFAULT_FILTERS, blocks=DEFAULT_BLOCKS,
                hidden: int = DEFAULT_HIDDEN, input_size: int = INPUT_SIZE,
                dtype=np.float32) -> ServerModel:
    if not blocks:
        raise ValidationError("server needs at least one conv block")
    rng = ops.make_rng(seed, SERVER_STREAM)
    convs = []
    cin = in_channels
    for cout in blocks:
        convs.append(LayerParams(ops.he_uniform(rng, (3, 3, cin, cout), 9 * cin, dtype),
                                 np.zeros(cout, dtype=dtype)))
        cin = cout
    side = input_size
    for _ in blocks:
        side = -(-side // 2)
    flat = side * side * cin
    hid = LayerParams(ops.he_uniform(rng, (flat, hidden), flat, dtype), np.zeros(hidden, dtype=dtype))
    out = LayerParams(ops.xavier_uniform(rng, (hidden, 1), hidden, 1, dtype), np.zeros(1, dtype=dtype))
    return ServerModel(convs, hid, out, (input_size, input_size, in_channels))


# ---------------------------------------------------------------------------
# client side

def _check_client_batch(model: ClientModel, batch: np.ndarray) -> None:
    if batch.ndim != 4 or batch.shape[1:] != tuple(model.input_shape):
        raise DimensionError(
            f"client expects batches of shape (b, {', '.join(map(str, model.input_shape))}), "
            f"got {batch.shape}"
        )


def client_forward(model: ClientModel, batch: np.ndarray, labels: np.ndarray, client_id: int,
                   round_id: int) -> CutActivation:
    _check_client_batch(model, batch)
    labels = np.asarray(labels).reshape(-1, 1).astype(np.uint8)
    if batch.shape[0] == 0:
        feats = np.zeros((0, *model.feature_shape()), dtype=model.conv.dtype)
    else:
        feats = ops.relu(ops.conv2d(batch.astype(model.conv.dtype, copy=False), model.conv))
    return CutActivation(feats, labels, client_id, round_id)


def client_backward(model: ClientModel, batch: np.ndarray, cut_grad: np.ndarray) -> LayerParams:
    if not model.trainable:
        raise ModeError("client layer is frozen; enable trainable mode to backpropagate into it")
    _check_client_batch(model, batch)
    expected = (batch.shape[0], *model.feature_shape())
    if cut_grad.shape != expected:
        raise DimensionError(f"cut gradient {cut_grad.shape} does not match features {expected}")
    if batch.shape[0] == 0:
        return model.conv.zeros_like()
    x = batch.astype(model.conv.dtype, copy=False)
    z, cols = ops.conv2d(x, model.conv, return_cols=True)
    _, grads = ops.conv2d_backward(x, model.conv, ops.relu_backward(z, cut_grad),
                                   need_input_grad=False, cols=cols)
    return grads


def client_step(model: ClientModel, grads: LayerParams, lr: float) -> ClientModel:
    if not model.trainable:
        raise ModeError("client layer is frozen")
    return ClientModel(ops.sgd_step(model.conv, grads, lr), True, model.input_shape)


# ---------------------------------------------------------------------------
# server side

def concat_features(parts: Sequence[CutActivation]):
    """Stack client feature maps along the batch axis in ascending client_id order.

    Returns ``(features, labels, slots)`` where ``slots[i]`` holds the row range
    of the i-th client in the stacked batch.
    """
    if not parts:
        raise ProtocolError("no feature maps to concatenate")
    ids = [p.client_id for p in parts]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in round: {sorted(ids)}")
    rounds = {p.round_id for p in parts}
    if len(rounds) != 1:
        raise ProtocolError(f"feature maps from different rounds: {sorted(rounds)}")
    dims = {p.features.shape[1:] for p in parts}
    if len(dims) != 1:
        raise ProtocolError(f"feature maps disagree on shape: {sorted(dims)}")
    ordered = sorted(parts, key=lambda p: p.client_id)
    slots, start = [], 0
    for p in ordered:
        slots.append(Slot(p.client_id, start, start + p.rows))
        start += p.rows
    features = np.concatenate([p.features for p in ordered], axis=0)
    labels = np.concatenate([p.labels for p in ordered], axis=0)
    return features, labels, slots


def server_forward(model: ServerModel, features: np.ndarray):
    if features.ndim != 4 or features.shape[1:] != tuple(model.input_shape):
        raise DimensionError(
            f"server expects features of shape (B, {', '.join(map(str, model.input_shape))}), "
            f"got {features.shape}"
        )
    dtype = model.hidden.dtype
    if features.shape[0] == 0:
        return np.zeros((0, 1), dtype=dtype), None
    x = features.astype(dtype, copy=False)
    blocks = []
    for conv in model.blocks:
        z, cols = ops.conv2d(x, conv, return_cols=True)
        a = ops.relu(z)
        p, idx = ops.maxpool2(a)
        blocks.append((x, cols, z, idx))
        x = p
    flat = x.reshape(x.shape[0], -1)
    hz = ops.dense(flat, model.hidden)
    h = ops.relu(hz)
    logits = ops.dense(h, model.out)
    pred = ops.sigmoid(logits)
    cache = {"blocks": blocks, "pooled_shape": x.shape, "flat": flat, "hz": hz, "h": h}
    return pred, cache


def _check_slots(slots: Sequence[Slot], total: int) -> None:
    pos = 0
    for s in slots:
        if s.start != pos or s.stop < s.start:
            raise ProtocolError(f"offsets {list(slots)} do not tile the batch contiguously")
        pos = s.stop
    if pos != total:
        raise ProtocolError(f"offsets cover {pos} rows but the batch has {total}")


def server_backward(model: ServerModel, cache, pred: np.ndarray, labels: np.ndarray,
                    slots: Sequence[Slot], *, need_cut_grad: bool = True):
    """Server parameter gradients plus the cut-layer gradient split per client.

    Returns ``(grads, cut_slices)``; grads align with ``model.params()``.
    ``cut_slices`` is None when ``need_cut_grad`` is false.
    """
    if pred.shape != labels.shape:
        raise ProtocolError(f"pred {pred.shape} and labels {labels.shape} disagree")
    _check_slots(slots, pred.shape[0])
    if cache is None:
        raise ValidationError("cannot backpropagate an empty batch")
    g = ops.sigmoid_bce_backward(pred, labels)
    g_h, g_out = ops.dense_backward(cache["h"], model.out, g)
    g_flat, g_hidden = ops.dense_backward(cache["flat"], model.hidden,
                                          ops.relu_backward(cache["hz"], g_h))
    g = g_flat.reshape(cache["pooled_shape"])
    block_grads = []
    last = len(model.blocks) - 1
    for i in range(last, -1, -1):
        x, cols, z, idx = cache["blocks"][i]
        g = ops.relu_backward(z, ops.maxpool2_backward(idx, g))
        need_input = i > 0 or need_cut_grad
        g, gp = ops.conv2d_backward(x, model.blocks[i], g, need_input_grad=need_input, cols=cols)
        block_grads.append(gp)
    grads = [*reversed(block_grads), g_hidden, g_out]
    if not need_cut_grad:
        return grads, None
    return grads, [g[s.start:s.stop] for s in slots]


def server_step(model: ServerModel, grads: Sequence[LayerParams], lr: float) -> ServerModel:
    new = [ops.sgd_step(p, g, lr) for p, g in zip(model.params(), grads)]
    return ServerModel.from_params(new, model.input_shape)


# ---------------------------------------------------------------------------
# monolithic oracle

@dataclass
class MonolithicModel:
    """Client layer(s) and server fused into one centrally trained chain.

    ``first`` holds one client layer per data owner; row ``i`` of a batch is
    routed through ``first[owners[i]]``. With a single entry this is the
    ordinary end-to-end CNN.
    """

    first: list
    server: ServerModel
    trainable: bool = False
    input_shape: tuple = (INPUT_SIZE, INPUT_SIZE, 1)

    def client_view(self, owner: int = 0) -> ClientModel:
        return ClientModel(self.first[owner], self.trainable, self.input_shape)


def compose_monolithic(clients, server: ServerModel) -> MonolithicModel:
    if isinstance(clients, ClientModel):
        clients = [clients]
    clients = list(clients)
    if not clients:
        raise ValidationError("need at least one client layer")
    shapes = {c.input_shape for c in clients}
    if len(shapes) != 1:
        raise DimensionError(f"client layers disagree on input shape: {sorted(shapes)}")
    for c in clients:
        if c.feature_shape() != tuple(server.input_shape):
            raise DimensionError(
                f"client output {c.feature_shape()} does not feed server input {server.input_shape}"
            )
    return MonolithicModel([c.conv for c in clients], server, clients[0].trainable,
                           clients[0].input_shape)


def _owner_rows(owners: np.ndarray, n_first: int):
    for k in range(n_first):
        rows = np.flatnonzero(owners == k)
        if rows.size:
            yield k, rows


def monolithic_forward(model: MonolithicModel, x: np.ndarray, owners=None):
    if x.ndim != 4 or x.shape[1:] != tuple(model.input_shape):
        raise DimensionError(f"expected input (B, {model.input_shape}), got {x.shape}")
    owners = np.zeros(x.shape[0], dtype=np.intp) if owners is None else np.asarray(owners)
    if owners.shape != (x.shape[0],) or (owners.size and (owners.min() < 0 or owners.max() >= len(model.first))):
        raise ValidationError("owners must give a valid client layer index per row")
    dtype = model.server.hidden.dtype
    feats = np.zeros((x.shape[0], *model.server.input_shape), dtype=dtype)
    pre = np.zeros_like(feats)
    x = x.astype(dtype, copy=False)
    for k, rows in _owner_rows(owners, len(model.first)):
        z = ops.conv2d(x[rows], model.first[k])
        pre[rows] = z
        feats[rows] = ops.relu(z)
    pred, cache = server_forward(model.server, feats)
    return pred, {"x": x, "owners": owners, "pre": pre, "server": cache}


def monolithic_backward(model: MonolithicModel, cache, pred, labels):
    """Returns ``(first_grads, server_grads)``; first_grads is None when frozen."""
    b = pred.shape[0]
    grads, cut = server_backward(model.server, cache["server"], pred, labels, [Slot(0, 0, b)],
                                 need_cut_grad=model.trainable)
    if not model.trainable:
        return None, grads
    g_pre = ops.relu_backward(cache["pre"], cut[0])
    first = [p.zeros_like() for p in model.first]
    for k, rows in _owner_rows(cache["owners"], len(model.first)):
        _, first[k] = ops.conv2d_backward(cache["x"][rows], model.first[k], g_pre[rows],
                                          need_input_grad=False)
    return first, grads


def monolithic_step(model: MonolithicModel, first_grads, server_grads, lr: float) -> MonolithicModel:
    first = model.first
    if model.trainable and first_grads is not None:
        first = [ops.sgd_step(p, g, lr) for p, g in zip(model.first, first_grads)]
    return MonolithicModel(list(first), server_step(model.server, server_grads, lr),
                           model.trainable, model.input_shape)
