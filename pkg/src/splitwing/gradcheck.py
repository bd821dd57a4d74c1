"""Central finite-difference checks of every hand-written backward pass."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import model as M
from . import ops
from .ops import LayerParams

# Each case builds (arrays, loss_fn, grad_fn) from a generator:
#   arrays   dict name -> float64 array (perturbed in place during the check)
#   loss_fn  () -> (scalar loss, signature bytes of the piecewise branch taken)
#   grad_fn  () -> dict name -> analytic gradient
# Coordinates whose perturbation changes the signature sit on a relu kink or
# a pooling tie and are skipped.


def _signature(*arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)


def _conv_case(rng):
    x = rng.standard_normal((1, 4, 4, 2))
    p = LayerParams(rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3))
    proj = rng.standard_normal((1, 4, 4, 3))
    arrays = {"x": x, "k": p.kernels, "b": p.bias}

    def loss():
        return float(np.sum(ops.conv2d(x, p) * proj)), b""

    def grads():
        gx, gp = ops.conv2d_backward(x, p, proj)
        return {"x": gx, "k": gp.kernels, "b": gp.bias}

    return arrays, loss, grads


def _conv_strided_case(rng):
    x = rng.standard_normal((2, 5, 5, 2))
    p = LayerParams(rng.standard_normal((3, 3, 2, 2)), rng.standard_normal(2))
    proj = rng.standard_normal((2, 2, 2, 2))
    arrays = {"x": x, "k": p.kernels, "b": p.bias}

    def loss():
        return float(np.sum(ops.conv2d(x, p, stride=2, padding="valid") * proj)), b""

    def grads():
        gx, gp = ops.conv2d_backward(x, p, proj, stride=2, padding="valid")
        return {"x": gx, "k": gp.kernels, "b": gp.bias}

    return arrays, loss, grads


def _dense_case(rng):
    x = rng.standard_normal((4, 8))
    p = LayerParams(rng.standard_normal((8, 3)), rng.standard_normal(3))
    proj = rng.standard_normal((4, 3))
    arrays = {"x": x, "w": p.kernels, "b": p.bias}

    def loss():
        return float(np.sum(ops.dense(x, p) * proj)), b""

    def grads():
        gx, gp = ops.dense_backward(x, p, proj)
        return {"x": gx, "w": gp.kernels, "b": gp.bias}

    return arrays, loss, grads


def _relu_case(rng):
    # magnitudes in [0.1, 1] keep every element well away from the kink
    x = rng.uniform(0.1, 1.0, size=(3, 5)) * rng.choice([-1.0, 1.0], size=(3, 5))
    proj = rng.standard_normal((3, 5))

    def loss():
        return float(np.sum(ops.relu(x) * proj)), _signature(x > 0)

    def grads():
        return {"x": ops.relu_backward(x, proj)}

    return {"x": x}, loss, grads


def _maxpool_case(rng):
    # distinct values spaced 0.05 apart: no ties within reach of a step
    x = (rng.permutation(2 * 4 * 6 * 2) * 0.05).reshape(2, 4, 6, 2).astype(np.float64)
    proj = rng.standard_normal((2, 2, 3, 2))

    def loss():
        out, idx = ops.maxpool2(x)
        return float(np.sum(out * proj)), _signature(idx.argmax)

    def grads():
        _, idx = ops.maxpool2(x)
        return {"x": ops.maxpool2_backward(idx, proj)}

    return {"x": x}, loss, grads


def _sigmoid_case(rng):
    x = rng.standard_normal((4, 3)) * 3
    proj = rng.standard_normal((4, 3))

    def loss():
        return float(np.sum(ops.sigmoid(x) * proj)), b""

    def grads():
        return {"x": ops.sigmoid_backward(ops.sigmoid(x), proj)}

    return {"x": x}, loss, grads


def _bce_sigmoid_case(rng):
    z = rng.standard_normal((6, 1)) * 2
    y = rng.integers(0, 2, size=(6, 1)).astype(np.float64)

    def loss():
        return ops.bce_loss(ops.sigmoid(z), y), b""

    def grads():
        return {"z": ops.sigmoid_bce_backward(ops.sigmoid(z), y)}

    return {"z": z}, loss, grads


def _client_case(rng):
    client = M.ClientModel(LayerParams(rng.standard_normal((3, 3, 1, 3)), rng.standard_normal(3) * 0.1),
                           trainable=True, input_shape=(5, 5, 1))
    x = rng.uniform(0, 1, size=(2, 5, 5, 1))
    proj = rng.standard_normal((2, 5, 5, 3))
    arrays = {"k": client.conv.kernels, "b": client.conv.bias}

    def loss():
        z = ops.conv2d(x, client.conv)
        return float(np.sum(ops.relu(z) * proj)), _signature(z > 0)

    def grads():
        g = M.client_backward(client, x, proj)
        return {"k": g.kernels, "b": g.bias}

    return arrays, loss, grads


def small_server(rng, in_channels=3, side=6, blocks=(3, 4), hidden=5) -> M.ServerModel:
    convs, cin = [], in_channels
    for cout in blocks:
        convs.append(LayerParams(rng.standard_normal((3, 3, cin, cout)) * 0.5,
                                 rng.standard_normal(cout) * 0.1))
        cin = cout
    s = side
    for _ in blocks:
        s = -(-s // 2)
    flat = s * s * cin
    hid = LayerParams(rng.standard_normal((flat, hidden)) * 0.5, rng.standard_normal(hidden) * 0.1)
    out = LayerParams(rng.standard_normal((hidden, 1)) * 0.5, rng.standard_normal(1) * 0.1)
    return M.ServerModel(convs, hid, out, (side, side, in_channels))


def _server_signature(cache):
    parts = []
    for _, _, z, idx in cache["blocks"]:
        parts += [z > 0, idx.argmax]
    parts.append(cache["hz"] > 0)
    return _signature(*parts)


def _server_case(rng):
    server = small_server(rng)
    feats = rng.uniform(0, 1, size=(4, 6, 6, 3))
    labels = np.array([[0], [1], [1], [0]], dtype=np.uint8)
    slots = [M.Slot(0, 0, 3), M.Slot(1, 3, 4)]
    arrays = {"features": feats}
    for i, p in enumerate(server.params()):
        arrays[f"k{i}"], arrays[f"b{i}"] = p.kernels, p.bias

    def loss():
        pred, cache = M.server_forward(server, feats)
        return ops.bce_loss(pred, labels), _server_signature(cache)

    def grads():
        pred, cache = M.server_forward(server, feats)
        g, cut = M.server_backward(server, cache, pred, labels, slots)
        out = {"features": np.concatenate(cut)}
        for i, p in enumerate(g):
            out[f"k{i}"], out[f"b{i}"] = p.kernels, p.bias
        return out

    return arrays, loss, grads


def _split_chain_case(rng):
    """Client layer feeding the server, differentiated end to end."""
    server = small_server(rng)
    client = M.ClientModel(LayerParams(rng.standard_normal((3, 3, 1, 3)), rng.standard_normal(3) * 0.1),
                           trainable=True, input_shape=(6, 6, 1))
    x = rng.uniform(0, 1, size=(3, 6, 6, 1))
    labels = np.array([[1], [0], [1]], dtype=np.uint8)
    arrays = {"ck": client.conv.kernels, "cb": client.conv.bias}
    for i, p in enumerate(server.params()):
        arrays[f"k{i}"], arrays[f"b{i}"] = p.kernels, p.bias

    def forward():
        act = M.client_forward(client, x, labels, 0, 0)
        pred, cache = M.server_forward(server, act.features)
        return act, pred, cache

    def loss():
        _, pred, cache = forward()
        z = ops.conv2d(x, client.conv)
        return ops.bce_loss(pred, labels), _signature(z > 0) + _server_signature(cache)

    def grads():
        act, pred, cache = forward()
        g, cut = M.server_backward(server, cache, pred, labels, [M.Slot(0, 0, 3)])
        cg = M.client_backward(client, x, cut[0])
        out = {"ck": cg.kernels, "cb": cg.bias}
        for i, p in enumerate(g):
            out[f"k{i}"], out[f"b{i}"] = p.kernels, p.bias
        return out

    return arrays, loss, grads


CASES: dict[str, Callable] = {
    "conv2d": _conv_case,
    "conv2d_strided": _conv_strided_case,
    "dense": _dense_case,
    "relu": _relu_case,
    "maxpool2": _maxpool_case,
    "sigmoid": _sigmoid_case,
    "bce_sigmoid": _bce_sigmoid_case,
    "client": _client_case,
    "server": _server_case,
    "split_chain": _split_chain_case,
}


def grad_check(case: str, seed: int, eps: float = 1e-4, *, return_skipped: bool = False):
    """Max of |analytic - central difference| / max(1, |central difference|).

    Runs in float64 over every input and parameter coordinate of ``case``.
    """
    arrays, loss_fn, grad_fn = CASES[case](np.random.default_rng(seed))
    analytic = grad_fn()
    _, base_sig = loss_fn()
    worst, skipped = 0.0, 0
    for name, arr in arrays.items():
        assert arr.dtype == np.float64, name
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, sp = loss_fn()
            flat[i] = orig - eps
            lm, sm = loss_fn()
            flat[i] = orig
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return (worst, skipped) if return_skipped else worst
