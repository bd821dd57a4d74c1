"""Dense NHWC tensor operations with hand-written backward passes.

Tensors are plain numpy arrays. Production paths run in float32; gradient
checks run the same code in float64. Every matrix product goes through
:func:`gemm`, which feeds BLAS fixed-shape row chunks so that a sample's
result never depends on which other samples share its batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, ValidationError

BCE_EPS = 1e-7
GEMM_ROWS = 128

DTYPES = {"f32": np.float32, "f64": np.float64}


def dtype_for(precision: str) -> type:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValidationError(f"unknown precision {precision!r}; expected f32 or f64") from None


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream named by ``keys`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class LayerParams:
    """Kernel and bias of a conv (Kh, Kw, Cin, Cout) or dense (F, G) layer."""

    kernels: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.bias.ndim != 1 or self.kernels.shape[-1] != self.bias.shape[0]:
            raise DimensionError(
                f"kernel {self.kernels.shape} and bias {self.bias.shape} disagree on output channels"
            )

    @property
    def dtype(self):
        return self.kernels.dtype

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.kernels.astype(dtype), self.bias.astype(dtype))

    def copy(self) -> "LayerParams":
        return LayerParams(self.kernels.copy(), self.bias.copy())

    def zeros_like(self) -> "LayerParams":
        return LayerParams(np.zeros_like(self.kernels), np.zeros_like(self.bias))

    def __add__(self, other: "LayerParams") -> "LayerParams":
        return LayerParams(self.kernels + other.kernels, self.bias + other.bias)

    def allclose(self, other: "LayerParams", atol: float = 0.0) -> bool:
        return bool(
            np.allclose(self.kernels, other.kernels, rtol=0, atol=atol)
            and np.allclose(self.bias, other.bias, rtol=0, atol=atol)
        )

    def equal(self, other: "LayerParams") -> bool:
        return bool(
            np.array_equal(self.kernels, other.kernels) and np.array_equal(self.bias, other.bias)
        )


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains NaN or Inf")


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` evaluated in GEMM_ROWS-row chunks (last chunk zero padded).

    OpenBLAS switches kernels on the row count (gemv for one row, small-matrix
    paths for short inputs), which changes rounding. Fixing the call shape
    keeps each output row a function of its input row only.
    """
    a = np.ascontiguousarray(a)
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    full = m - m % GEMM_ROWS
    for start in range(0, full, GEMM_ROWS):
        np.matmul(a[start:start + GEMM_ROWS], b, out=out[start:start + GEMM_ROWS])
    if full < m:
        tail = np.zeros((GEMM_ROWS, a.shape[1]), dtype=a.dtype)
        tail[: m - full] = a[full:]
        out[full:] = (tail @ b)[: m - full]
    return out


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        if h < kh or w < kw:
            raise DimensionError(f"valid conv needs input >= kernel, got {h}x{w} vs {kh}x{kw}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValidationError(f"padding must be 'same' or 'valid', not {padding!r}")
    return oh, ow, pads


def _check_conv_args(x, params, stride):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4 (N,H,W,C), got shape {x.shape}")
    if params.kernels.ndim != 4:
        raise DimensionError(f"conv2d kernel must be rank 4, got shape {params.kernels.shape}")
    if params.kernels.shape[2] != x.shape[3]:
        raise DimensionError(
            f"input {x.shape} has {x.shape[3]} channels but kernel {params.kernels.shape} "
            f"expects {params.kernels.shape[2]}"
        )
    if int(stride) != stride or stride < 1:
        raise ValidationError(f"stride must be a positive int, got {stride!r}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    """Rows of (kh, kw, cin)-ordered patches, one row per output position."""
    n, h, w, c = x.shape
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    if any((pt, pb, pl, pr)):
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return cols, (oh, ow)


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, padding: str = "same",
           *, return_cols: bool = False):
    _check_conv_args(x, params, stride)
    _check_finite(x, "conv2d input")
    kh, kw, cin, cout = params.kernels.shape
    cols, (oh, ow) = im2col(x, kh, kw, stride, padding)
    out = gemm(cols, params.kernels.reshape(kh * kw * cin, cout))
    out += params.bias
    out = out.reshape(x.shape[0], oh, ow, cout)
    return (out, cols) if return_cols else out


def conv2d_backward(x, params, upstream, stride=1, padding="same", *, need_input_grad=True,
                    cols=None):
    """Gradients of a conv2d w.r.t. its input and parameters.

    ``cols`` may be the patch matrix returned by ``conv2d(..., return_cols=True)``
    to skip rebuilding it. With ``need_input_grad=False`` the first element of
    the result is None.
    """
    _check_conv_args(x, params, stride)
    n, h, w, _ = x.shape
    kh, kw, cin, cout = params.kernels.shape
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    if upstream.shape != (n, oh, ow, cout):
        raise DimensionError(
            f"upstream gradient {upstream.shape} does not match conv output {(n, oh, ow, cout)}"
        )
    if cols is None:
        cols, _ = im2col(x, kh, kw, stride, padding)
    g = upstream.reshape(n * oh * ow, cout)
    grad_k = (cols.T @ g).reshape(kh, kw, cin, cout)
    grad_b = g.sum(axis=0)
    grads = LayerParams(grad_k, grad_b)
    if not need_input_grad:
        return None, grads

    dcols = gemm(g, params.kernels.reshape(kh * kw * cin, cout).T)
    dcols = dcols.reshape(n, oh, ow, kh, kw, cin)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, cin), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += \
                dcols[:, :, :, i, j, :]
    return dxp[:, pt:pt + h, pl:pl + w], grads


def conv2d_direct(x: np.ndarray, params: LayerParams, stride: int = 1, padding: str = "same"):
    """Reference convolution: explicit loops, one scalar multiply-add at a time."""
    _check_conv_args(x, params, stride)
    n, h, w, _ = x.shape
    kh, kw, cin, cout = params.kernels.shape
    oh, ow, (pt, _, pl, _) = _conv_geometry(h, w, kh, kw, stride, padding)
    k = params.kernels
    out = np.zeros((n, oh, ow, cout), dtype=np.result_type(x, k))
    zero = out.dtype.type(0)
    for b in range(n):
        for r in range(oh):
            for c in range(ow):
                for o in range(cout):
                    acc = zero
                    for i in range(kh):
                        for j in range(kw):
                            y, xx = r * stride + i - pt, c * stride + j - pl
                            if 0 <= y < h and 0 <= xx < w:
                                for ci in range(cin):
                                    acc = acc + x[b, y, xx, ci] * k[i, j, ci, o]
                    out[b, r, c, o] = acc + params.bias[o]
    return out


# ---------------------------------------------------------------------------
# elementwise and pooling

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


class PoolIndices(NamedTuple):
    argmax: np.ndarray  # window offset 0..3 in row-major order, per output element
    input_shape: tuple


def _pool_quads(x):
    return x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]


def maxpool2(x: np.ndarray):
    """2x2/stride-2 max pool. Odd H or W is padded bottom/right with -inf."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 input must be rank 4 (N,H,W,C), got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)), constant_values=-np.inf)
    a, b, cc, d = _pool_quads(x)
    # window offsets in row-major order; >= keeps the first maximum on ties
    top_b = b > a
    top = np.where(top_b, b, a)
    bot_d = d > cc
    bot = np.where(bot_d, d, cc)
    use_bot = bot > top
    out = np.where(use_bot, bot, top)
    arg = np.where(use_bot, 2 + bot_d, top_b.astype(np.int8)).astype(np.int8)
    return out, PoolIndices(arg, (n, h, w, c))


def maxpool2_backward(indices: PoolIndices, upstream: np.ndarray) -> np.ndarray:
    n, h, w, c = indices.input_shape
    h2, w2 = -(-h // 2), -(-w // 2)
    if upstream.shape != (n, h2, w2, c):
        raise DimensionError(f"upstream gradient {upstream.shape} does not match pool output "
                             f"{(n, h2, w2, c)}")
    grad = np.zeros((n, 2 * h2, 2 * w2, c), dtype=upstream.dtype)
    for k, quad in enumerate(_pool_quads(grad)):
        np.copyto(quad, upstream, where=indices.argmax == k)
    return grad[:, :h, :w]


# ---------------------------------------------------------------------------
# dense

def dense(x: np.ndarray, params: LayerParams) -> np.ndarray:
    if x.ndim != 2 or params.kernels.ndim != 2 or x.shape[1] != params.kernels.shape[0]:
        raise DimensionError(f"dense input {x.shape} incompatible with weights {params.kernels.shape}")
    _check_finite(x, "dense input")
    out = gemm(x, params.kernels)
    out += params.bias
    return out


def dense_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray, *,
                   need_input_grad=True):
    if upstream.shape != (x.shape[0], params.kernels.shape[1]):
        raise DimensionError(f"upstream gradient {upstream.shape} does not match dense output "
                             f"{(x.shape[0], params.kernels.shape[1])}")
    grads = LayerParams(x.T @ upstream, upstream.sum(axis=0))
    if not need_input_grad:
        return None, grads
    return gemm(upstream, params.kernels.T), grads


# ---------------------------------------------------------------------------
# output and loss

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(out: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * out * (1 - out)


def _check_labels(pred, labels):
    if pred.shape != labels.shape:
        raise DimensionError(f"pred {pred.shape} and labels {labels.shape} differ in shape")
    if pred.size == 0:
        raise ValidationError("loss of an empty batch is undefined")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")


def bce_loss(pred: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy; pred is clamped to [eps, 1-eps] in float64."""
    _check_labels(pred, labels)
    p = np.clip(pred.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    y = labels.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def bce_backward(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(bce_loss)/d(pred); zero where the clamp is active."""
    _check_labels(pred, labels)
    y = labels.astype(pred.dtype)
    inside = (pred >= BCE_EPS) & (pred <= 1 - BCE_EPS)
    p = np.clip(pred, BCE_EPS, 1 - BCE_EPS)
    g = (p - y) / (p * (1 - p)) / pred.shape[0]
    return np.where(inside, g, 0).astype(pred.dtype, copy=False)


def sigmoid_bce_backward(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of bce_loss(sigmoid(z)) w.r.t. the logits z, given pred = sigmoid(z).

    Uses the closed form (p - y) / N, which keeps a learning signal when the
    sigmoid has saturated to exactly 0 or 1 in float32.
    """
    _check_labels(pred, labels)
    return ((pred - labels.astype(pred.dtype)) / pred.shape[0]).astype(pred.dtype, copy=False)


def sgd_step(params: LayerParams, grads: LayerParams, lr: float) -> LayerParams:
    if params.kernels.shape != grads.kernels.shape or params.bias.shape != grads.bias.shape:
        raise DimensionError(
            f"params {params.kernels.shape}/{params.bias.shape} and grads "
            f"{grads.kernels.shape}/{grads.bias.shape} are not congruent"
        )
    if lr == 0:
        return params
    return LayerParams(params.kernels - lr * grads.kernels, params.bias - lr * grads.bias)
