"""How much of the raw image survives the client layer.

Two numbers summarise it: the normalized cross-correlation of the raw image
with each feature channel, and the PSNR of the best affine least-squares
reconstruction of the raw image from all channels at once.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .data import resize_bilinear
from .model import ClientModel
from .ops import LayerParams

PSNR_CAP_MSE = 1e-10  # caps PSNR at 100 dB for exact reconstructions


@dataclass
class DistortionReport:
    ncc: list
    max_abs_ncc: float
    psnr: float
    constant_input: bool = False
    degenerate_channels: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def ncc(a: np.ndarray, b: np.ndarray):
    """Normalized cross-correlation of two equally sized images, or None if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def identity_client(filters: int = 16) -> ClientModel:
    """Client whose first channel copies the image and whose other channels are zero."""
    k = np.zeros((3, 3, 1, filters), dtype=np.float32)
    k[1, 1, 0, 0] = 1.0
    return ClientModel(LayerParams(k, np.zeros(filters, dtype=np.float32)))


def client_features(client: ClientModel, image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64).reshape(1, *client.input_shape)
    conv = client.conv.astype(np.float64)
    return ops.relu(ops.conv2d(x, conv))[0]


def distortion_report(image: np.ndarray, client: ClientModel):
    """Returns ``(report, features)`` for a single (H, W[, 1]) image in [0, 1]."""
    raw = np.asarray(image, dtype=np.float64).reshape(client.input_shape[:2])
    feats = client_features(client, raw)
    h, w = raw.shape
    channels = [resize_bilinear(feats[..., c], h, w) for c in range(feats.shape[-1])]
    scores, degenerate = [], []
    for c, ch in enumerate(channels):
        r = ncc(raw, ch)
        if r is None:
            degenerate.append(c)
            r = 0.0
        scores.append(r)
    design = np.column_stack([*(ch.ravel() for ch in channels), np.ones(h * w)])
    coef, *_ = np.linalg.lstsq(design, raw.ravel(), rcond=None)
    mse = float(np.mean((design @ coef - raw.ravel()) ** 2))
    psnr = float(10 * np.log10(1.0 / max(mse, PSNR_CAP_MSE)))
    constant = bool(raw.max() == raw.min())
    report = DistortionReport(scores, max(abs(s) for s in scores), psnr, constant, degenerate)
    return report, feats


def render_channel(channel: np.ndarray) -> np.ndarray:
    """Min-max normalise one channel to uint8; constant channels render black."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi == lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    return np.round((channel - lo) / (hi - lo) * 255).astype(np.uint8)
