"""Shared test utilities: valid envelope generation and frame mutation."""
import numpy as np

from splitwing import transport as T
from splitwing.model import CutActivation


def random_envelope(rng: np.random.Generator) -> T.Envelope:
    kind = int(rng.integers(1, 5))
    cid, rid = int(rng.integers(0, 1 << 16)), int(rng.integers(0, 1 << 32))
    if kind == T.MsgType.FEATURE_MAP:
        b = int(rng.integers(0, 4))
        h = int(rng.integers(1, 5))
        feats = rng.standard_normal((b, h, h, int(rng.integers(1, 4)))).astype(np.float32)
        act = CutActivation(feats, rng.integers(0, 2, (b, 1)).astype(np.uint8), cid, rid)
        return T.feature_envelope(act)
    if kind == T.MsgType.CUT_GRADIENT:
        shape = tuple(int(d) for d in rng.integers(0, 4, size=int(rng.integers(0, 5))))
        dtype = (np.float32, np.float64)[int(rng.integers(0, 2))]
        return T.gradient_envelope(cid, rid, rng.standard_normal(shape).astype(dtype))
    body = {"op": "forward", "indices": rng.integers(0, 100, int(rng.integers(0, 6))).tolist(),
            "x": float(rng.standard_normal())}
    return T.json_envelope(T.MsgType(kind), cid, rid, body)


def mutate(rng: np.random.Generator, frame: bytes) -> bytes:
    """One random corruption: bit flips, byte overwrite, truncation, extension or splice."""
    buf = bytearray(frame)
    op = int(rng.integers(0, 6))
    if op == 0 and buf:
        for _ in range(int(rng.integers(1, 4))):
            i = int(rng.integers(0, len(buf)))
            buf[i] ^= 1 << int(rng.integers(0, 8))
    elif op == 1 and buf:
        i = int(rng.integers(0, min(len(buf), T.HEADER_SIZE + 12)))
        buf[i] = int(rng.integers(0, 256))
    elif op == 2:
        del buf[int(rng.integers(0, len(buf) + 1)):]
    elif op == 3:
        buf += rng.integers(0, 256, int(rng.integers(1, 9))).astype(np.uint8).tobytes()
    elif op == 4 and len(buf) > T.HEADER_SIZE:
        # rewrite a length-bearing region: payload_len or a tensor dim
        i = int(rng.choice([12, T.HEADER_SIZE + 1, T.HEADER_SIZE + 5]))
        buf[i:i + 4] = int(rng.integers(0, 1 << 32)).to_bytes(4, "little")
        del buf[len(frame):]
    else:
        i, j = sorted(int(x) for x in rng.integers(0, len(buf) + 1, 2))
        buf[i:j] = rng.integers(0, 256, j - i).astype(np.uint8).tobytes()
    return bytes(buf)


def decode_fully(frame: bytes):
    env = T.decode(frame)
    return env, T.decode_payload(env)
