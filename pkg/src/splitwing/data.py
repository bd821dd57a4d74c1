"""Image ingestion, ratio partitioning, round scheduling and synthetic data."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .ops import make_rng

SIDE = 64
MAX_CLIENTS = 16
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm")
MANIFEST = "manifest.csv"

PARTITION_STREAM = 11
SPLIT_STREAM = 12
SCHEDULE_STREAM = 13
SYNTH_STREAM = 14


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 64, 64, 1) float32 in [0, 1]
    labels: np.ndarray  # (N,) uint8; 1 = flame

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be 0 (non-flame) or 1 (flame)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitRatio:
    weights: tuple

    def __post_init__(self):
        w = tuple(self.weights)
        object.__setattr__(self, "weights", w)
        if not 1 <= len(w) <= MAX_CLIENTS:
            raise ValidationError(f"ratio needs 1..{MAX_CLIENTS} parts, got {len(w)}")
        if any(int(x) != x or x < 1 for x in w):
            raise ValidationError(f"ratio weights must be positive integers, got {w}")

    @classmethod
    def parse(cls, text: str) -> "SplitRatio":
        try:
            parts = [int(p) for p in text.strip().split(":")]
        except ValueError:
            raise ValidationError(f"cannot parse ratio {text!r}; use colon syntax like 7:2:1") from None
        return cls(tuple(parts))

    def __len__(self) -> int:
        return len(self.weights)

    def __str__(self) -> str:
        return ":".join(map(str, self.weights))


class Shard(NamedTuple):
    client_id: int
    indices: np.ndarray


class Round(NamedTuple):
    indices: list  # per client, in client order
    full: bool  # sizes sum to the configured batch

    @property
    def sizes(self) -> list:
        return [len(i) for i in self.indices]


# ---------------------------------------------------------------------------
# apportionment

def apportion(total: int, weights: Sequence[int]) -> list:
    """Largest-remainder split of ``total`` proportional to integer ``weights``.

    Remainders are compared exactly; ties go to the lower index.
    """
    weights = [int(w) for w in weights]
    wsum = sum(weights)
    if wsum <= 0 or any(w < 0 for w in weights):
        raise ValidationError(f"weights must be non-negative with a positive sum, got {weights}")
    seats = [total * w // wsum for w in weights]
    rems = [total * w % wsum for w in weights]
    order = sorted(range(len(weights)), key=lambda k: (-rems[k], k))
    for k in order[: total - sum(seats)]:
        seats[k] += 1
    return seats


def _max_flow_feasible(need_rows, need_cols, allowed) -> bool:
    """Is there a 0/1 matrix on ``allowed`` cells with the given row/column sums?"""
    rows, cols = len(need_rows), len(need_cols)
    # residual capacities: source=0, rows 1..r, cols r+1..r+c, sink=r+c+1
    size = rows + cols + 2
    cap = [[0] * size for _ in range(size)]
    sink = size - 1
    for r in range(rows):
        cap[0][1 + r] = need_rows[r]
        for c in range(cols):
            if allowed[r][c]:
                cap[1 + r][1 + rows + c] = 1
    for c in range(cols):
        cap[1 + rows + c][sink] = need_cols[c]
    flow = 0
    while True:
        parent = [-1] * size
        parent[0] = 0
        stack = [0]
        while stack and parent[sink] < 0:
            u = stack.pop()
            for v in range(size):
                if parent[v] < 0 and cap[u][v] > 0:
                    parent[v] = u
                    stack.append(v)
        if parent[sink] < 0:
            break
        v, bottleneck = sink, None
        while v:
            u = parent[v]
            bottleneck = cap[u][v] if bottleneck is None else min(bottleneck, cap[u][v])
            v = u
        v = sink
        while v:
            u = parent[v]
            cap[u][v] -= bottleneck
            cap[v][u] += bottleneck
            v = u
        flow += bottleneck
    return flow == sum(need_rows) == sum(need_cols)


def class_allocation(class_counts: Sequence[int], weights: Sequence[int]) -> list:
    """Per-class, per-client sample counts.

    Client totals are the largest-remainder apportionment of the whole set,
    and every cell stays strictly within 1 of its exact proportional quota
    (a controlled rounding of the class x client table).
    """
    wsum = sum(weights)
    n_classes, n_clients = len(class_counts), len(weights)
    totals = apportion(sum(class_counts), weights)
    alloc = [[cnt * w // wsum for w in weights] for cnt in class_counts]
    rem = [[cnt * w % wsum for w in weights] for cnt in class_counts]
    need_rows = [class_counts[c] - sum(alloc[c]) for c in range(n_classes)]
    need_cols = [totals[k] - sum(alloc[c][k] for c in range(n_classes)) for k in range(n_clients)]
    allowed = [[rem[c][k] > 0 for k in range(n_clients)] for c in range(n_classes)]
    if not _max_flow_feasible(need_rows, need_cols, allowed):
        # unreachable for proportional quotas; kept so the result is always a valid partition
        return [apportion(cnt, weights) for cnt in class_counts]
    cells = sorted(((c, k) for c in range(n_classes) for k in range(n_clients) if allowed[c][k]),
                   key=lambda ck: (-rem[ck[0]][ck[1]], ck[1], ck[0]))
    for c, k in cells:
        allowed[c][k] = False
        if need_rows[c] == 0 or need_cols[k] == 0:
            continue
        need_rows[c] -= 1
        need_cols[k] -= 1
        if _max_flow_feasible(need_rows, need_cols, allowed):
            alloc[c][k] += 1
        else:
            need_rows[c] += 1
            need_cols[k] += 1
    return alloc


# ---------------------------------------------------------------------------
# partitioning and scheduling

def _as_labels(data) -> np.ndarray:
    return np.asarray(data.labels if isinstance(data, Dataset) else data)


def partition_by_ratio(data, ratio: SplitRatio | Sequence[int], seed: int,
                       indices: Sequence[int] | None = None) -> list:
    """Seeded, label-stratified shards of ``data`` (a Dataset or a label array).

    ``indices`` restricts the partition to a subset (e.g. the training split);
    shard indices always refer to the parent dataset.
    """
    weights = ratio.weights if isinstance(ratio, SplitRatio) else SplitRatio(tuple(ratio)).weights
    labels = _as_labels(data)
    pool = np.arange(labels.shape[0]) if indices is None else np.asarray(indices, dtype=np.intp)
    if pool.size < len(weights):
        raise ValidationError(f"{len(weights)} clients but only {pool.size} samples")
    pool = make_rng(seed, PARTITION_STREAM).permutation(pool)
    classes = sorted(set(labels[pool].tolist()))
    by_class = [pool[labels[pool] == c] for c in classes]
    alloc = class_allocation([len(b) for b in by_class], weights)
    parts = [[] for _ in weights]
    for c, members in enumerate(by_class):
        start = 0
        for k, take in enumerate(alloc[c]):
            parts[k].append(members[start:start + take])
            start += take
    return [Shard(k, np.sort(np.concatenate(p)).astype(np.intp)) for k, p in enumerate(parts)]


def train_test_split(data, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split; per class the test count is the rounded fraction."""
    frac = Fraction(test_fraction).limit_denominator(1000)
    if not 0 <= frac < 1:
        raise ValidationError(f"test fraction must be in [0, 1), got {test_fraction}")
    labels = _as_labels(data)
    perm = make_rng(seed, SPLIT_STREAM).permutation(labels.shape[0])
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        members = perm[labels[perm] == c]
        n_train, _ = apportion(len(members), [frac.denominator - frac.numerator, frac.numerator])
        train.append(members[:n_train])
        test.append(members[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def schedule_epoch(shards: Sequence[Shard], batch: int, epoch: int, seed: int,
                   weights: Sequence[int] | None = None, shuffle: bool = True) -> list:
    """All rounds of one epoch.

    Full rounds draw ``apportion(batch, weights)`` samples per client until
    some client cannot supply its share. The leftovers go out in tail rounds
    of at most ``batch`` samples, split in proportion to what each client has
    left. Every sample is used exactly once per epoch.
    """
    if batch < 1:
        raise ValidationError(f"batch must be positive, got {batch}")
    weights = [len(s.indices) for s in shards] if weights is None else list(weights)
    if len(weights) != len(shards):
        raise ValidationError(f"{len(weights)} weights for {len(shards)} shards")
    order = []
    for s in shards:
        idx = np.asarray(s.indices, dtype=np.intp)
        if shuffle:
            idx = make_rng(seed, SCHEDULE_STREAM, epoch, s.client_id).permutation(idx)
        order.append(idx)
    sizes = apportion(batch, weights)
    n_full = min((len(o) // b for o, b in zip(order, sizes) if b > 0), default=0)
    rounds = []
    pos = [0] * len(order)
    for _ in range(n_full):
        rounds.append(Round([o[p:p + b] for o, p, b in zip(order, pos, sizes)], True))
        pos = [p + b for p, b in zip(pos, sizes)]
    left = [len(o) - p for o, p in zip(order, pos)]
    while sum(left):
        take = apportion(min(batch, sum(left)), left)
        rounds.append(Round([o[p:p + t] for o, p, t in zip(order, pos, take)], sum(take) == batch))
        pos = [p + t for p, t in zip(pos, take)]
        left = [l - t for l, t in zip(left, take)]
    return rounds


def schedule_round(shards: Sequence[Shard], batch: int, round_index: int, epoch: int, seed: int,
                   weights: Sequence[int] | None = None) -> list:
    """Per-client index arrays for one round of one epoch."""
    rounds = schedule_epoch(shards, batch, epoch, seed, weights)
    if not 0 <= round_index < len(rounds):
        raise ValidationError(f"epoch {epoch} has {len(rounds)} rounds; no round {round_index}")
    return rounds[round_index].indices


# ---------------------------------------------------------------------------
# images

def _to_unit(gray: np.ndarray) -> np.ndarray:
    """float64 0..255 grayscale (H, W) -> float32 (H, W, 1) in [0, 1]."""
    return (gray / 255.0).astype(np.float32)[..., None]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping (2-D float64)."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top, bot = img[r0], img[r1]
    rows = top + fr[:, None] * (bot - top)
    left, right = rows[:, c0], rows[:, c1]
    return left + fc[None, :] * (right - left)


def _parse_pgm(data: bytes) -> np.ndarray:
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError("non-numeric PGM header field") from None
    if w == 0 or h == 0:
        raise ValidationError("image has a zero dimension")
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PGM is supported (maxval {maxval})")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise FormatError("PGM raster shorter than its header claims")
    gray = np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64)
    return gray if maxval == 255 else gray * (255.0 / maxval)


def _decode_with_pillow(data: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode image: {exc}") from None
    if img.width == 0 or img.height == 0:
        raise ValidationError("image has a zero dimension")
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64)
    if img.mode in ("I;16", "I;16B", "I"):
        return np.asarray(img, dtype=np.float64) * (255.0 / 65535.0)
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def load_image(data: bytes, format: str | None = None) -> np.ndarray:
    """Decode PNG/JPEG/PGM bytes to a (64, 64, 1) float32 tensor in [0, 1].

    Colour images are reduced with BT.601 luma, then resized bilinearly.
    """
    if format is None:
        format = "pgm" if data[:2] == b"P5" else "pillow"
    if format == "pgm":
        if data[:2] != b"P5":
            raise FormatError("not a binary (P5) PGM")
        gray = _parse_pgm(data)
    elif format in ("png", "jpeg", "jpg", "pillow"):
        gray = _decode_with_pillow(data)
    else:
        raise FormatError(f"unsupported image format {format!r}")
    return _to_unit(resize_bilinear(gray, SIDE, SIDE))


def load_directory(root) -> Dataset:
    """Read ``root/flame/*`` (label 1) and ``root/nonflame/*`` (label 0).

    If ``root/manifest.csv`` exists its row order is kept; otherwise
    non-flame files come first, each class sorted by file name.
    """
    root = Path(root)
    if (root / MANIFEST).is_file():
        return load_manifest(root)
    images, labels = [], []
    for label, sub in ((0, "nonflame"), (1, "flame")):
        d = root / sub
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
        for f in sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            images.append(load_image(f.read_bytes()))
            labels.append(label)
    if not images:
        raise ValidationError(f"no images found under {root}")
    return Dataset(np.stack(images), np.array(labels, dtype=np.uint8))


def load_manifest(root) -> Dataset:
    root = Path(root)
    images, labels = [], []
    with open(root / MANIFEST, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(load_image((root / row["file"]).read_bytes()))
            labels.append(int(row["label"]))
    if not images:
        raise ValidationError(f"{root / MANIFEST} lists no images")
    return Dataset(np.stack(images), np.array(labels, dtype=np.uint8))


def write_synthetic(root, count: int, seed: int) -> list:
    """PGM files under ``flame/`` and ``nonflame/`` plus ``manifest.csv``; returns written paths."""
    root = Path(root)
    images, labels = synthetic_u8(count, seed)
    for sub in ("flame", "nonflame"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    for i, (img, lab) in enumerate(zip(images, labels)):
        rel = f"{'flame' if lab else 'nonflame'}/{i:05d}.pgm"
        (root / rel).write_bytes(encode_pgm(img))
        rows.append((rel, int(lab)))
        written.append(root / rel)
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("file", "label"))
        w.writerows(rows)
    written.append(root / MANIFEST)
    return written


def encode_pgm(gray_u8: np.ndarray) -> bytes:
    h, w = gray_u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray_u8, dtype=np.uint8).tobytes()


# ---------------------------------------------------------------------------
# synthetic flames

def synthetic_image(label: int, rng: np.random.Generator) -> np.ndarray:
    """One 64x64 uint8 image: uniform noise, plus a bright Gaussian blob if label == 1."""
    img = rng.uniform(0.0, 0.45, size=(SIDE, SIDE))
    if label:
        cy, cx = rng.uniform(16, 48, size=2)
        sigma = rng.uniform(9, 14)
        amp = rng.uniform(0.55, 0.85)
        yy, xx = np.mgrid[0:SIDE, 0:SIDE]
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def synthetic_u8(count: int, seed: int):
    """Raw uint8 images and labels behind :func:`synthetic_dataset`."""
    if count < 2:
        raise ValidationError("synthetic dataset needs at least 2 samples")
    labels = make_rng(seed, SYNTH_STREAM).permutation(np.arange(count) % 2).astype(np.uint8)
    images = np.stack([synthetic_image(int(lab), make_rng(seed, SYNTH_STREAM, i + 1))
                       for i, lab in enumerate(labels)])
    return images, labels


def synthetic_dataset(count: int, seed: int) -> Dataset:
    images, labels = synthetic_u8(count, seed)
    return Dataset(np.stack([_to_unit(im.astype(np.float64)) for im in images]), labels)
