"""Synthetic tasks, IDX/CSV ingestion, and Dirichlet non-IID partitioning with
per-client test sets that mirror each client's training label ratios."""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .model import Batch


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SplitConfig:
    clients: int
    alpha: float
    seed: int = 0
    test_per_client: int = 100

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("need at least one client")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.test_per_client < 0:
            raise ValueError("test_per_client must be nonnegative")


@dataclass
class FederatedDataset:
    train: Batch
    test: Batch
    train_parts: List[np.ndarray]
    test_parts: List[np.ndarray]

    @property
    def clients(self) -> int:
        return len(self.train_parts)

    def client_train(self, i: int) -> Batch:
        return self.train.subset(self.train_parts[i])

    def client_test(self, i: int) -> Batch:
        return self.test.subset(self.test_parts[i])


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Leftover units go to the largest fractional remainders, ties to the lowest index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    if total == 0 or s <= 0:
        return np.zeros(weights.shape, dtype=np.int64)
    quota = weights / s * total
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def _fill_counts(props, need, avail):
    """Class counts for one client: proportional to ``props``, capped by ``avail``.

    Shortfall from exhausted classes is re-apportioned over the classes that
    still have samples; when the proportion vector puts no mass on any of
    them, the remaining availability is used as the weight instead.
    """
    counts = np.zeros_like(avail)
    left = avail.copy()
    while need > 0:
        open_ = left > 0
        weights = np.where(open_, props, 0.0)
        if weights.sum() <= 0:
            weights = left.astype(np.float64)
        take = np.minimum(largest_remainder(weights, need), left)
        if take.sum() == 0:
            # every rounded share hit a cap of zero; give one unit to the heaviest open class
            take = np.zeros_like(left)
            take[int(np.argmax(np.where(open_, weights, -1.0)))] = 1
        counts += take
        left -= take
        need -= int(take.sum())
    return counts


def dirichlet_split(labels, cfg: SplitConfig) -> List[np.ndarray]:
    """Partition sample indices across clients with Dirichlet label skew.

    Each client draws a class-proportion vector from ``Dirichlet(alpha * 1)``
    and, in client order, takes its share of samples (``N / M`` each, remainder
    to the lowest indices) from the remaining pool following that vector.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if cfg.clients > n:
        raise ValueError(f"{cfg.clients} clients but only {n} samples")
    classes = int(labels.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1A]))
    props = rng.dirichlet(np.full(classes, cfg.alpha), size=cfg.clients)
    props = np.nan_to_num(props, nan=0.0)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(classes)]
    avail = np.array([len(p) for p in pools], dtype=np.int64)
    cursor = np.zeros(classes, dtype=np.int64)
    sizes = largest_remainder(np.ones(cfg.clients), n)
    parts = []
    for i in range(cfg.clients):
        counts = _fill_counts(props[i], int(sizes[i]), avail - cursor)
        idx = []
        for c in np.flatnonzero(counts):
            idx.append(pools[c][cursor[c]:cursor[c] + counts[c]])
            cursor[c] += counts[c]
        parts.append(np.sort(np.concatenate(idx)) if idx else np.zeros(0, dtype=np.int64))
    return parts


def iid_split(n: int, clients: int, seed: int) -> List[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D]))
    perm = rng.permutation(n)
    sizes = largest_remainder(np.ones(clients), n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(perm[bounds[i]:bounds[i + 1]]) for i in range(clients)]


def mirror_test_split(labels, train_parts, test_labels, test_per_client: int, seed: int) -> List[np.ndarray]:
    """Per-client test indices drawn from the test pool with each client's
    training label ratio (largest-remainder rounding)."""
    labels = np.asarray(labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    classes = max(int(labels.max()), int(test_labels.max())) + 1
    pools = [np.flatnonzero(test_labels == c) for c in range(classes)]
    out = []
    for i, part in enumerate(train_parts):
        ratio = np.bincount(labels[part], minlength=classes)
        counts = largest_remainder(ratio, test_per_client)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57, i]))
        idx = []
        for c in np.flatnonzero(counts):
            if counts[c] > len(pools[c]):
                raise DataError(
                    f"class {c} has {len(pools[c])} test samples, client {i} needs {counts[c]}")
            idx.append(rng.choice(pools[c], size=counts[c], replace=False))
        out.append(np.sort(np.concatenate(idx)) if idx else np.zeros(0, dtype=np.int64))
    return out


def make_synthetic(classes: int, dim: int, per_class: int, separation: float, seed: int,
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian class clusters with unit covariance.

    Class means are ``separation / sqrt(2)`` times distinct coordinate axes
    (with random signs) after a seeded rotation, so every pair of means is
    exactly ``separation`` apart. When ``classes > dim`` the means are random
    directions rescaled until the minimum pairwise distance reaches ``separation``.
    """
    if min(classes, dim, per_class) < 1 or separation < 0:
        raise ValueError("counts must be >= 1 and separation >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    if classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        means = q[:, :classes].T * (separation / np.sqrt(2.0))
    else:
        means = rng.normal(size=(classes, dim))
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        dmin = d[np.triu_indices(classes, 1)].min()
        means *= separation / dmin
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + rng.normal(size=(classes * per_class, dim))
    order = rng.permutation(labels.shape[0])
    return features[order], labels[order]


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError("file too short for an IDX header", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim < 1:
        raise ParseError(f"bad IDX magic 0x{raw[:4].hex()}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension block", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_DTYPES[dtype_code])
    expected = header + int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise ParseError(f"IDX payload size mismatch: expected {expected} bytes, got {len(raw)}",
                         min(len(raw), expected))
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Read an IDX image file (magic 0x00000803) and label file (0x00000801).

    Pixels are scaled to [0, 1] and flattened per image.
    """
    for path, want in ((images_path, 3), (labels_path, 1)):
        head = Path(path).read_bytes()[:4]
        if len(head) < 4 or head[:2] != b"\x00\x00" or head[3] != want:
            raise ParseError(f"{path}: expected IDX magic with {want} dimension(s), got 0x{head.hex()}", 0)
    images = _read_idx_array(images_path)
    labels = _read_idx_array(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    feats = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        feats /= 255.0
    return feats, labels.astype(np.int64)


def load_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """Headerless numeric CSV, label in the last column.

    Features are min-max scaled to [0, 1] using the global min and max.
    """
    raw = Path(path).read_bytes()
    rows = []
    width = None
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                row = [float(tok) for tok in text.split(b",")]
            except ValueError:
                raise ParseError(f"non-numeric field in {path}", offset) from None
            if width is None:
                width = len(row)
            if len(row) != width or width < 2:
                raise ParseError(f"row has {len(row)} fields, expected {width}", offset)
            rows.append(row)
        offset += len(line)
    if not rows:
        raise ParseError(f"{path} contains no rows", 0)
    arr = np.asarray(rows, dtype=np.float64)
    labels = arr[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise ParseError("labels must be nonnegative integers", 0)
    feats = arr[:, :-1]
    lo, hi = feats.min(), feats.max()
    feats = (feats - lo) / (hi - lo) if hi > lo else np.zeros_like(feats)
    return feats, labels.astype(np.int64)


def label_entropy(labels, parts, classes: int) -> float:
    """Mean Shannon entropy (nats) of the per-client label distributions."""
    labels = np.asarray(labels)
    ents = []
    for part in parts:
        if len(part) == 0:
            continue
        p = np.bincount(labels[part], minlength=classes) / len(part)
        p = p[p > 0]
        ents.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(ents))
