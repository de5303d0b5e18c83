"""Datasets, training pair construction, synthetic benchmarks and embedding files."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBED_MAGIC = b"RSND"
EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
HAS_LABELS = 1
HAS_DOMAINS = 2


class DataError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = self.features.reshape(0, 0)
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.domain_ids is None:
            self.domain_ids = np.zeros(n, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if not (n == len(self.labels) == len(self.domain_ids)):
            raise DataError(
                f"length mismatch: {n} rows, {len(self.labels)} labels, {len(self.domain_ids)} domains")
        if n and self.labels.min() < 0:
            raise DataError("class ids must be non-negative")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN/Inf")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def classes(self):
        return np.unique(self.labels)

    def subset(self, mask, name=None):
        return LabeledDataset(self.features[mask], self.labels[mask], self.domain_ids[mask],
                              name or self.name)

    def equals(self, other):
        return (self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.domain_ids, other.domain_ids))


# ---------------------------------------------------------------- pairs


@dataclass
class PairBatch:
    anchors: np.ndarray
    partners: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def create_pairs(dataset, seed):
    """One positive and one negative partner per anchor, then shuffled.

    Returns an int64 array of shape (2n, 3) with rows (anchor, partner, same).
    The positive partner never equals the anchor unless its class is a
    singleton. ``seed`` may be an int or a ``np.random.Generator``; passing a
    generator advances its state, which is how successive epochs differ.
    """
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    n = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise DataError("need at least two classes to form negative pairs")

    order = np.argsort(labels, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cls_index = np.searchsorted(classes, labels)
    start = starts[cls_index]
    size = counts[cls_index]
    # position of every sample inside its class block of ``order``
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n) - np.repeat(starts, counts)

    anchors = np.arange(n)
    r = rng.integers(0, np.maximum(size - 1, 1))
    r = np.where(size > 1, r + (r >= pos), 0)
    positives = order[start + r]

    r = rng.integers(0, n - size)
    negatives = order[np.where(r < start, r, r + size)]

    pairs = np.concatenate([
        np.stack([anchors, positives, np.ones(n, dtype=np.int64)], axis=1),
        np.stack([anchors, negatives, np.zeros(n, dtype=np.int64)], axis=1),
    ])
    return pairs[rng.permutation(2 * n)]


def next_batch(dataset, pairs, batch_size, cursor):
    """Slice ``pairs[cursor:cursor + batch_size]`` and gather the features.

    Returns ``(batch, new_cursor)``; the last batch of an epoch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    chunk = pairs[cursor:cursor + batch_size]
    batch = PairBatch(dataset.features[chunk[:, 0]], dataset.features[chunk[:, 1]],
                      chunk[:, 2].astype(np.float32))
    return batch, cursor + len(chunk)


def iterate_batches(dataset, batch_size, rng):
    """Endless stream of pair batches with fresh pairs built every epoch."""
    while True:
        pairs = create_pairs(dataset, rng)
        cursor = 0
        while cursor < len(pairs):
            batch, cursor = next_batch(dataset, pairs, batch_size, cursor)
            yield batch


# ---------------------------------------------------------------- synthetic benchmarks


@dataclass
class Domain:
    rotation: float = 0.0  # degrees, applied to every coordinate pair (0,1), (2,3), ...
    translation: float | list = 0.0  # scalar broadcast per coordinate, or a vector
    scale: float = 1.0

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[1]
        out = x.copy()
        if self.rotation:
            t = math.radians(self.rotation)
            c, s = math.cos(t), math.sin(t)
            for k in range(0, d - 1, 2):
                a, b = x[:, k], x[:, k + 1]
                out[:, k] = c * a - s * b
                out[:, k + 1] = s * a + c * b
        shift = np.broadcast_to(np.asarray(self.translation, dtype=np.float64), (d,))
        return self.scale * out + shift


@dataclass
class SyntheticSpec:
    dims: int = 16
    known_classes: int = 5
    unknown_classes: int = 5
    samples_per_class: int = 100
    class_sep: float = 6.0
    domains: list = field(default_factory=lambda: [Domain()])
    source_domains: list = field(default_factory=lambda: [0])
    target_domain: int = 0
    partial_overlap: list | None = None
    seed: int = 0

    def validate(self):
        if self.class_sep <= 0:
            raise DataError(f"class_sep must be positive, got {self.class_sep}")
        if self.dims < 1 or self.known_classes < 1 or self.unknown_classes < 0:
            raise DataError("dims and known_classes must be >= 1, unknown_classes >= 0")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be >= 1")
        if not self.source_domains:
            raise DataError("at least one source domain required")
        for d in [*self.source_domains, self.target_domain]:
            if not 0 <= d < len(self.domains):
                raise DataError(f"domain index {d} out of range ({len(self.domains)} domains)")
        if self.partial_overlap is not None:
            if len(self.partial_overlap) != len(self.source_domains):
                raise DataError("partial_overlap needs one class list per source domain")
            covered = set()
            for subset in self.partial_overlap:
                for c in subset:
                    if not 0 <= c < self.known_classes:
                        raise DataError(f"partial_overlap class {c} is not a known class")
                covered.update(subset)
            if covered != set(range(self.known_classes)):
                missing = sorted(set(range(self.known_classes)) - covered)
                raise DataError(f"known classes {missing} appear in no source domain")


def class_means(num_classes, dims, class_sep, rng):
    """Class centres with pairwise distance >= class_sep.

    When there is room, centres sit on scaled axes of a random orthonormal
    frame (all pairwise distances exactly class_sep). Otherwise random
    Gaussian points are rescaled so the closest pair is class_sep apart.
    """
    if num_classes <= dims:
        q, _ = np.linalg.qr(rng.normal(size=(dims, dims)))
        return q[:, :num_classes].T * (class_sep / math.sqrt(2.0))
    pts = rng.normal(size=(num_classes, dims))
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    dist[np.diag_indices(num_classes)] = np.inf
    return pts * (class_sep / dist.min())


def generate_synthetic(spec):
    """Build (support, test) sets for one benchmark setting.

    Classes 0..known-1 are known, the rest unknown. Support holds known
    classes drawn in the source domains; test holds every class drawn in the
    target domain.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    total = spec.known_classes + spec.unknown_classes
    means = class_means(total, spec.dims, spec.class_sep, rng)
    k = spec.samples_per_class

    def draw(classes, domain_id):
        feats, labels = [], []
        for c in classes:
            x = means[c] + rng.normal(size=(k, spec.dims))
            feats.append(spec.domains[domain_id].apply(x))
            labels.append(np.full(k, c))
        if not feats:
            return np.zeros((0, spec.dims)), np.zeros(0, dtype=np.int64)
        return np.concatenate(feats), np.concatenate(labels)

    parts = []
    for i, dom in enumerate(spec.source_domains):
        classes = range(spec.known_classes) if spec.partial_overlap is None else sorted(spec.partial_overlap[i])
        x, y = draw(classes, dom)
        parts.append((x, y, np.full(len(y), dom)))
    support = LabeledDataset(np.concatenate([p[0] for p in parts]),
                             np.concatenate([p[1] for p in parts]),
                             np.concatenate([p[2] for p in parts]), "support")
    x, y = draw(range(total), spec.target_domain)
    test = LabeledDataset(x, y, np.full(len(y), spec.target_domain), "test")
    return support, test


def benchmark_spec(setting, seed=0, dims=16, known=5, unknown=5, samples_per_class=100,
                   class_sep=6.0, rotation=20.0, translation=0.5):
    """Preset specs for the three benchmark settings.

    intra: one identity domain. single-source: identity source, target rotated
    by ``rotation`` degrees and shifted by ``translation`` per coordinate.
    multi-source: three source domains with mild shifts, target as above.
    """
    common = dict(dims=dims, known_classes=known, unknown_classes=unknown,
                  samples_per_class=samples_per_class, class_sep=class_sep, seed=seed)
    target = Domain(rotation=rotation, translation=translation)
    if setting == "intra":
        return SyntheticSpec(domains=[Domain()], source_domains=[0], target_domain=0, **common)
    if setting == "single-source":
        return SyntheticSpec(domains=[Domain(), target], source_domains=[0], target_domain=1, **common)
    if setting == "multi-source":
        domains = [Domain(), Domain(rotation=-rotation / 2), Domain(translation=-translation / 2),
                   target]
        return SyntheticSpec(domains=domains, source_domains=[0, 1, 2], target_domain=3, **common)
    raise DataError(f"unknown setting {setting!r}")


# ---------------------------------------------------------------- embedding files


def write_embeddings(dataset, path, with_labels=True, with_domains=True):
    """Write RSND (binary) or, for a ``.csv`` path, the CSV fallback."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _write_csv(dataset, path)
    n, d = dataset.features.shape
    flags = (HAS_LABELS if with_labels else 0) | (HAS_DOMAINS if with_domains else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, n, d, flags))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        if with_labels:
            fh.write(dataset.labels.astype("<i8").tobytes())
        if with_domains:
            fh.write(dataset.domain_ids.astype("<i8").tobytes())


def read_embeddings(path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != EMBED_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    _, version, n, d, flags = _HEADER.unpack_from(raw, 0)
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if flags & ~(HAS_LABELS | HAS_DOMAINS):
        raise FormatError(f"unknown flag bits {flags:#x}", 24)
    off = _HEADER.size

    def take(count, dtype, what):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"truncated {what}: need {nbytes} bytes, have {len(raw) - off}", off)
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    feats = take(n * d, "<f4", "features").reshape(n, d)
    labels = take(n, "<i8", "labels") if flags & HAS_LABELS else np.zeros(n, dtype=np.int64)
    domains = take(n, "<i8", "domain ids") if flags & HAS_DOMAINS else np.zeros(n, dtype=np.int64)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes", off)
    return LabeledDataset(feats.astype(np.float32), labels.astype(np.int64),
                          domains.astype(np.int64), path.stem)


def _write_csv(dataset, path):
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["label", "domain"])
        for row, y, dom in zip(dataset.features, dataset.labels, dataset.domain_ids):
            # repr of a float32 round-trips exactly
            w.writerow([repr(float(v)) for v in row] + [int(y), int(dom)])


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty CSV file", 0)
    header = rows[0]
    if header[-2:] != ["label", "domain"] or header[:-2] != [f"f{i}" for i in range(len(header) - 2)]:
        raise FormatError("CSV header must be f0,...,f{d-1},label,domain", 0)
    d = len(header) - 2
    try:
        feats = np.array([[float(v) for v in r[:d]] for r in rows[1:]], dtype=np.float32).reshape(-1, d)
        labels = np.array([int(r[d]) for r in rows[1:]], dtype=np.int64)
        domains = np.array([int(r[d + 1]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed CSV row: {exc}") from None
    return LabeledDataset(feats, labels, domains, path.stem)
