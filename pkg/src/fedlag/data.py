"""Client datasets: synthetic 2-D domains, Gaussian blobs, Dirichlet splits,
and the big-endian IDX file reader.

The toy domains follow one global rule everywhere (class = [y > 0]) while
each domain is also perfectly separated by its own vertical boundary.
Label noise moves a fraction of each class across y = 0 without crossing
the vertical boundary, so a learner that only sees one domain is pulled
toward its local boundary and away from the shared one. That disagreement
is what makes the four domains conflict once they are trained together.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import rng

# toy-domain geometry (2 features: x, y). Per domain d: vertical boundary
# at BOUNDARY_X[d], class 1 living on side CLASS1_SIDE[d]. Clean class-1
# blocks sit above y=0, clean class-0 blocks below; noisy points keep
# their x-block and flip to the other side of y=0.
TOY_BOUNDARY_X = (-6.0, 6.0, -3.0, 3.0)
TOY_CLASS1_SIDE = (1.0, -1.0, 1.0, -1.0)
TOY_X_MARGIN = 0.5
TOY_BLOCK_W = 4.0
TOY_Y_MARGIN = 0.5
TOY_BLOCK_H = 4.0
TOY_NUM_DOMAINS = 4

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_MAX_PARTITION_RETRIES = 100


class PartitionError(ValueError):
    """A client ended up without enough samples after bounded retries."""


class IdxFormatError(ValueError):
    """Base for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class ClientDataset:
    """One client's shard, already split into train and test."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    def __post_init__(self):
        for name in ("train_x", "test_x"):
            object.__setattr__(
                self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            )
        for name in ("train_y", "test_y"):
            object.__setattr__(
                self, name, np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            )
        if self.train_x.ndim != 2 or self.test_x.ndim != 2:
            raise ValueError(f"client {self.client_id}: features must be 2-D")
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise ValueError(f"client {self.client_id}: train size mismatch")
        if self.test_x.shape[0] != self.test_y.shape[0]:
            raise ValueError(f"client {self.client_id}: test size mismatch")
        if self.train_y.shape[0] < 1 or self.test_y.shape[0] < 1:
            raise ValueError(
                f"client {self.client_id}: needs at least 1 train and 1 test sample"
            )
        for y in (self.train_y, self.test_y):
            if y.min() < 0 or y.max() >= self.num_classes:
                raise ValueError(
                    f"client {self.client_id}: labels outside [0, {self.num_classes})"
                )

    @property
    def label_histogram(self):
        """Training label counts, length num_classes."""
        return np.bincount(self.train_y, minlength=self.num_classes)

    @property
    def num_train(self):
        return self.train_y.shape[0]


@dataclass(frozen=True)
class ToySpec:
    """Four 2-D domains sharing the global rule class = [y > 0]."""

    n_per_domain: int = 200
    noise_fraction: float = 0.1

    def __post_init__(self):
        if self.n_per_domain < 2:
            raise ValueError(f"n_per_domain must be >= 2, got {self.n_per_domain}")
        if not 0.0 <= self.noise_fraction < 0.5:
            raise ValueError(
                f"noise_fraction must be in [0, 0.5), got {self.noise_fraction}"
            )


@dataclass(frozen=True)
class DirichletSpec:
    """Label-skewed partition: per class, client shares ~ Dirichlet(alpha)."""

    num_clients: int
    alpha: float
    with_replacement: bool = True

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


def _uniform_interval(g, lo, hi, n):
    lo, hi = min(lo, hi), max(lo, hi)
    return g.uniform(lo, hi, n)


def make_toy_domain(domain_id, spec, seed):
    """Points and labels for one domain; deterministic in (seed, domain_id)."""
    if not 0 <= domain_id < TOY_NUM_DOMAINS:
        raise ValueError(f"domain_id must be in [0, {TOY_NUM_DOMAINS}), got {domain_id}")
    g = rng.stream(seed, rng.DOMAIN, a=domain_id)
    c = TOY_BOUNDARY_X[domain_id]
    s = TOY_CLASS1_SIDE[domain_id]
    n1 = spec.n_per_domain // 2
    n0 = spec.n_per_domain - n1
    xs, ys, labels = [], [], []
    for label, count in ((0, n0), (1, n1)):
        side = s if label == 1 else -s
        x = _uniform_interval(
            g, c + side * TOY_X_MARGIN, c + side * (TOY_X_MARGIN + TOY_BLOCK_W), count
        )
        y_lo, y_hi = TOY_Y_MARGIN, TOY_Y_MARGIN + TOY_BLOCK_H
        if label == 0:
            y_lo, y_hi = -y_hi, -y_lo
        y = _uniform_interval(g, y_lo, y_hi, count)
        n_noisy = int(round(spec.noise_fraction * count))
        if n_noisy:
            # flip across y=0, keep the x-block: local rule stays perfect
            y[:n_noisy] = -y[:n_noisy]
        xs.append(x)
        ys.append(y)
        labels.append(np.full(count, label, dtype=np.int64))
    feats = np.column_stack([np.concatenate(xs), np.concatenate(ys)])
    lab = np.concatenate(labels)
    order = g.permutation(spec.n_per_domain)
    return feats[order], lab[order]


@dataclass(frozen=True)
class BlobSpec:
    """Gaussian clusters with deterministic centers on a scaled grid."""

    num_classes: int
    dim: int
    n_per_class: int = 200
    spread: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.n_per_class < 1:
            raise ValueError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if not self.spread > 0:
            raise ValueError(f"spread must be > 0, got {self.spread}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


def blob_centers(num_classes, dim, scale=1.0):
    """Deterministic class centers with pairwise distance 2*scale.

    dim 1 lays classes on a line (2 classes sit at -scale and +scale);
    higher dims place class c at sqrt(2)*scale along axis c mod dim,
    pushed one step further out on each wrap.
    """
    centers = np.zeros((num_classes, dim))
    if dim == 1:
        centers[:, 0] = scale * np.linspace(
            -(num_classes - 1), num_classes - 1, num_classes
        )
        return centers
    for c in range(num_classes):
        axis = c % dim
        cycle = c // dim
        centers[c, axis] = np.sqrt(2.0) * scale * (cycle + 1)
    return centers


def make_blobs(spec, seed):
    """Sample spec.n_per_class points around each center; shuffled together."""
    centers = blob_centers(spec.num_classes, spec.dim, spec.scale)
    xs, ys = [], []
    for c in range(spec.num_classes):
        g = rng.stream(seed, rng.BLOBS, a=c)
        xs.append(centers[c] + spec.spread * g.standard_normal((spec.n_per_class, spec.dim)))
        ys.append(np.full(spec.n_per_class, c, dtype=np.int64))
    feats = np.concatenate(xs)
    lab = np.concatenate(ys)
    order = rng.stream(seed, rng.BLOBS, a=spec.num_classes).permutation(len(lab))
    return feats[order], lab[order]


def split_train_test(x, y, test_fraction, g):
    """Shuffled split; test gets round(f*n) clipped to [1, n-1]."""
    n = len(y)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    order = g.permutation(n)
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return x[train_idx], y[train_idx], x[test_idx], y[test_idx]


def partition_dirichlet(x, y, spec, num_classes, test_fraction, seed):
    """Split a pool into per-client shards with Dirichlet label skew.

    Per class c the client shares are drawn from Dirichlet(alpha * 1_U) and
    sample counts from a multinomial. With replacement (the default) each
    client draws its count from the class pool with repeats allowed; without
    replacement the class pool is permuted and cut, so the union of shards
    is exactly the pool. Draws where some client cannot fill one train and
    one test sample are retried up to a bound, then rejected.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    u = spec.num_clients
    pools = [np.flatnonzero(y == c) for c in range(num_classes)]
    starved = -1
    for retry in range(_MAX_PARTITION_RETRIES):
        shards = [[] for _ in range(u)]
        for c in range(num_classes):
            pool = pools[c]
            if len(pool) == 0:
                continue
            g = rng.stream(seed, rng.PARTITION, a=c, b=retry)
            shares = g.dirichlet(np.full(u, spec.alpha))
            counts = g.multinomial(len(pool), shares)
            if spec.with_replacement:
                for cid in range(u):
                    if counts[cid]:
                        shards[cid].append(g.choice(pool, size=counts[cid], replace=True))
            else:
                perm = g.permutation(pool)
                offsets = np.concatenate([[0], np.cumsum(counts)])
                for cid in range(u):
                    part = perm[offsets[cid]:offsets[cid + 1]]
                    if len(part):
                        shards[cid].append(part)
        sizes = [sum(len(p) for p in parts) for parts in shards]
        starved = next((cid for cid in range(u) if sizes[cid] < 2), -1)
        if starved < 0:
            clients = []
            for cid in range(u):
                idx = np.sort(np.concatenate(shards[cid]))
                g = rng.stream(seed, rng.SPLIT, a=cid, b=retry)
                tr_x, tr_y, te_x, te_y = split_train_test(
                    x[idx], y[idx], test_fraction, g
                )
                clients.append(
                    ClientDataset(cid, tr_x, tr_y, te_x, te_y, num_classes)
                )
            return clients
    raise PartitionError(
        f"client {starved} still starved after {_MAX_PARTITION_RETRIES} draws "
        f"(alpha={spec.alpha}, clients={u}, pool={len(y)})"
    )


def _read_exact(f, count, path, what):
    buf = f.read(count)
    if len(buf) != count:
        raise IdxTruncatedError(
            f"{path}: truncated {what}: wanted {count} bytes, got {len(buf)}"
        )
    return buf


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair into (features/255, int64 labels).

    Pixels are row-major flattened per image. Raises IdxMagicError,
    IdxTruncatedError, or IdxCountMismatchError for the matching defect.
    """
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, n * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        raw = _read_exact(f, n_labels, labels_path, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if n_labels != n:
        raise IdxCountMismatchError(
            f"{labels_path}: {n_labels} labels for {n} images in {images_path}"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)
