"""MNIST ingestion, biased side-by-side digit pairs, and their entropies."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.newbyteorder(">").str: k for k, v in IDX_DTYPES.items()}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

SEPARATOR = 16
DIGIT = 28
PAIR_WIDTH = 2 * DIGIT + SEPARATOR


class DataError(ValueError):
    """Malformed, missing or inconsistent input data."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx])


def _open(path: Path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_array(path) -> np.ndarray:
    """Parse one IDX file into an array of its stored dtype and shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in IDX_DTYPES:
        raise DataError(f"{path}: bad magic number {raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def write_idx_array(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    be = array.dtype.newbyteorder(">")
    code = IDX_CODES.get(be.str)
    if code is None:
        raise DataError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body = header + array.astype(be).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # no name and mtime=0 in the gzip header keep the bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile("", "wb", fileobj=raw, mtime=0) as f:
            f.write(body)
    else:
        path.write_bytes(body)


def read_idx(images_path, labels_path) -> LabeledImageSet:
    """Read a paired IDX image/label file set; pixels are scaled to [0, 1]."""
    images = read_idx_array(images_path)
    labels = read_idx_array(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError(f"expected 3-d images and 1-d labels, got {images.shape} and {labels.shape}")
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if images.dtype != np.dtype(">u1"):
        raise DataError(f"expected unsigned byte pixels, got {images.dtype}")
    return LabeledImageSet(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise DataError(
        f"missing {stem}[.gz] in {data_dir}; place the MNIST IDX files there "
        f"or point --data-dir at a directory that has them"
    )


def load_mnist(data_dir) -> tuple[LabeledImageSet, LabeledImageSet]:
    data_dir = Path(data_dir)
    sets = []
    for split in ("train", "test"):
        img, lab = MNIST_FILES[split]
        sets.append(read_idx(_find(data_dir, img), _find(data_dir, lab)))
    return sets[0], sets[1]


def read_cifar10_batch(path) -> LabeledImageSet:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes.

    Images come back HWC-flattened into (N, 32, 32*3) so they share the
    LabeledImageSet container; reshape to (N, 32, 32, 3) before use.
    """
    raw = Path(path).read_bytes()
    rec = 1 + 3072
    if len(raw) % rec:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    imgs = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).reshape(-1, 32, 96)
    return LabeledImageSet(imgs.astype(np.float64) / 255.0, labels)


@dataclass(frozen=True)
class PairDistribution:
    p_l: np.ndarray          # (10,)
    p_r_given_l: np.ndarray  # (10, 10), row l is P(r | l)
    name: str = "custom"

    def validate(self, atol: float = 1e-12) -> None:
        if np.any(self.p_l < 0) or np.any(self.p_r_given_l < 0):
            raise DataError("negative probability")
        if abs(self.p_l.sum() - 1.0) > atol:
            raise DataError(f"P(l) sums to {self.p_l.sum()}")
        rows = self.p_r_given_l.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > atol):
            raise DataError(f"rows of P(r|l) sum to {rows}")

    def joint(self) -> np.ndarray:
        """P(l, r) as a (10, 10) matrix indexed [l, r]."""
        return self.p_l[:, None] * self.p_r_given_l

    def p_r(self) -> np.ndarray:
        return self.joint().sum(axis=0)

    def p_l_given_r(self) -> np.ndarray:
        """(10, 10) matrix indexed [l, r]; column r is P(l | r)."""
        pr = self.p_r()
        return np.divide(self.joint(), pr[None, :], out=np.zeros((10, 10)), where=pr[None, :] > 0)


def biased_pair_distribution() -> PairDistribution:
    """Uniform left digit; a low left digit (0-4) forces a high right digit."""
    p_r = np.empty((10, 10))
    p_r[:5, :5] = 0.0
    p_r[:5, 5:] = 0.2
    p_r[5:, :] = 0.1
    return PairDistribution(np.full(10, 0.1), p_r, name="biased")


def uniform_pair_distribution() -> PairDistribution:
    """Independent uniform labels: no cross-digit signal."""
    return PairDistribution(np.full(10, 0.1), np.full((10, 10), 0.1), name="uniform")


def _entropy_terms(p: np.ndarray) -> np.ndarray:
    # 0 log 0 = 0
    return np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def conditional_entropies(dist: PairDistribution) -> tuple[float, float]:
    """(H(l | r), H(r | l)) in nats."""
    dist.validate(atol=1e-9)
    p_r = dist.p_r()
    h_l_given_r = float(np.sum(p_r * _entropy_terms(dist.p_l_given_r()).sum(axis=0)))
    h_r_given_l = float(np.sum(dist.p_l * _entropy_terms(dist.p_r_given_l).sum(axis=1)))
    return h_l_given_r, h_r_given_l


@dataclass(frozen=True)
class PairSample:
    image: np.ndarray  # (28, 72)
    left_label: int
    right_label: int


@dataclass
class PairSet:
    """Side-by-side digit images stored as arrays; iterates as PairSample."""

    images: np.ndarray  # (n, 28, 72)
    left: np.ndarray
    right: np.ndarray

    def __len__(self):
        return len(self.left)

    def __getitem__(self, i) -> PairSample:
        return PairSample(self.images[i], int(self.left[i]), int(self.right[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labels(self) -> np.ndarray:
        return np.stack([self.left, self.right], axis=1)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.images[idx], self.left[idx], self.right[idx])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.left, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.right, dtype="<i8").tobytes())
        return h.hexdigest()


def _sample_categorical(rng: Rng, probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    if cdf.ndim == 1:
        return np.searchsorted(cdf, u, side="right")
    return (u[:, None] >= cdf).sum(axis=1)


def sample_pair_labels(dist: PairDistribution, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Left from P(l), then right from P(r | l)."""
    u = rng.uniform(2 * n)
    left = _sample_categorical(rng, dist.p_l, u[:n])
    right = _sample_categorical(rng, dist.p_r_given_l[left], u[n:])
    return left.astype(np.int64), right.astype(np.int64)


def generate_pairs(mnist: LabeledImageSet, dist: PairDistribution, n: int, rng: Rng) -> PairSet:
    """Draw ``n`` labelled pairs and fill each side with a random digit of that class.

    Digit images are drawn uniformly with replacement from their class pool.
    The left digit occupies columns 0-27, the right digit columns 44-71, and
    the 16 columns between them are zero.
    """
    if n < 1:
        raise DataError(f"need at least one pair, asked for {n}")
    dist.validate(atol=1e-9)
    pools = [np.flatnonzero(mnist.labels == c) for c in range(10)]
    missing = [c for c, p in enumerate(pools) if len(p) == 0]
    if missing:
        raise DataError(f"digit classes {missing} absent from the source images")
    left, right = sample_pair_labels(dist, n, rng)
    picks = rng.uniform(2 * n)
    src = np.empty(2 * n, dtype=np.int64)
    for side, labels in enumerate((left, right)):
        u = picks[side * n:(side + 1) * n]
        for c in range(10):
            sel = labels == c
            pool = pools[c]
            k = np.minimum((u[sel] * len(pool)).astype(np.int64), len(pool) - 1)
            src[side * n:(side + 1) * n][sel] = pool[k]
    h, w = mnist.images.shape[1:]
    images = np.zeros((n, h, 2 * w + SEPARATOR))
    images[:, :, :w] = mnist.images[src[:n]]
    images[:, :, w + SEPARATOR:] = mnist.images[src[n:]]
    return PairSet(images, left, right)


def save_pair_set(pairs: PairSet, path, seed: int, distribution: str) -> Path:
    """Write ``<path>.pixels`` (little-endian float64) plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pix = path.with_suffix(".pixels")
    np.ascontiguousarray(pairs.images, dtype="<f8").tofile(pix)
    meta = {
        "count": len(pairs),
        "shape": list(pairs.images.shape[1:]),
        "seed": seed,
        "distribution": distribution,
        "sha256": pairs.checksum(),
        "left": pairs.left.tolist(),
        "right": pairs.right.tolist(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta))
    return pix


def load_pair_set(path) -> tuple[PairSet, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    pixels = np.fromfile(path.with_suffix(".pixels"), dtype="<f8")
    shape = (meta["count"], *meta["shape"])
    if pixels.size != int(np.prod(shape)):
        raise DataError(f"{path}: pixel blob has {pixels.size} values, metadata promises {shape}")
    pairs = PairSet(pixels.reshape(shape).astype(np.float64),
                    np.asarray(meta["left"], dtype=np.int64),
                    np.asarray(meta["right"], dtype=np.int64))
    if pairs.checksum() != meta["sha256"]:
        raise DataError(f"{path}: checksum mismatch")
    return pairs, meta


def empirical_joint(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    counts = np.zeros((10, 10))
    np.add.at(counts, (left, right), 1.0)
    return counts / len(left)

