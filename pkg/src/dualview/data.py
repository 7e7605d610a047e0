"""Desk-scale datasets: synthetic generators and file ingestion.

Synthetic families:

* ``blobs``          — well-separated Gaussian clusters (linearly separable)
* ``circles``        — concentric noisy rings (radially separable)
* ``shifted_pulses`` — class-specific 1-D pulse shapes under random circular
  shifts, for rotation-invariance experiments

Networks here have no bias terms, so every model computes a positively
homogeneous function of its input: scaling x scales the output and leaves
hard gates unchanged. Concentric circles differ only by radius along shared
rays, which such a function cannot separate. The circles generator therefore
appends a constant-1 homogeneous coordinate by default (append_one=True),
which restores the expressive power of biases without breaking the
path-product decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import make_rng

BLOBS = "blobs"
CIRCLES = "circles"
SHIFTED_PULSES = "shifted_pulses"
KINDS = (BLOBS, CIRCLES, SHIFTED_PULSES)


class DatasetError(ValueError):
    """Malformed dataset file or invalid generator spec."""


@dataclass
class Dataset:
    """Inputs (n, d_in), integer labels in [0, k), and a provenance tag."""

    X: np.ndarray
    y: np.ndarray
    k: int
    provenance: str

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise DatasetError(
                f"inputs {self.X.shape} and labels {self.y.shape} do not align"
            )
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("inputs contain NaN or Inf")
        if self.k < 2:
            raise DatasetError(f"need at least 2 classes, got k={self.k}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.k):
            raise DatasetError(
                f"labels must lie in [0, {self.k}), got range "
                f"[{self.y.min()}, {self.y.max()}]"
            )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.k, self.provenance)

    def split(self, train_fraction: float, rng: np.random.Generator):
        """Shuffled (train, test) split."""
        if not 0.0 < train_fraction < 1.0:
            raise DatasetError(f"train_fraction must be in (0,1), got {train_fraction}")
        perm = rng.permutation(self.n)
        cut = int(round(train_fraction * self.n))
        return self.subset(perm[:cut]), self.subset(perm[cut:])


def _gen_blobs(n, rng, k=2, d_in=2, spread=1.0, separation=8.0):
    """Gaussian clusters whose means sit `separation` stds apart."""
    means = rng.normal(size=(k, d_in))
    means *= separation * spread / max(1e-12, np.min(
        [np.linalg.norm(means[i] - means[j]) for i in range(k) for j in range(i + 1, k)]
    ))
    y = rng.integers(0, k, size=n)
    X = means[y] + spread * rng.normal(size=(n, d_in))
    return X, y, k


def _gen_circles(n, rng, radii=(1.0, 2.0), noise=0.1, append_one=True):
    k = len(radii)
    if k < 2:
        raise DatasetError("circles needs at least 2 radii")
    y = rng.integers(0, k, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii)[y] + noise * rng.normal(size=n)
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    if append_one:
        X = np.concatenate([X, np.ones((n, 1))], axis=1)
    return X, y, k


def _gen_shifted_pulses(n, rng, d_in=8, k=2, noise=0.05):
    """Class c = a fixed pulse shape, circularly shifted by a random offset."""
    shapes = np.zeros((k, d_in))
    for c in range(k):
        width = 1 + c  # distinct pulse widths distinguish the classes
        shapes[c, : width + 1] = np.linspace(1.0, 0.25, width + 1)
    y = rng.integers(0, k, size=n)
    shifts = rng.integers(0, d_in, size=n)
    X = np.empty((n, d_in))
    for i in range(n):
        X[i] = np.roll(shapes[y[i]], shifts[i])
    X += noise * rng.normal(size=X.shape)
    return X, y, k


def generate_synthetic(kind: str, n: int, seed: int, **params) -> Dataset:
    """Deterministic synthetic dataset; same (kind, n, seed, params) -> same bytes."""
    if n < 2:
        raise DatasetError(f"n must be >= 2, got {n}")
    rng = make_rng(seed, stream=101)
    if kind == BLOBS:
        X, y, k = _gen_blobs(n, rng, **params)
    elif kind == CIRCLES:
        X, y, k = _gen_circles(n, rng, **params)
    elif kind == SHIFTED_PULSES:
        X, y, k = _gen_shifted_pulses(n, rng, **params)
    else:
        raise DatasetError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    tag = f"synthetic:{kind}:n={n}:seed={seed}"
    if params:
        tag += ":" + ",".join(f"{a}={b}" for a, b in sorted(params.items()))
    return Dataset(X, y, k, tag)


CIFAR_RECORD = 3073  # 1 label byte + 32*32*3 pixel bytes


def load_dataset(path, format: str, header: bool = False, n_classes: int | None = None) -> Dataset:
    """Read a dataset from disk.

    csv: one row per sample, label in the final column, optional header row.
    cifar-binary: consecutive 3073-byte records, label byte then 3072 pixel
    bytes scaled to [0, 1] (channel planes concatenated row-major).
    """
    if format == "csv":
        return _load_csv(path, header, n_classes)
    if format == "cifar-binary":
        return _load_cifar_binary(path, n_classes)
    raise DatasetError(f"unknown dataset format {format!r}")


def _load_csv(path, header, n_classes):
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)
    except Exception as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if raw.shape[1] < 2:
        raise DatasetError(f"{path}: need at least one feature column plus a label")
    X, labels = raw[:, :-1], raw[:, -1]
    if np.any(labels != np.round(labels)):
        raise DatasetError(f"{path}: final column must hold integer labels")
    y = labels.astype(np.int64)
    if y.min() < 0:
        raise DatasetError(f"{path}: negative label {y.min()}")
    k = n_classes if n_classes is not None else int(y.max()) + 1
    return Dataset(X, y, k, f"file:{path}")


def _load_cifar_binary(path, n_classes):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
        offset = (len(blob) // CIFAR_RECORD) * CIFAR_RECORD
        raise DatasetError(
            f"{path}: malformed record at byte offset {offset} "
            f"(file length {len(blob)} is not a multiple of {CIFAR_RECORD})"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    y = records[:, 0].astype(np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    bad = np.nonzero(y >= k)[0]
    if bad.size:
        raise DatasetError(
            f"{path}: label {y[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}"
        )
    X = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(X, y, k, f"file:{path}")
