"""Synthetic 2-D datasets, labeled/unlabeled splits and input augmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import Rng, as_tensor


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n, S) one-hot

    def __post_init__(self):
        x = as_tensor(self.features, "features")
        y = as_tensor(self.labels, "labels")
        if x.ndim != 2 or y.ndim != 2 or len(x) != len(y) or len(x) < 1:
            raise ValueError("features (n, d) and labels (n, S) with n >= 1 required")
        if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
            raise ValueError("labels must be one-hot rows")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


def one_hot(classes, n_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=int)
    out = np.zeros((len(classes), n_classes))
    out[np.arange(len(classes)), classes] = 1.0
    return out


def make_two_moons(n: int, noise: float, rng: Rng) -> Dataset:
    """Upper arc (cos t, sin t) and lower arc (1 - cos t, 0.5 - sin t), t in [0, pi]."""
    if n < 2:
        raise ValueError("n must be >= 2")
    n_upper = n - n // 2
    n_lower = n // 2
    t_up = np.linspace(0.0, np.pi, n_upper)
    t_lo = np.linspace(0.0, np.pi, n_lower)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)])
    x = np.vstack([upper, lower])
    if noise > 0:
        x = x + rng.normal((n, 2), sigma=noise)
    classes = np.concatenate([np.zeros(n_upper, int), np.ones(n_lower, int)])
    return Dataset(x, one_hot(classes, 2))


def make_circles(n: int, noise: float, factor: float, rng: Rng) -> Dataset:
    """Outer unit circle (class 0) around an inner circle of radius ``factor`` (class 1)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0.0 < factor < 1.0:
        raise ValueError("factor must lie in (0, 1)")
    n_out = n - n // 2
    n_in = n // 2
    t_out = np.linspace(0.0, 2 * np.pi, n_out, endpoint=False)
    t_in = np.linspace(0.0, 2 * np.pi, n_in, endpoint=False)
    x = np.vstack(
        [
            np.column_stack([np.cos(t_out), np.sin(t_out)]),
            factor * np.column_stack([np.cos(t_in), np.sin(t_in)]),
        ]
    )
    if noise > 0:
        x = x + rng.normal((n, 2), sigma=noise)
    classes = np.concatenate([np.zeros(n_out, int), np.ones(n_in, int)])
    return Dataset(x, one_hot(classes, 2))


def make_blobs(n: int, centers, sigma: float, rng: Rng) -> Dataset:
    """Isotropic Gaussian blobs, one class per center.

    ``centers`` is either an ``(S, d)`` array or a count, in which case
    2-D centers are drawn uniformly from [-5, 5]^2.  Class k gets
    ``n // S`` points plus one of the remainder if ``k < n % S``.
    """
    if isinstance(centers, (int, np.integer)):
        centers = rng.uniform((int(centers), 2), -5.0, 5.0)
    centers = as_tensor(centers, "centers")
    k = len(centers)
    if n < k:
        raise ValueError("need at least one point per center")
    counts = [n // k + (1 if c < n % k else 0) for c in range(k)]
    classes = np.repeat(np.arange(k), counts)
    x = centers[classes] + rng.normal((n, centers.shape[1]), sigma=sigma)
    return Dataset(x, one_hot(classes, k))


def make_dataset(kind: str, n: int, noise: float, rng: Rng, factor: float = 0.5, centers=3) -> Dataset:
    if kind in ("two-moons", "two_moons"):
        return make_two_moons(n, noise, rng)
    if kind == "circles":
        return make_circles(n, noise, factor, rng)
    if kind == "blobs":
        return make_blobs(n, centers, noise, rng)
    raise ValueError(f"unknown dataset kind {kind!r}")


@dataclass(frozen=True)
class SslSplit:
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    holdout_idx: np.ndarray

    def check_disjoint(self) -> None:
        sets = [set(self.labeled_idx.tolist()), set(self.unlabeled_idx.tolist()), set(self.holdout_idx.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise AssertionError("split index sets overlap")


def split_ssl(dataset: Dataset, m: int, balanced: bool, rng: Rng, holdout_fraction: float = 0.0) -> SslSplit:
    n, S = dataset.n, dataset.n_classes
    n_hold = int(round(holdout_fraction * n))
    if m < 0 or m + n_hold > n:
        raise ValueError(f"m={m} plus holdout={n_hold} exceeds n={n}")
    if balanced and m < S:
        raise ValueError(f"balanced split needs m >= number of classes ({S})")
    perm = rng.permutation(n)
    holdout = np.sort(perm[:n_hold])
    pool = perm[n_hold:]
    if balanced:
        classes = dataset.classes[pool]
        chosen = []
        for c in range(S):
            want = m // S + (1 if c < m % S else 0)
            members = pool[classes == c]
            if len(members) < want:
                raise ValueError(f"class {c} has only {len(members)} points, need {want}")
            chosen.append(members[:want])
        labeled = np.concatenate(chosen)
    else:
        labeled = pool[:m]
    labeled = np.sort(labeled)
    unlabeled = np.setdiff1d(pool, labeled)
    return SslSplit(labeled, unlabeled, holdout)


@dataclass(frozen=True)
class SslData:
    """Training-time view of a split: unlabeled targets are not carried."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray

    @classmethod
    def from_split(cls, dataset: Dataset, split: SslSplit) -> "SslData":
        return cls(
            dataset.features[split.labeled_idx],
            dataset.labels[split.labeled_idx],
            dataset.features[split.unlabeled_idx],
        )


@dataclass(frozen=True)
class AugmentSpec:
    jitter_sigma: float = 0.0
    rotate_max_radians: float = 0.0

    def __post_init__(self):
        if self.jitter_sigma < 0 or self.rotate_max_radians < 0:
            raise ValueError("augmentation parameters must be nonnegative")

    @property
    def is_identity(self) -> bool:
        return self.jitter_sigma == 0 and self.rotate_max_radians == 0


DEFAULT_AUGMENT = AugmentSpec(jitter_sigma=0.05, rotate_max_radians=np.deg2rad(10.0))


def augment(x_batch, spec: AugmentSpec, rng: Rng) -> np.ndarray:
    """Gaussian jitter, then one random rotation of the whole batch about its centroid."""
    x = np.array(x_batch, dtype=np.float64)
    if spec.rotate_max_radians > 0 and x.shape[1] != 2:
        raise ValueError("rotation augmentation requires 2-D inputs")
    if spec.jitter_sigma > 0:
        x = x + rng.normal(x.shape, sigma=spec.jitter_sigma)
    if spec.rotate_max_radians > 0:
        angle = rng.uniform(None, -spec.rotate_max_radians, spec.rotate_max_radians)
        c, s = np.cos(angle), np.sin(angle)
        centroid = x.mean(axis=0)
        x = (x - centroid) @ np.array([[c, s], [-s, c]]) + centroid
    return x


def save_dataset_csv(dataset: Dataset, path) -> None:
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for row, c in zip(dataset.features, dataset.classes):
            w.writerow([repr(float(v)) for v in row] + [int(c)])


def load_dataset_csv(path, n_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
        raise ValueError(f"{path}: unexpected header {header}")
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    classes = np.array([int(r[-1]) for r in body])
    S = n_classes if n_classes is not None else int(classes.max()) + 1
    return Dataset(x, one_hot(classes, S))


def save_split(split: SslSplit, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("labeled", "unlabeled", "holdout"):
        idx = getattr(split, f"{name}_idx")
        (directory / f"{name}.txt").write_text("".join(f"{int(i)}\n" for i in idx))


def load_split(directory) -> SslSplit:
    directory = Path(directory)
    parts = []
    for name in ("labeled", "unlabeled", "holdout"):
        text = (directory / f"{name}.txt").read_text().split()
        parts.append(np.array([int(t) for t in text], dtype=int))
    return SslSplit(*parts)
