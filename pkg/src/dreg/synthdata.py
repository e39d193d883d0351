"""Synthetic datasets, label-noise injection, splits and CSV I/O.

Binary data from the contamination model is stored with labels in {0, 1};
class 1 corresponds to y = +1 and class 0 to y = -1 everywhere in the package
(see :func:`to_signed`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dreg._rng import make_rng
from dreg.errors import ConfigError, ParseError


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the two-component Gaussian mixture with contamination."""

    n: int
    w_star: np.ndarray
    eta: float
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.w_star, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "w_star", w)
        if w.size < 1:
            raise ConfigError("w_star must have at least one coordinate")
        if not np.all(np.isfinite(w)):
            raise ConfigError("w_star must be finite")
        if int(self.n) < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if not (0.0 <= float(self.eta) <= 1.0) or math.isnan(float(self.eta)):
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")

    @property
    def d(self) -> int:
        return self.w_star.size


class LabeledDataset:
    """Feature matrix, integer labels and inlier flags (True = inlier)."""

    __slots__ = ("features", "labels", "n_classes", "flags")

    def __init__(self, features, labels, n_classes=None, flags=None):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(labels)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ConfigError("labels must be 1-D with one entry per row of features")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ConfigError("labels must be integers")
        y = y.astype(np.int64)
        if n_classes is None:
            n_classes = int(y.max()) + 1 if y.size else 1
        n_classes = int(n_classes)
        if n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ConfigError(f"labels must lie in [0, {n_classes - 1}]")
        if flags is None:
            f = np.ones(x.shape[0], dtype=bool)
        else:
            f = np.asarray(flags, dtype=bool)
            if f.shape != (x.shape[0],):
                raise ConfigError("flags must have one entry per sample")
        if not np.all(np.isfinite(x)):
            raise ConfigError("features must be finite")
        self.features = x
        self.labels = y
        self.n_classes = n_classes
        self.flags = f

    def __len__(self):
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, self.flags[idx])

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.flags, other.flags)
        )

    def __repr__(self):
        return (
            f"LabeledDataset(n={self.n}, d={self.d}, n_classes={self.n_classes}, "
            f"outliers={int((~self.flags).sum())})"
        )


@dataclass(frozen=True)
class SplitFractions:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        for name in ("train", "val", "test"):
            v = float(getattr(self, name))
            if not (0.0 < v < 1.0):
                raise ConfigError(f"split fraction {name}={v} must lie in (0, 1)")
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {total!r}")


def to_signed(labels) -> np.ndarray:
    """Map {0, 1} labels to {-1, +1} (class 1 -> +1)."""
    return 2.0 * np.asarray(labels, dtype=np.float64) - 1.0


def round_half_even(x: float) -> int:
    return int(round(x))


def sample_contaminated_gmm(cfg: SynthConfig) -> LabeledDataset:
    """Draw ``cfg.n`` points from (1 - eta) P_in + eta P_out.

    Under P_in, X | y ~ N(y w*, I); under P_out, X | y ~ N(-y w*, I), with y
    uniform on {-1, +1}. Outlier draws get ``flag=False``.
    """
    rng = make_rng(cfg.seed)
    n, d = int(cfg.n), cfg.d
    y_class = rng.integers(0, 2, size=n)
    outlier = rng.random(n) < cfg.eta
    sign = to_signed(y_class) * np.where(outlier, -1.0, 1.0)
    x = rng.standard_normal((n, d)) + sign[:, None] * cfg.w_star[None, :]
    return LabeledDataset(x, y_class, 2, ~outlier)


def sample_blobs(n, centers, spread=1.0, seed=0) -> LabeledDataset:
    """Isotropic Gaussian blobs with balanced uniform class assignment."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if int(n) < 1:
        raise ConfigError("n must be >= 1")
    if not spread > 0:
        raise ConfigError("spread must be positive")
    rng = make_rng(seed)
    k, d = centers.shape
    y = rng.integers(0, k, size=int(n))
    x = centers[y] + spread * rng.standard_normal((int(n), d))
    return LabeledDataset(x, y, k)


def square_centers(n_classes: int, radius: float = 2.0) -> np.ndarray:
    """Class centres evenly spaced on a circle in the plane."""
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes + np.pi / 4
    return radius * np.sqrt(2.0) * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def circle_centers(n_centers: int, radius: float = 1.0) -> np.ndarray:
    """Centres at angles 2*pi*k/n on a circle of the given radius, starting on the x axis."""
    angles = 2.0 * np.pi * np.arange(int(n_centers)) / int(n_centers)
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def fold_held_out_classes(ds: LabeledDataset, n_kept: int, seed: int = 0) -> LabeledDataset:
    """Relabel every sample of a class >= n_kept uniformly into {0, ..., n_kept-1}.

    Samples from the kept classes keep label and ``flag=True``; folded ones
    get ``flag=False``. Unlike :func:`inject_label_noise`, the contaminated
    samples occupy their own region of feature space.
    """
    n_kept = int(n_kept)
    if not (1 <= n_kept < ds.n_classes):
        raise ConfigError(f"n_kept must lie in [1, {ds.n_classes - 1}], got {n_kept}")
    out = ds.labels >= n_kept
    labels = ds.labels.copy()
    labels[out] = make_rng(seed).integers(0, n_kept, size=int(out.sum()))
    return LabeledDataset(ds.features.copy(), labels, n_kept, ~out)


def inject_label_noise(ds: LabeledDataset, eta: float, seed: int = 0) -> LabeledDataset:
    """Relabel round(eta * n) random samples uniformly over all classes.

    The redraw may return the original label. Relabeled samples get
    ``flag=False``; every other sample keeps its label with ``flag=True``.
    """
    if not (0.0 <= eta <= 1.0):
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    n = ds.n
    m = round_half_even(eta * n)
    flags = np.ones(n, dtype=bool)
    labels = ds.labels.copy()
    if m == 0:
        return LabeledDataset(ds.features.copy(), labels, ds.n_classes, flags)
    rng = make_rng(seed)
    idx = rng.choice(n, size=m, replace=False)
    labels[idx] = rng.integers(0, ds.n_classes, size=m)
    flags[idx] = False
    return LabeledDataset(ds.features.copy(), labels, ds.n_classes, flags)


def split(ds: LabeledDataset, fractions: SplitFractions, seed: int = 0):
    """Shuffle and cut into (train, val, test); leftovers go to train."""
    n = ds.n
    if n < 3:
        raise ConfigError("need at least 3 samples to split")
    n_val = round_half_even(fractions.val * n)
    n_test = round_half_even(fractions.test * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(
            f"fractions {fractions} give an empty split for n={n} "
            f"(sizes {n_train}, {n_val}, {n_test})"
        )
    perm = make_rng(seed).permutation(n)
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train : n_train + n_val]),
        ds.subset(perm[n_train + n_val :]),
    )


def save_csv(ds: LabeledDataset, path) -> None:
    """Write ``f0..f{d-1},label,flag`` with 17 significant digits, LF endings."""
    path = Path(path)
    header = [f"f{j}" for j in range(ds.d)] + ["label", "flag"]
    lines = [",".join(header)]
    for row, label, flag in zip(ds.features, ds.labels, ds.flags):
        lines.append(",".join([*(format(v, ".17g") for v in row), str(int(label)), "1" if flag else "0"]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_csv(path, n_classes: int | None = None) -> LabeledDataset:
    """Parse a dataset CSV; errors name the offending line (1-based)."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError("no samples", path=path)
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[-2:] != ["label", "flag"]:
        raise ParseError("header must be f0,...,f{d-1},label,flag", line=1, path=path)
    d = len(header) - 2
    if header[:d] != [f"f{j}" for j in range(d)]:
        raise ParseError("feature columns must be named f0..f{d-1}", line=1, path=path)
    if len(rows) == 1:
        raise ParseError("no samples", path=path)

    feats = np.empty((len(rows) - 1, d), dtype=np.float64)
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    flags = np.empty(len(rows) - 1, dtype=bool)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(row)}", line=lineno, path=path)
        try:
            vals = [float(v) for v in row[:d]]
        except ValueError:
            raise ParseError("non-numeric feature", line=lineno, path=path) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite feature", line=lineno, path=path)
        feats[i] = vals
        try:
            lab = int(row[d])
        except ValueError:
            raise ParseError(f"label {row[d]!r} is not an integer", line=lineno, path=path) from None
        if lab < 0 or (n_classes is not None and lab >= n_classes):
            raise ParseError(f"label {lab} out of range for K={n_classes}", line=lineno, path=path)
        labels[i] = lab
        if row[d + 1].strip() not in ("0", "1"):
            raise ParseError(f"flag must be 0 or 1, got {row[d + 1]!r}", line=lineno, path=path)
        flags[i] = row[d + 1].strip() == "1"
    return LabeledDataset(feats, labels, n_classes, flags)
