"""Datasets: synthetic generators, CSV and MNIST IDX loaders, label noise.

A `Dataset` keeps its inputs as an (n, d) matrix and targets as (n, k).
Synthetic datasets carry a `draw(rng, m)` callable returning fresh samples
from the same distribution, which the stability experiments use to swap
out a single training point.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .numkit import Rng, rng_choice, rng_gaussian, rng_permutation, rng_rademacher, rng_sphere


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    name: str
    task: str = "regression"  # or "binary"
    draw: Optional[Callable] = None
    norm: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.ndim != 2 or self.Y.ndim != 2 or len(self.X) != len(self.Y):
            raise ShapeError(f"inconsistent dataset shapes {self.X.shape}, {self.Y.shape}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise FormatError(f"{self.name}: non-finite values")
        if len(self.X) < 1:
            raise ShapeError(f"{self.name}: empty dataset")
        if self.task == "binary" and not np.all(np.abs(self.Y) == 1.0):
            raise FormatError(f"{self.name}: binary labels must be -1 or +1")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def k(self):
        return self.Y.shape[1]

    def subset(self, idx):
        return replace(self, X=self.X[idx], Y=self.Y[idx])


# --- Hermite links ------------------------------------------------------------

HERMITE = {
    "He1": lambda z: z,
    "He2": lambda z: z * z - 1.0,
    "He3": lambda z: z ** 3 - 3.0 * z,
}


def _unit_rows(X):
    return X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)


# --- generators --------------------------------------------------------------------

def gen_gaussian_linear(n, d, rng, noise=0.0, unit_norm=False):
    """x ~ N(0, I_d), y = <w*, x> + noise * N(0, 1) with a hidden unit-norm w*."""
    if n < 1 or d < 1 or noise < 0:
        raise ConfigError("gaussian-linear needs n, d >= 1 and noise >= 0")
    wstar = rng_sphere(rng.child("teacher"), d)

    def draw(r, m):
        X = rng_gaussian(r.child("x"), (m, d))
        if unit_norm:
            X = _unit_rows(X)
        y = X @ wstar + noise * rng_gaussian(r.child("eps"), m)
        return X, y[:, None]

    X, Y = draw(rng.child("train"), n)
    return Dataset(X, Y, "gaussian-linear", "regression", draw,
                   norm={"unit_norm": unit_norm}, meta={"teacher": wstar})


def gen_single_index(n, d, rng, link="He2", noise=0.0, theta=None):
    """x ~ N(0, I_d), y = He_k(<theta*, x>) + noise * N(0, 1), theta* uniform on the sphere."""
    if link not in HERMITE:
        raise ConfigError(f"unknown link {link!r}; choose from {sorted(HERMITE)}")
    if d < 2:
        raise ConfigError("single-index data needs d >= 2")
    if theta is None:
        theta = rng_sphere(rng.child("theta"), d)
    theta = np.asarray(theta, dtype=np.float64)
    theta = theta / np.linalg.norm(theta)
    f = HERMITE[link]

    def draw(r, m):
        X = rng_gaussian(r.child("x"), (m, d))
        Y = f(X @ theta) + noise * rng_gaussian(r.child("eps"), m)
        return X, Y[:, None]

    X, Y = draw(rng.child("train"), n)
    return Dataset(X, Y, f"single-index-{link}", "regression", draw,
                   meta={"theta_star": theta, "link": link})


def gen_two_cluster(n, d, rng, sep=2.0, spread=1.0, unit_norm=False):
    """Exactly balanced labels y = +-1 with x = y mu + spread * N(0, I_d).

    mu = (sep / 2) e_1, so the cluster centres are `sep` apart. Fresh draws
    used for resampling pick the label by a fair coin.
    """
    if n < 2 or n % 2:
        raise ConfigError("two-cluster data needs an even n >= 2")
    mu = np.zeros(d)
    mu[0] = sep / 2.0

    def points(r, y):
        X = y[:, None] * mu + spread * rng_gaussian(r.child("x"), (len(y), d))
        return _unit_rows(X) if unit_norm else X

    def draw(r, m):
        y = rng_rademacher(r.child("y"), m)
        return points(r, y), y[:, None]

    r = rng.child("train")
    y = np.repeat([1.0, -1.0], n // 2)[rng_permutation(r.child("order"), n)]
    return Dataset(points(r, y), y[:, None], "two-cluster", "binary", draw,
                   norm={"unit_norm": unit_norm}, meta={"mu": mu})


# --- files ---------------------------------------------------------------------

def load_csv(path, d=None, k=None):
    """Read a CSV with header x0..x{d-1}, y0..y{k-1}; row order is kept."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    if not rows:
        raise FormatError(f"{path}: empty file")
    head = [h.strip() for h in rows[0]]
    xs = [h for h in head if h.startswith("x")]
    ys = [h for h in head if h.startswith("y")]
    want = [f"x{i}" for i in range(len(xs))] + [f"y{j}" for j in range(len(ys))]
    if head != want or not xs or not ys:
        raise FormatError(f"{path}:1: header must be x0..x(d-1), y0..y(k-1); got {head}")
    if (d is not None and len(xs) != d) or (k is not None and len(ys) != k):
        raise FormatError(f"{path}:1: expected d={d}, k={k}, found d={len(xs)}, k={len(ys)}")
    data = []
    for line, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != len(head):
            raise FormatError(f"{path}:{line}: expected {len(head)} fields, got {len(r)}")
        try:
            data.append([float(v) for v in r])
        except ValueError as e:
            raise FormatError(f"{path}:{line}: {e}") from e
    if not data:
        raise FormatError(f"{path}: no data rows")
    M = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        bad = int(np.argwhere(~np.isfinite(M))[0, 0]) + 2
        raise FormatError(f"{path}:{bad}: non-finite value")
    return Dataset(M[:, : len(xs)], M[:, len(xs) :], path.stem, "regression")


def save_csv(data, path):
    head = [f"x{i}" for i in range(data.d)] + [f"y{j}" for j in range(data.k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for x, y in zip(data.X, data.Y):
            w.writerow([repr(float(v)) for v in np.concatenate([x, y])])


def _open_maybe_gz(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path):
    raw = _open_maybe_gz(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: header truncated at byte {len(raw)} (need 16)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 2051:
        raise FormatError(f"{path}: bad image magic {magic} at byte 0 (expected 2051)")
    need = 16 + count * rows * cols
    if len(raw) != need:
        raise FormatError(f"{path}: payload ends at byte {len(raw)}, header implies {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows * cols)


def read_idx_labels(path):
    raw = _open_maybe_gz(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: header truncated at byte {len(raw)} (need 8)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != 2049:
        raise FormatError(f"{path}: bad label magic {magic} at byte 0 (expected 2049)")
    if len(raw) != 8 + count:
        raise FormatError(f"{path}: payload ends at byte {len(raw)}, header implies {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_idx(images, labels, classes=None, max_n=None):
    """MNIST from IDX files, pixels scaled to [0, 1].

    With `classes` = (a, b) only those digits are kept and mapped to
    +1 (a) and -1 (b); otherwise targets are the digit values. `max_n`
    keeps the first max_n rows after filtering.
    """
    img = read_idx_images(images)
    lab = read_idx_labels(labels)
    if len(img) != len(lab):
        raise FormatError(f"{len(img)} images but {len(lab)} labels")
    if classes is None:
        X, y, task, name = img, lab.astype(np.float64), "regression", "mnist"
    else:
        a, b = (int(c) for c in classes)
        keep = (lab == a) | (lab == b)
        X, y = img[keep], np.where(lab[keep] == a, 1.0, -1.0)
        task, name = "binary", f"mnist-{a}v{b}"
    if max_n is not None:
        X, y = X[:max_n], y[:max_n]
    return Dataset(X.astype(np.float64) / 255.0, y, name, task,
                   norm={"pixel_scale": 255.0}, meta={"classes": None if classes is None else [a, b]})


def train_test_split(data, n_train, n_test, rng):
    """Disjoint random train and test subsets."""
    if n_train + n_test > data.n:
        raise ConfigError(f"need {n_train}+{n_test} samples, {data.name} has {data.n}")
    perm = rng.generator().permutation(data.n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train : n_train + n_test]))


def unit_normalize(data):
    """Rows scaled to unit Euclidean norm; recorded in the normalization record."""
    return replace(data, X=_unit_rows(data.X), norm={**data.norm, "unit_norm": True})


def corrupt_labels(data, p, rng):
    """Resample the labels of exactly floor(p n) uniformly chosen rows.

    New labels are drawn uniformly from {-1, +1}, so about half of the
    chosen rows keep their label (the random-label convention).
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1], got {p}")
    if data.task != "binary":
        raise ConfigError("label noise needs a binary classification dataset")
    m = int(np.floor(p * data.n + 1e-9))
    Y = data.Y.copy()
    if m:
        rows = rng_choice(rng.child("rows"), data.n, m)
        Y[rows, 0] = rng_rademacher(rng.child("labels"), m)
    return replace(data, Y=Y, meta={**data.meta, "noise": p, "corrupted": m})
