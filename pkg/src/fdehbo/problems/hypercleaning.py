"""Data hyper-cleaning with a linear (binary logistic) classifier.

The outer variable ``x = lam`` holds one logit per training example and the
inner variable ``y = w`` the classifier weights::

    f(lam, w) = mean_{j in val} CE(w^T u_j, l_j)
    g(lam, w) = mean_{i in train} sigmoid(lam_i) CE(w^T u_i, l_i) + C ||w||^2

``f`` does not depend on ``lam``, so the direct gradient ``grad_x f`` is zero
and all of the hypergradient flows through ``w*(lam)``.

Sampling: a key draws one permutation of the training set and one of the
validation set; ``key.slot`` selects the ``slot``-th chunk of
``batch_size`` examples. Slots ``0 .. n/batch_size - 1`` therefore partition
the data, and the slot-average of minibatch gradients equals the full-batch
gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from ..errors import InvalidArgumentError
from ..oracle import BilevelOracle, Point, ProblemConstants, SampleKey, Stream, key_rng

DEFAULT_REG_C = 0.001

_TRAIN, _VAL = 0, 1


@dataclass(frozen=True)
class Dataset:
    train_X: np.ndarray
    train_y: np.ndarray
    val_X: np.ndarray
    val_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray

    @property
    def d(self) -> int:
        return self.train_X.shape[1]


def synth_gaussian_dataset(n_train: int, n_val: int, n_test: int, d: int,
                           separation: float = 2.0, seed: int = 0) -> Dataset:
    """Two isotropic unit-variance Gaussian blobs at ``+-separation/2`` along a random direction."""
    if min(n_train, n_val, n_test, d) < 1:
        raise InvalidArgumentError("dataset sizes and dimension must be >= 1")
    if not separation > 0:
        raise InvalidArgumentError("separation must be positive")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)

    def draw(n):
        labels = rng.integers(0, 2, size=n)
        centers = np.outer(2 * labels - 1, direction) * (separation / 2)
        return centers + rng.standard_normal((n, d)), labels

    train = draw(n_train)
    val = draw(n_val)
    test = draw(n_test)
    return Dataset(*train, *val, *test)


def read_csv_dataset(path, val_fraction: float = 0.2, test_fraction: float = 0.2,
                     seed: int = 0) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows and split them into train/val/test by a seeded shuffle."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidArgumentError(f"{path}: empty file") from None
        d = len(header) - 1
        if d < 1 or header != [f"f{i}" for i in range(d)] + ["label"]:
            raise InvalidArgumentError(f"{path}: header must be f0,...,f{{d-1}},label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise InvalidArgumentError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
    X = np.asarray(feats, dtype=float).reshape(-1, d)
    y = np.asarray(labels, dtype=int)
    if not set(np.unique(y)) <= {0, 1}:
        raise InvalidArgumentError(f"{path}: only binary labels 0/1 are supported")
    n = len(y)
    n_val = int(round(val_fraction * n))
    n_test = int(round(test_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    tr, va, te = np.split(perm, [n - n_val - n_test, n - n_test])
    return Dataset(X[tr], y[tr], X[va], y[va], X[te], y[te])


def write_csv_dataset(path, X: np.ndarray, y: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(X.shape[1])] + ["label"])
        for row, label in zip(X, y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def corrupt_labels(labels: np.ndarray, p: float, seed: int, n_classes: int = 2):
    """Replace each label, with probability ``p``, by a uniformly drawn different class.

    Returns ``(new_labels, flipped_mask)``.
    """
    if not 0 <= p < 1:
        raise InvalidArgumentError(f"corruption probability must be in [0, 1), got {p}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape) < p
    shift = rng.integers(1, n_classes, size=labels.shape)
    out = labels.copy()
    out[flip] = (labels[flip] + shift[flip]) % n_classes
    return out, flip


def _ce(z, labels):
    """Binary cross-entropy of logits ``z`` against 0/1 labels."""
    return np.logaddexp(0.0, z) - labels * z


def fit_weighted_logistic(X, labels, weights, reg_C, w0=None, tol=1e-12, max_iter=100):
    """Minimize ``mean_i weights_i CE(w^T X_i, labels_i) + reg_C ||w||^2`` by Newton's method."""
    n, d = X.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=float)
    for _ in range(max_iter):
        z = X @ w
        s = expit(z)
        grad = X.T @ (weights * (s - labels)) / n + 2 * reg_C * w
        if np.linalg.norm(grad) <= tol:
            break
        H = (X.T * (weights * s * (1 - s))) @ X / n + 2 * reg_C * np.eye(d)
        w = w - np.linalg.solve(H, grad)
    return w


class HyperCleaning(BilevelOracle):
    has_second_order = True
    has_ground_truth = False
    name = "hypercleaning"

    def __init__(self, data: Dataset, reg_C: float = DEFAULT_REG_C, batch_size: Optional[int] = None,
                 clean_train_y: Optional[np.ndarray] = None):
        if not reg_C > 0:
            raise InvalidArgumentError("reg_C must be positive")
        for split in ("train", "val"):
            if len(getattr(data, f"{split}_y")) == 0:
                raise InvalidArgumentError(f"empty {split} split")
        if len(np.unique(data.val_y)) < 2:
            raise InvalidArgumentError("validation set has a single class")
        self.data = data
        self.reg_C = float(reg_C)
        self.n = len(data.train_y)
        self.n_val = len(data.val_y)
        self.p, self.q = self.n, data.d
        self.batch_size = batch_size
        if batch_size is not None and not 1 <= batch_size:
            raise InvalidArgumentError("batch_size must be >= 1")
        self.clean_train_y = clean_train_y
        c_fy = float(np.max(np.sum(data.val_X**2, axis=1)))
        l_g = 0.25 * np.linalg.norm(data.train_X, 2) ** 2 / self.n + 2 * self.reg_C
        self.constants = ProblemConstants(mu_g=2 * self.reg_C, L_g=float(l_g), C_fy=c_fy)
        self._perm = lru_cache(maxsize=16)(self._draw_perm)

    # -- sampling -------------------------------------------------------------

    def _draw_perm(self, stream, seed, index, split):
        n = self.n if split == _TRAIN else self.n_val
        return key_rng(SampleKey(stream, seed, index, 0), salt=split).permutation(n)

    def _indices(self, key: Optional[SampleKey], split: int):
        n = self.n if split == _TRAIN else self.n_val
        if key is None or self.batch_size is None or self.batch_size >= n:
            return slice(None)
        m = self.batch_size
        chunks = -(-n // m)
        perm = self._perm(int(key.stream), int(key.seed), int(key.index), split)
        k = int(key.slot) % chunks
        return perm[k * m:(k + 1) * m]

    def _train(self, key):
        idx = self._indices(key, _TRAIN)
        return idx, self.data.train_X[idx], self.data.train_y[idx]

    def _val(self, key):
        idx = self._indices(key, _VAL)
        return self.data.val_X[idx], self.data.val_y[idx]

    # -- first order ----------------------------------------------------------

    def _grad_f_x(self, x, y, key):
        return np.zeros(self.p)

    def _grad_f_y(self, x, y, key):
        X, lab = self._val(key)
        return X.T @ (expit(X @ y) - lab) / len(lab)

    def _grad_g_y(self, x, y, key):
        idx, X, lab = self._train(key)
        wts = expit(x[idx])
        return X.T @ (wts * (expit(X @ y) - lab)) / len(lab) + 2 * self.reg_C * y

    def _grad_g_x(self, x, y, key):
        idx, X, lab = self._train(key)
        lam = x[idx]
        sw = expit(lam)
        out = np.zeros(self.p)
        # duplicate-free indices: plain assignment is exact
        out[idx] = sw * (1 - sw) * _ce(X @ y, lab) / len(lab)
        return out

    def _f_value(self, x, y):
        return np.mean(_ce(self.data.val_X @ y, self.data.val_y))

    def g_value(self, x, y) -> float:
        X, lab = self.data.train_X, self.data.train_y
        return float(np.mean(expit(x) * _ce(X @ y, lab)) + self.reg_C * y @ y)

    # -- second order ---------------------------------------------------------

    def _hess_g_yy_vec(self, x, y, v, key):
        idx, X, lab = self._train(key)
        s = expit(X @ y)
        return X.T @ (expit(x[idx]) * s * (1 - s) * (X @ v)) / len(lab) + 2 * self.reg_C * v

    def _jac_g_xy_vec(self, x, y, v, key):
        idx, X, lab = self._train(key)
        sw = expit(x[idx])
        out = np.zeros(self.p)
        out[idx] = sw * (1 - sw) * (expit(X @ y) - lab) * (X @ v) / len(lab)
        return out

    # -- evaluation -----------------------------------------------------------

    def lower_solution(self, x: np.ndarray, w0=None) -> np.ndarray:
        return fit_weighted_logistic(self.data.train_X, self.data.train_y, expit(x), self.reg_C, w0=w0)

    def grad_phi(self, x: np.ndarray) -> np.ndarray:
        """Numerical hypergradient: Newton-solved ``w*`` and a direct linear-system solve."""
        w = self.lower_solution(x)
        X, lab = self.data.train_X, self.data.train_y
        s = expit(X @ w)
        H = (X.T * (expit(x) * s * (1 - s))) @ X / self.n + 2 * self.reg_C * np.eye(self.q)
        pt = Point(x, w)
        v_star = np.linalg.solve(H, self.grad_f_y(pt))
        return self.grad_f_x(pt) - self.jac_g_xy_vec(pt, v_star)

    def phi(self, x: np.ndarray) -> float:
        return self.f_value(Point(x, self.lower_solution(x)))

    def test_accuracy(self, w: np.ndarray) -> float:
        pred = (self.data.test_X @ w > 0).astype(int)
        return float(np.mean(pred == self.data.test_y))

    def test_loss(self, w: np.ndarray) -> float:
        return float(np.mean(_ce(self.data.test_X @ w, self.data.test_y)))

    def initial_point(self, rng: np.random.Generator) -> Point:
        # uniform weights sigmoid(0) = 1/2 and a zero classifier
        return Point(np.zeros(self.p), np.zeros(self.q))


def make_hypercleaning(dataset: Dataset, corruption_p: float = 0.1, reg_C: float = DEFAULT_REG_C,
                       seed: int = 0, batch_size: Optional[int] = None) -> HyperCleaning:
    """Corrupt the training labels of ``dataset`` and wrap it as a bilevel oracle."""
    noisy, _ = corrupt_labels(dataset.train_y, corruption_p, seed)
    corrupted = replace(dataset, train_y=noisy)
    return HyperCleaning(corrupted, reg_C=reg_C, batch_size=batch_size, clean_train_y=dataset.train_y)
