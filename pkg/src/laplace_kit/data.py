"""Synthetic data sets and CSV I/O."""

import csv
import io
import math

import numpy as np

from laplace_kit import nn
from laplace_kit.errors import InvalidInput


def cluster_means(n_classes, dim, radius=2.0, seed=0):
    """Class centres: evenly spaced on a circle for 2-D, Gaussian draws otherwise."""
    if dim == 2:
        angles = 2 * math.pi * np.arange(n_classes) / n_classes
        return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    rng = np.random.default_rng([seed, 7919])
    return radius * rng.standard_normal((n_classes, dim)) / math.sqrt(dim) * math.sqrt(2.0)


def gaussian_clusters(n, noise=0.5, seed=0, n_classes=3, dim=2, radius=2.0, means_seed=None):
    """Isotropic Gaussian blobs; labels cycle through the classes.

    ``means_seed`` (default ``seed``) fixes the centres independently of the
    noise, so train and test splits can share them.
    """
    rng = np.random.default_rng(seed)
    means = cluster_means(n_classes, dim, radius, seed if means_seed is None else means_seed)
    y = np.arange(n) % n_classes
    X = means[y] + noise * rng.standard_normal((n, dim))
    return nn.Batch(X, y)


def sinusoid(n, noise=0.1, seed=0, low=-3.0, high=3.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, size=n)
    y = np.sin(x) + noise * rng.standard_normal(n)
    return nn.Batch(x[:, None], y[:, None])


def rotate(batch, degrees):
    """Rotate the first two feature dimensions counter-clockwise."""
    if batch.inputs.shape[1] < 2:
        raise InvalidInput("rotation needs at least two input features")
    a = math.radians(degrees)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    X = batch.inputs.copy()
    X[:, :2] = X[:, :2] @ R.T
    return nn.Batch(X, batch.targets.copy())


def batch_to_csv(batch, classification=True):
    X = batch.inputs
    y = np.asarray(batch.targets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [f"x{i}" for i in range(X.shape[1])]
    if classification:
        header.append("y")
    elif y.ndim == 2 and y.shape[1] > 1:
        header += [f"y{i}" for i in range(y.shape[1])]
    else:
        header.append("y")
    w.writerow(header)
    for n in range(X.shape[0]):
        row = [repr(float(v)) for v in X[n]]
        if classification:
            row.append(str(int(y[n])))
        else:
            row += [repr(float(v)) for v in np.atleast_1d(y[n])]
        w.writerow(row)
    return buf.getvalue()


def write_csv(path, batch, classification=True):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(batch_to_csv(batch, classification))


def read_csv(path, classification=True):
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise InvalidInput(f"{path}: empty file")
    header = rows[0]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    y_cols = [i for i, h in enumerate(header) if h == "y" or (h.startswith("y") and h[1:].isdigit())]
    if not x_cols or not y_cols:
        raise InvalidInput(f"{path}: need x0..x{{M-1}} feature columns and a y column")
    body = rows[1:]
    if any(len(r) != len(header) for r in body):
        raise InvalidInput(f"{path}: ragged rows")
    try:
        X = np.array([[float(r[i]) for i in x_cols] for r in body], dtype=np.float64).reshape(len(body), len(x_cols))
        if classification:
            y = np.array([int(r[y_cols[0]]) for r in body], dtype=np.int64)
        else:
            y = np.array([[float(r[i]) for i in y_cols] for r in body]).reshape(len(body), len(y_cols))
    except ValueError as exc:
        raise InvalidInput(f"{path}: {exc}") from exc
    return nn.Batch(X, y)
