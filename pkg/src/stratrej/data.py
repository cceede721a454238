"""Synthetic labelled distributions, IDX loading, and seeded splits."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file is malformed; the message names the offending field."""


@dataclass(frozen=True)
class Dataset:
    """Labelled points ``x`` of shape (n, d) with labels ``y`` in ``[0, k)``.

    ``margin`` (optional) returns the signed l-inf distance of each row to the
    true decision boundary, positive on the class-1 side. ``box`` is the input
    domain as ``(lo, hi)`` or ``None`` for an unbounded domain.
    """

    x: np.ndarray
    y: np.ndarray
    k: int
    margin: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    box: tuple[float, float] | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.y, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("dataset must be a nonempty 2-D array of points")
        if y.shape != (x.shape[0],):
            raise ValueError("label count does not match point count")
        if not np.all(np.isfinite(x)):
            raise ValueError("coordinates must be finite")
        if np.any(y < 0) or np.any(y >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.k, self.margin, self.box)


@dataclass(frozen=True)
class SyntheticSpec:
    """Which synthetic family to draw, with its parameters.

    Families: ``two_gaussians`` (separation, sigma), ``annulus`` (r_in, r_out)
    and ``tightness`` (alpha, beta, epsilon).
    """

    family: str
    params: dict
    n: int
    seed: int = 0


def linear_margin(w, b) -> Callable[[np.ndarray], np.ndarray]:
    """Signed l-inf distance to the hyperplane ``w.x + b = 0``."""
    w = np.asarray(w, dtype=np.float64)
    norm1 = np.abs(w).sum()

    def margin(x):
        return (np.atleast_2d(x) @ w + b) / norm1

    return margin


def circle_margin(radius: float) -> Callable[[np.ndarray], np.ndarray]:
    """Signed l-inf distance to the Euclidean circle ``|x|_2 = radius`` (outside positive)."""

    def reach(x, t):
        # smallest and largest Euclidean norm inside the l-inf box of half-width t
        t = np.asarray(t)[..., None]
        near = np.maximum(np.abs(x) - t, 0.0)
        far = np.abs(x) + t
        return np.linalg.norm(near, axis=1), np.linalg.norm(far, axis=1)

    def margin(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = np.linalg.norm(x, axis=1)
        lo = np.zeros(len(x))
        hi = np.full(len(x), abs(radius) + np.abs(x).max(initial=0.0) + 1.0)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            near, far = reach(x, mid)
            hit = (near <= radius) & (far >= radius)
            hi = np.where(hit, mid, hi)
            lo = np.where(hit, lo, mid)
        return np.where(r >= radius, hi, -hi)

    return margin


def _two_gaussians(params, n, rng):
    sep = float(params.get("separation", 3.0))
    sigma = float(params.get("sigma", 1.0))
    if sep <= 0 or sigma <= 0:
        raise ValueError("two_gaussians needs positive separation and sigma")
    # means sit on the diagonal so both coordinates matter under l-inf attacks
    direction = np.array([1.0, 1.0]) / np.sqrt(2.0)
    y = rng.integers(0, 2, size=n)
    sign = np.where(y == 1, 1.0, -1.0)
    x = sign[:, None] * (0.5 * sep) * direction + sigma * rng.standard_normal((n, 2))
    return x, y, linear_margin(direction, 0.0)


def _annulus(params, n, rng):
    r_in = float(params.get("r_in", 1.0))
    r_out = float(params.get("r_out", 2.0))
    if not 0 < r_in < r_out:
        raise ValueError("annulus needs 0 < r_in < r_out")
    y = rng.integers(0, 2, size=n)
    # uniform over area: inner disk for class 0, ring for class 1
    u = rng.uniform(size=n)
    r = np.where(y == 0, r_in * np.sqrt(u), np.sqrt(r_in**2 + u * (r_out**2 - r_in**2)))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return x, y, circle_margin(r_in)


def _tightness(params, n, rng):
    alpha = float(params.get("alpha", 0.5))
    beta = float(params.get("beta", 0.4))
    eps = float(params.get("epsilon", 0.3))
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("tightness alpha must lie in [0, 1]")
    if not 0.0 < beta < 0.5:
        raise ValueError("tightness beta must lie in (0, 0.5)")
    if eps <= 0:
        raise ValueError("tightness epsilon must be positive")
    values = np.array([-4 * eps, -alpha * eps / 4, alpha * eps / 4, 4 * eps])
    labels = np.array([0, 0, 1, 1])
    probs = np.array([(1 - beta) / 2, beta / 2, beta / 2, (1 - beta) / 2])
    which = rng.choice(4, size=n, p=probs)
    # base classifier of the construction is sign(x + eps)
    return values[which][:, None], labels[which], linear_margin([1.0], eps)


_FAMILIES = {"two_gaussians": _two_gaussians, "annulus": _annulus, "tightness": _tightness}


def generate(spec: SyntheticSpec) -> Dataset:
    if spec.n < 1:
        raise ValueError("n must be at least 1")
    try:
        family = _FAMILIES[spec.family]
    except KeyError:
        raise ValueError(f"unknown synthetic family {spec.family!r}") from None
    rng = np.random.default_rng(spec.seed)
    x, y, margin = family(dict(spec.params), spec.n, rng)
    return Dataset(x, y, 2, margin)


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint train/val/test subsets drawn by a seeded permutation."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(ds.n)
    n_train = int(round(fractions[0] * ds.n))
    n_val = int(round(fractions[1] * ds.n))
    n_val = min(n_val, ds.n - n_train)
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(ds.subset(np.sort(p)) for p in parts)


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.d)] + ["y"])
        for row, label in zip(ds.x, ds.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def _read_header(blob: bytes, magic: int, name: str, ndims: int):
    need = 4 * (1 + ndims)
    if len(blob) < need:
        raise IdxFormatError(f"{name}: truncated header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise IdxFormatError(f"{name}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", blob[4:need]), need


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-layout IDX image/label pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        images = fh.read()
    with open(labels_path, "rb") as fh:
        labels = fh.read()
    (n_img, rows, cols), off_i = _read_header(images, IMAGES_MAGIC, "images", 3)
    (n_lab,), off_l = _read_header(labels, LABELS_MAGIC, "labels", 1)
    if n_img != n_lab:
        raise IdxFormatError(f"count: {n_img} images but {n_lab} labels")
    if len(images) - off_i < n_img * rows * cols:
        raise IdxFormatError("images: truncated pixel data")
    if len(labels) - off_l < n_lab:
        raise IdxFormatError("labels: truncated label data")
    if n_img == 0:
        raise IdxFormatError("count: no images")
    pixels = np.frombuffer(images, dtype=np.uint8, count=n_img * rows * cols, offset=off_i)
    y = np.frombuffer(labels, dtype=np.uint8, count=n_lab, offset=off_l).astype(np.int64)
    x = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, y, max(int(y.max()) + 1, 2), box=(0.0, 1.0))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())
