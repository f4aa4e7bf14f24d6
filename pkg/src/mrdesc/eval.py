"""Patch-pair classification and keypoint matching metrics.

Distances between descriptors are accumulated one dimension at a time in
index order, so every metric here sees exactly the same floating-point
distances as a plain Python loop over the coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has an empty denominator."""


class HomographyError(ValueError):
    pass


@dataclass
class KeypointSet:
    positions: np.ndarray     # K x 2 (x, y)
    descriptors: np.ndarray   # K x D

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2 or len(self.descriptors) != len(self.positions):
            raise ValueError("need one descriptor row per keypoint")

    def __len__(self) -> int:
        return len(self.positions)


# pair classification

def _check_scores(distances, labels) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(distances, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if d.shape != y.shape:
        raise ValueError("distances and labels differ in length")
    if not np.isfinite(d).all() or (d < 0).any():
        raise ValueError("distances must be finite and non-negative")
    if not y.any() or y.all():
        raise UndefinedMetricError("need at least one match and one non-match")
    return d, y


def roc_points(distances, labels) -> list[tuple[float, float, float]]:
    """(threshold, tpr, fpr) for every distinct distance; pairs with d <= threshold are called matches."""
    d, y = _check_scores(distances, labels)
    order = np.argsort(d, kind="stable")
    d, y = d[order], y[order]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal distances: ties are admitted together
    last = np.flatnonzero(np.append(d[1:] != d[:-1], True))
    return [(float(d[i]), tp[i] / n_pos, fp[i] / n_neg) for i in last]


def fpr95(distances, labels) -> float:
    """False positive rate at the smallest threshold reaching 95% true positive rate."""
    d, y = _check_scores(distances, labels)
    order = np.argsort(d, kind="stable")
    d, y = d[order], y[order]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.flatnonzero(np.append(d[1:] != d[:-1], True))
    for i in last:
        if 100 * int(tp[i]) >= 95 * n_pos:
            return int(fp[i]) / n_neg
    return 1.0


# descriptor matching

def descriptor_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|A| x |B| Euclidean distances, summed over dimensions in index order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    acc = np.zeros((len(a), len(b)))
    for k in range(a.shape[1]):
        diff = a[:, k, None] - b[None, :, k]
        acc += diff * diff
    return np.sqrt(acc)


def _nonempty(*sets: KeypointSet) -> None:
    for s in sets:
        if len(s) == 0:
            raise ValueError("keypoint sets must be non-empty")


def nn_match(set_a: KeypointSet, set_b: KeypointSet) -> list[tuple[int, int, float]]:
    """For each a, its nearest b by descriptor distance (lowest index on ties)."""
    _nonempty(set_a, set_b)
    dist = descriptor_distances(set_a.descriptors, set_b.descriptors)
    best = dist.argmin(axis=1)
    return [(i, int(j), float(dist[i, j])) for i, j in enumerate(best)]


def mutual_nn(set_a: KeypointSet, set_b: KeypointSet) -> list[tuple[int, int, float]]:
    """Nearest-neighbour matches (a, b) where a is also b's nearest neighbour in A."""
    _nonempty(set_a, set_b)
    dist = descriptor_distances(set_a.descriptors, set_b.descriptors)
    best_b = dist.argmin(axis=1)
    best_a = dist.argmin(axis=0)
    return [(i, int(j), float(dist[i, j])) for i, j in enumerate(best_b) if best_a[j] == i]


def check_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.size != 9:
        raise HomographyError(f"homography needs 9 values, got {h.size}")
    h = h.reshape(3, 3)
    if not np.isfinite(h).all():
        raise HomographyError("homography has non-finite entries")
    if h[2, 2] == 0:
        raise HomographyError("homography cannot be normalized (h33 = 0)")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-12:
        raise HomographyError("homography is singular")
    return h


def project(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hom[:, :2] / hom[:, 2:3]
    out[hom[:, 2] == 0] = np.inf
    return out


def ground_truth(set_a: KeypointSet, set_b: KeypointSet, h, pixel_tol: float = 3.0) -> set[tuple[int, int]]:
    """One-to-one correspondences: pairs within ``pixel_tol`` after projecting A
    by ``h``, assigned greedily from the geometrically closest pair up."""
    if pixel_tol <= 0:
        raise ValueError("pixel_tol must be positive")
    h = check_homography(h)
    pa = project(h, set_a.positions)
    pb = set_b.positions
    geo = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    ia, ib = np.nonzero(geo <= pixel_tol)
    order = np.lexsort((ib, ia, geo[ia, ib]))
    used_a, used_b = set(), set()
    gt = set()
    for k in order:
        a, b = int(ia[k]), int(ib[k])
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        gt.add((a, b))
    return gt


def matching_score(set_a: KeypointSet, set_b: KeypointSet, h, pixel_tol: float = 3.0) -> float:
    """Fraction of ground-truth correspondences recovered by nearest-neighbour matching."""
    _nonempty(set_a, set_b)
    gt = ground_truth(set_a, set_b, h, pixel_tol)
    if not gt:
        raise UndefinedMetricError("no ground-truth correspondences within pixel tolerance")
    hits = sum((a, b) in gt for a, b, _ in nn_match(set_a, set_b))
    return hits / len(gt)


def average_precision(set_a: KeypointSet, set_b: KeypointSet, h, pixel_tol: float = 3.0) -> float:
    """AP of nearest-neighbour matches ranked by ascending distance (ties by index of a)."""
    _nonempty(set_a, set_b)
    gt = ground_truth(set_a, set_b, h, pixel_tol)
    if not gt:
        raise UndefinedMetricError("no ground-truth correspondences within pixel tolerance")
    ranked = sorted(nn_match(set_a, set_b), key=lambda m: (m[2], m[0]))
    hits = 0
    precisions = []
    for rank, (a, b, _) in enumerate(ranked, 1):
        if (a, b) in gt:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else 0.0


def mean_average_precision(pairs, pixel_tol: float = 3.0) -> float:
    """Mean AP over (set_a, set_b, homography) image pairs."""
    pairs = list(pairs)
    if not pairs:
        raise UndefinedMetricError("no image pairs")
    return sum(average_precision(a, b, h, pixel_tol) for a, b, h in pairs) / len(pairs)


# exchange formats

def write_descriptors(path, positions, descriptors) -> None:
    """ASCII descriptor file, one keypoint per line: ``x y d1 ... dK``."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    descriptors = np.asarray(descriptors)
    lines = []
    for (x, y), row in zip(positions.tolist(), descriptors):
        vals = " ".join(f"{v:.9g}" for v in row.tolist())
        lines.append(f"{x:.9g} {y:.9g} {vals}\n")
    Path(path).write_text("".join(lines), encoding="ascii", newline="\n")


def read_descriptors(path) -> KeypointSet:
    rows = []
    width = None
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
        if width is None:
            width = len(vals)
        if len(vals) != width or width < 3:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(vals)}")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no descriptors")
    arr = np.asarray(rows)
    return KeypointSet(arr[:, :2], arr[:, 2:])


def read_homography(path) -> np.ndarray:
    try:
        vals = [float(t) for t in Path(path).read_text(encoding="ascii").split()]
    except ValueError:
        raise HomographyError(f"{path}: non-numeric homography entry") from None
    return check_homography(vals)


def read_pairs(path) -> np.ndarray:
    """Pair list ``idx_a idx_b label`` per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'idx_a idx_b label'")
        try:
            a, b, lab = (int(t) for t in tok)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed pair") from None
        if lab not in (0, 1) or a < 0 or b < 0:
            raise ValueError(f"{path}:{lineno}: bad pair {line.strip()!r}")
        rows.append((a, b, lab))
    if not rows:
        raise ValueError(f"{path}: empty pair list")
    return np.asarray(rows, dtype=np.int64)


def pair_distances(desc_a: np.ndarray, desc_b: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    if pairs[:, 0].max() >= len(desc_a) or pairs[:, 1].max() >= len(desc_b):
        raise IndexError("pair references a descriptor row that does not exist")
    a = np.asarray(desc_a, dtype=np.float64)[pairs[:, 0]]
    b = np.asarray(desc_b, dtype=np.float64)[pairs[:, 1]]
    acc = np.zeros(len(pairs))
    for k in range(a.shape[1]):
        diff = a[:, k] - b[:, k]
        acc += diff * diff
    return np.sqrt(acc)
