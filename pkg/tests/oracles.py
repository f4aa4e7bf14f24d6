"""Brute-force reference implementations, written with plain Python loops."""
import math

import numpy as np

from mrdesc.eval import KeypointSet


def dist(u, v):
    acc = 0.0
    for a, b in zip(u, v):
        acc += (a - b) * (a - b)
    return math.sqrt(acc)


def fpr95_sweep(distances, labels):
    """Evaluate every threshold between (and beyond) the distinct distances."""
    d = [float(v) for v in distances]
    y = [bool(v) for v in labels]
    n_pos = sum(y)
    n_neg = len(y) - n_pos
    levels = sorted(set(d))
    cuts = [levels[0] - 1.0] + [(a + b) / 2 for a, b in zip(levels, levels[1:])] + [levels[-1] + 1.0]
    for t in cuts:
        tp = sum(1 for v, lab in zip(d, y) if lab and v < t)
        fp = sum(1 for v, lab in zip(d, y) if not lab and v < t)
        if 100 * tp >= 95 * n_pos:
            return fp / n_neg
    raise AssertionError("threshold above every distance must admit all positives")


def nn(desc_a, desc_b):
    out = []
    for i, u in enumerate(desc_a):
        best, best_d = None, None
        for j, v in enumerate(desc_b):
            dv = dist(u, v)
            if best_d is None or dv < best_d:
                best, best_d = j, dv
        out.append((i, best, best_d))
    return out


def mutual(desc_a, desc_b):
    back = {j: i for j, i, _ in nn(desc_b, desc_a)}
    return [(i, j, d) for i, j, d in nn(desc_a, desc_b) if back[j] == i]


def project(h, x, y):
    w = h[2][0] * x + h[2][1] * y + h[2][2]
    return (h[0][0] * x + h[0][1] * y + h[0][2]) / w, (h[1][0] * x + h[1][1] * y + h[1][2]) / w


def ground_truth(pos_a, pos_b, h, tol):
    h = [[v / h[2][2] for v in row] for row in np.asarray(h, dtype=float).tolist()]
    cands = []
    for i, (x, y) in enumerate(pos_a):
        px, py = project(h, x, y)
        for j, (bx, by) in enumerate(pos_b):
            g = math.hypot(px - bx, py - by)
            if g <= tol:
                cands.append((g, i, j))
    used_a, used_b, gt = set(), set(), set()
    for _, i, j in sorted(cands):
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            gt.add((i, j))
    return gt


def matching_score(a: KeypointSet, b: KeypointSet, h, tol=3.0):
    gt = ground_truth(a.positions.tolist(), b.positions.tolist(), h, tol)
    hits = sum(1 for i, j, _ in nn(a.descriptors.tolist(), b.descriptors.tolist()) if (i, j) in gt)
    return hits / len(gt)


def average_precision(a: KeypointSet, b: KeypointSet, h, tol=3.0):
    gt = ground_truth(a.positions.tolist(), b.positions.tolist(), h, tol)
    ranked = sorted(nn(a.descriptors.tolist(), b.descriptors.tolist()), key=lambda m: (m[2], m[0]))
    hits, total = 0, 0.0
    for rank, (i, j, _) in enumerate(ranked, 1):
        if (i, j) in gt:
            hits += 1
            total += hits / rank
    return total / hits if hits else 0.0


# random instances

def random_scores(rng, n_max=50):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[rng.choice(n, 2, replace=False)] = [0, 1]
    # a coarse grid makes ties common
    d = rng.integers(0, 12, n) * 0.25 + labels * rng.uniform(-0.5, 0.2, n).round(1)
    return np.abs(d), labels


def random_descriptors(rng, n_max=50, dim=8):
    na, nb = (int(v) for v in rng.integers(1, n_max + 1, 2))
    # small integer coordinates so equal distances occur
    return rng.integers(-3, 4, (na, dim)).astype(float), rng.integers(-3, 4, (nb, dim)).astype(float)


def random_homography(rng):
    h = np.eye(3)
    h[:2, :2] += rng.uniform(-0.1, 0.1, (2, 2))
    h[:2, 2] = rng.uniform(-10, 10, 2)
    h[2, :2] = rng.uniform(-1e-4, 1e-4, 2)
    return h


def random_matching_instance(rng, n_max=50, dim=8):
    """Two keypoint sets related by a homography with partial overlap and noisy descriptors."""
    n = int(rng.integers(2, n_max + 1))
    h = random_homography(rng)
    pos_a = rng.uniform(0, 200, (n, 2))
    hom = np.column_stack([pos_a, np.ones(n)]) @ h.T
    pos_b = hom[:, :2] / hom[:, 2:] + rng.normal(0, 1.5, (n, 2))
    desc_a = rng.standard_normal((n, dim))
    desc_b = desc_a + rng.normal(0, rng.uniform(0.1, 1.5), (n, dim))
    keep = rng.permutation(n)[: max(1, int(rng.integers(1, n + 1)))]
    return KeypointSet(pos_a, desc_a), KeypointSet(pos_b[keep], desc_b[keep]), h
