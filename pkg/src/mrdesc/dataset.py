"""Scene storage, synthetic scenes, negative mining and batch composition.

Scene directory layout::

    grid0000.png ...   16 x 16 grids of patches, row-major (96 px cells, or 64 px for MVS)
    info.txt           "point3d_id x y" per patch
    matches.txt        "idx_a idx_b" per matching pair
    test_pairs.txt     optional "idx_a idx_b label" evaluation pairs
    kind.txt           optional, "multi-image" (default) or "single-image"
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import patchpipe as pp

GRID_CELLS = 16
PER_GRID = GRID_CELLS * GRID_CELLS
KINDS = ("multi-image", "single-image")
RANGE_FRACTIONS = (0.0, 0.4, 0.8, 1.2, 1.6)
RANGE_RATIO = (4, 4, 6, 2)
SCALE_RATIO_BOUNDS = (1.0, 2.0)


class SceneError(Exception):
    pass


class MissingFileError(SceneError):
    pass


class FormatError(SceneError):
    pass


class IndexRangeError(SceneError):
    pass


class PatchCountError(SceneError):
    pass


@dataclass
class SceneStore:
    patches: np.ndarray          # N x 96 x 96, float64 in [0, 1]
    point_ids: np.ndarray        # N ints
    xy: np.ndarray               # N x 2
    matches: np.ndarray          # M x 2 ints
    kind: str = "multi-image"
    test_pairs: np.ndarray | None = None   # K x 3 ints (a, b, label)
    cell_size: int = pp.PATCH_SIZE
    name: str = ""

    def __post_init__(self):
        self.patches.setflags(write=False)

    def __len__(self) -> int:
        return len(self.patches)

    def groups(self) -> dict[int, list[int]]:
        """Patch indices grouped by 3D point id."""
        out: dict[int, list[int]] = {}
        for i, pid in enumerate(self.point_ids.tolist()):
            out.setdefault(pid, []).append(i)
        return out

    def match_set(self) -> set[tuple[int, int]]:
        return {(min(a, b), max(a, b)) for a, b in self.matches.tolist()}

    def held_out(self) -> set[tuple[int, int]]:
        if self.test_pairs is None:
            return set()
        return {(min(a, b), max(a, b)) for a, b, _ in self.test_pairs.tolist()}

    def train_matches(self) -> np.ndarray:
        """Matching pairs minus any held-out evaluation pairs."""
        held = self.held_out()
        keep = [(a, b) for a, b in self.matches.tolist() if (min(a, b), max(a, b)) not in held]
        return np.asarray(keep, dtype=np.int64).reshape(-1, 2)

    def validate(self) -> None:
        n = len(self.patches)
        if self.patches.shape[1:] != (pp.PATCH_SIZE, pp.PATCH_SIZE):
            raise PatchCountError(f"patches must be {pp.PATCH_SIZE}x{pp.PATCH_SIZE}")
        if len(self.point_ids) != n or len(self.xy) != n:
            raise PatchCountError(f"{n} patches but {len(self.point_ids)} info entries")
        if self.kind not in KINDS:
            raise FormatError(f"unknown scene kind {self.kind!r}")
        for label, pairs in (("matches", self.matches), ("test_pairs", self.test_pairs)):
            if pairs is None or not len(pairs):
                continue
            bad = (pairs[:, :2] < 0) | (pairs[:, :2] >= n)
            if bad.any():
                row = int(np.argmax(bad.any(axis=1)))
                raise IndexRangeError(f"{label}: pair {tuple(pairs[row, :2].tolist())} out of range for {n} patches")
        if self.kind == "multi-image" and len(self.matches):
            a, b = self.matches[:, 0], self.matches[:, 1]
            wrong = self.point_ids[a] != self.point_ids[b]
            if wrong.any():
                row = int(np.argmax(wrong))
                raise FormatError(f"match {tuple(self.matches[row].tolist())} joins different 3D points")


# scale ratio

def scale_ratio(f: float, d: float) -> float:
    """s = f / d for focal length f and depth d."""
    if d <= 0:
        raise ValueError(f"depth must be positive, got {d}")
    if f <= 0:
        raise ValueError(f"focal length must be positive, got {f}")
    return f / d


def accept_scale(s: float) -> bool:
    """Multi-image scene filter: keep observations with s in the open interval (1, 2)."""
    lo, hi = SCALE_RATIO_BOUNDS
    return lo < s < hi


@dataclass(frozen=True)
class ScaleInfo:
    f: float
    d: float

    @property
    def s(self) -> float:
        return scale_ratio(self.f, self.d)


# IO

def _read_lines(path: Path) -> list[tuple[int, list[str]]]:
    if not path.is_file():
        raise MissingFileError(f"{path}: missing")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if line:
            rows.append((lineno, line.split()))
    return rows


def _parse(path: Path, ncols: int, types) -> list[tuple]:
    out = []
    for lineno, tok in _read_lines(path):
        if len(tok) != ncols:
            raise FormatError(f"{path}:{lineno}: expected {ncols} fields, got {len(tok)}")
        try:
            out.append(tuple(t(v) for t, v in zip(types, tok)))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed line {' '.join(tok)!r}") from None
    return out


def _to_luma(img: Image.Image) -> np.ndarray:
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]) / 255.0


def load_scene(path) -> SceneStore:
    """Load a scene directory into memory (RGB -> luma, intensities in [0, 1])."""
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(f"{root}: scene directory not found")
    info = _parse(root / "info.txt", 3, (int, float, float))
    matches = _parse(root / "matches.txt", 2, (int, int))
    test_path = root / "test_pairs.txt"
    test = _parse(test_path, 3, (int, int, int)) if test_path.exists() else None
    kind = "multi-image"
    if (root / "kind.txt").exists():
        kind = (root / "kind.txt").read_text(encoding="ascii").strip()
        if kind not in KINDS:
            raise FormatError(f"{root / 'kind.txt'}:1: unknown scene kind {kind!r}")

    grids = sorted(p for p in root.iterdir() if re.fullmatch(r"grid\d{4}\.png", p.name))
    n = len(info)
    need = math.ceil(n / PER_GRID)
    if len(grids) != need or [p.name for p in grids] != [f"grid{i:04d}.png" for i in range(need)]:
        raise PatchCountError(f"{root}: {n} info entries need {need} grid images, found {len(grids)}")
    cells = []
    cell_size = None
    for g in grids:
        with Image.open(g) as img:
            arr = _to_luma(img)
        if arr.shape[0] != arr.shape[1] or arr.shape[0] % GRID_CELLS:
            raise FormatError(f"{g}: grid image must be square with side divisible by {GRID_CELLS}")
        size = arr.shape[0] // GRID_CELLS
        if cell_size is None:
            cell_size = size
        elif size != cell_size:
            raise FormatError(f"{g}: cell size {size} differs from {cell_size}")
        cells.append(arr.reshape(GRID_CELLS, size, GRID_CELLS, size).transpose(0, 2, 1, 3).reshape(PER_GRID, size, size))
    patches = np.concatenate(cells)[:n] if cells else np.zeros((0, pp.PATCH_SIZE, pp.PATCH_SIZE))
    if cell_size not in (None, pp.PATCH_SIZE):
        patches = np.stack([pp.resize(p, pp.PATCH_SIZE) for p in patches])

    for lineno, (a, b) in enumerate(matches, 1):
        if not (0 <= a < n and 0 <= b < n):
            raise IndexRangeError(f"{root / 'matches.txt'}:{lineno}: pair ({a}, {b}) out of range for {n} patches")
    if test is not None:
        for lineno, (a, b, lab) in enumerate(test, 1):
            if not (0 <= a < n and 0 <= b < n):
                raise IndexRangeError(f"{test_path}:{lineno}: pair ({a}, {b}) out of range for {n} patches")
            if lab not in (0, 1):
                raise FormatError(f"{test_path}:{lineno}: label must be 0 or 1")

    store = SceneStore(
        patches=np.ascontiguousarray(patches, dtype=np.float64),
        point_ids=np.asarray([r[0] for r in info], dtype=np.int64),
        xy=np.asarray([r[1:] for r in info], dtype=np.float64).reshape(-1, 2),
        matches=np.asarray(matches, dtype=np.int64).reshape(-1, 2),
        kind=kind,
        test_pairs=None if test is None else np.asarray(test, dtype=np.int64).reshape(-1, 3),
        cell_size=cell_size or pp.PATCH_SIZE,
        name=root.name,
    )
    store.validate()
    return store


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def save_scene(scene: SceneStore, path) -> None:
    """Write ``scene`` in the directory layout read by :func:`load_scene`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n = len(scene)
    size = pp.PATCH_SIZE
    q = np.rint(np.clip(scene.patches, 0.0, 1.0) * 255.0).astype(np.uint8)
    for g in range(math.ceil(n / PER_GRID)):
        block = np.zeros((PER_GRID, size, size), dtype=np.uint8)
        chunk = q[g * PER_GRID:(g + 1) * PER_GRID]
        block[:len(chunk)] = chunk
        grid = block.reshape(GRID_CELLS, GRID_CELLS, size, size).transpose(0, 2, 1, 3).reshape(GRID_CELLS * size, -1)
        Image.fromarray(grid, mode="L").save(root / f"grid{g:04d}.png", optimize=False)
    info = "".join(f"{pid} {_fmt(x)} {_fmt(y)}\n" for pid, (x, y) in zip(scene.point_ids.tolist(), scene.xy.tolist()))
    (root / "info.txt").write_text(info, encoding="ascii", newline="\n")
    (root / "matches.txt").write_text("".join(f"{a} {b}\n" for a, b in scene.matches.tolist()),
                                      encoding="ascii", newline="\n")
    if scene.test_pairs is not None:
        (root / "test_pairs.txt").write_text("".join(f"{a} {b} {c}\n" for a, b, c in scene.test_pairs.tolist()),
                                             encoding="ascii", newline="\n")
    if scene.kind != "multi-image":
        (root / "kind.txt").write_text(scene.kind + "\n", encoding="ascii", newline="\n")


# synthetic scenes

def _render_source(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.5)
    for _ in range(size // 4):
        cx, cy = rng.uniform(0, size, 2)
        sig = rng.uniform(2.0, 12.0)
        img += rng.uniform(-0.25, 0.25) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
    return img


def _stamp_blob(img: np.ndarray, rng: np.random.Generator, cx: float, cy: float) -> None:
    """Add a distinctive textured blob centred on (cx, cy)."""
    size = img.shape[0]
    r = 40
    y0, y1 = max(0, int(cy) - r), min(size, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(size, int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    env = np.exp(-(dx * dx + dy * dy) / (2 * 18.0 ** 2))
    pattern = np.zeros_like(env)
    for _ in range(4):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(0.08, 0.3)
        phase = rng.uniform(0, 2 * math.pi)
        pattern += rng.uniform(0.3, 1.0) * np.cos(freq * (dx * math.cos(theta) + dy * math.sin(theta)) + phase)
    for _ in range(3):
        bx, by = rng.uniform(-20, 20, 2)
        sig = rng.uniform(3.0, 8.0)
        pattern += rng.uniform(-1.5, 1.5) * np.exp(-((dx - bx) ** 2 + (dy - by) ** 2) / (2 * sig * sig))
    img[y0:y1, x0:x1] += 0.2 * env * pattern


VIEW_RANGES = pp.AffineRanges(rotation=(-math.pi / 6, math.pi / 6), scale=(0.85, 1.15),
                              shear=(-0.1, 0.1), translation=(-2.0, 2.0))


def gen_synth(num_points: int, patches_per_point: int, image_size: int = 512, seed: int = 0,
              out_path=None, kind: str = "multi-image", test_pos: int = 16, test_neg: int = 48) -> SceneStore:
    """Render a desk-scale scene with ground truth known by construction.

    Each 3D point is a textured blob in one source image; each view is a
    random affine resampling of its neighbourhood plus mild photometric
    change. Matches are all pairs of views of one point. Up to ``test_pos``
    matches and ``test_neg`` non-matches are held out in ``test_pairs``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if num_points < 1 or patches_per_point < 1:
        raise ValueError("need at least one point and one patch per point")
    if kind == "single-image":
        patches_per_point = 1
    rng = np.random.default_rng(seed)
    margin = 64
    if image_size < 2 * margin + 1:
        raise ValueError(f"image_size must exceed {2 * margin}")
    img = _render_source(rng, image_size)
    centres = []
    for _ in range(num_points):
        for _attempt in range(1000):
            c = rng.uniform(margin, image_size - margin, 2)
            if all(np.hypot(*(c - o)) > 24.0 for o in centres):
                break
        centres.append(c)
        _stamp_blob(img, rng, float(c[0]), float(c[1]))
    img += 0.02 * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)

    pc = (pp.PATCH_SIZE - 1) / 2.0
    patches, pids, xy = [], [], []
    for pid, (cx, cy) in enumerate(centres):
        for v in range(patches_per_point):
            params = pp.IDENTITY if v == 0 else pp.sample_affine(rng, VIEW_RANGES)
            # image -> patch: centre the point, then apply the view distortion
            m = pp.affine_matrix(params, pp.PATCH_SIZE) @ pp._translate(pc - cx, pc - cy)
            patch = pp.warp(img, m, (pp.PATCH_SIZE, pp.PATCH_SIZE))
            gain, bias = rng.uniform(0.9, 1.1), rng.uniform(-0.05, 0.05)
            patch = np.clip(gain * (patch - 0.5) + 0.5 + bias, 0.0, 1.0)
            patches.append(np.rint(patch * 255.0) / 255.0)
            pids.append(pid)
            xy.append((round(float(cx), 2), round(float(cy), 2)))
    n = len(patches)
    matches = [(pid * patches_per_point + i, pid * patches_per_point + j)
               for pid in range(num_points) for i in range(patches_per_point) for j in range(i + 1, patches_per_point)]
    test = _pick_test_pairs(rng, np.asarray(pids), matches, test_pos, test_neg)
    scene = SceneStore(
        patches=np.stack(patches), point_ids=np.asarray(pids, dtype=np.int64),
        xy=np.asarray(xy, dtype=np.float64).reshape(n, 2),
        matches=np.asarray(matches, dtype=np.int64).reshape(-1, 2), kind=kind,
        test_pairs=test, name=Path(out_path).name if out_path else "synth",
    )
    scene.validate()
    if out_path is not None:
        try:
            save_scene(scene, out_path)
        except OSError as exc:
            raise SceneError(f"{out_path}: cannot write scene ({exc.strerror or exc})") from exc
    return scene


def _pick_test_pairs(rng, pids: np.ndarray, matches: list, n_pos: int, n_neg: int) -> np.ndarray | None:
    n_pos = min(n_pos, len(matches) // 2)
    chosen_pos = sorted(rng.choice(len(matches), size=n_pos, replace=False).tolist()) if n_pos else []
    negs = [(a, b) for a in range(len(pids)) for b in range(a + 1, len(pids)) if pids[a] != pids[b]]
    n_neg = min(n_neg, len(negs) // 2)
    chosen_neg = sorted(rng.choice(len(negs), size=n_neg, replace=False).tolist()) if n_neg else []
    rows = [(*matches[i], 1) for i in chosen_pos] + [(*negs[i], 0) for i in chosen_neg]
    if not rows:
        return None
    return np.asarray(rows, dtype=np.int64)


# mining

@dataclass
class PoolIndex:
    """Descriptors and distances for one epoch's mining snapshot."""
    subset: np.ndarray            # S patch indices, ascending
    descriptors: np.ndarray       # S x D
    distances: np.ndarray         # S x S
    match_pairs: np.ndarray       # K x 2 training matches used for range stratification
    match_distances: np.ndarray   # K
    point_ids: np.ndarray         # point id for each subset member

    def distance(self, i: int, j: int) -> float:
        pos = {int(v): k for k, v in enumerate(self.subset)}
        return float(self.distances[pos[i], pos[j]])


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def describe_patches(net, scene: SceneStore, indices) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    triples = pp.make_triples(scene.patches[indices])
    return net.describe(triples)


def embed_pool(net, scene: SceneStore, subset_size: int = 1024, seed=0, match_sample: int = 4096) -> PoolIndex:
    """Describe a uniformly drawn subset S of patches and all distances within it.

    Also describes a sample of training matches so batches can be stratified
    by their current distance.
    """
    rng = np.random.default_rng(seed)
    n = len(scene)
    if subset_size >= n:
        subset = np.arange(n)
    else:
        subset = np.sort(rng.choice(n, size=subset_size, replace=False))
    matches = scene.train_matches()
    if len(matches) > match_sample:
        matches = matches[np.sort(rng.choice(len(matches), size=match_sample, replace=False))]
    needed = np.unique(np.concatenate([subset, matches.ravel()]))
    desc = describe_patches(net, scene, needed).astype(np.float64)
    pos = np.searchsorted(needed, subset)
    sub_desc = desc[pos]
    if len(matches):
        da = desc[np.searchsorted(needed, matches[:, 0])]
        db = desc[np.searchsorted(needed, matches[:, 1])]
        mdist = np.sqrt(((da - db) ** 2).sum(1))
    else:
        mdist = np.zeros(0)
    return PoolIndex(subset=subset, descriptors=sub_desc, distances=pairwise_distances(sub_desc, sub_desc),
                     match_pairs=matches, match_distances=mdist, point_ids=scene.point_ids[subset])


@dataclass
class NegativePool:
    anchors: np.ndarray     # K
    partners: np.ndarray    # K
    buckets: np.ndarray     # K, slot bucket 1 or 2
    fallback: np.ndarray    # K bool, True if drawn past its bucket
    warnings: int = 0       # anchors with fewer than 6 eligible partners

    def __len__(self) -> int:
        return len(self.anchors)

    def pairs(self) -> np.ndarray:
        return np.stack([self.anchors, self.partners], axis=1)


def mine_negatives(pool: PoolIndex, scene: SceneStore, rng: np.random.Generator,
                   per_bucket: tuple[int, int] = (4, 2)) -> NegativePool:
    """For each anchor, sort other subset members by distance into quartile
    buckets and draw 4 partners from bucket 1 and 2 from bucket 2, skipping
    members of the anchor's own 3D point and known matches. A short bucket
    is topped up with the next-nearest eligible members."""
    blocked = scene.match_set() | scene.held_out()
    subset = pool.subset
    ids = pool.point_ids
    order_idx = np.arange(len(subset))
    anchors, partners, buckets, fallback = [], [], [], []
    warnings = 0
    for a in range(len(subset)):
        others = order_idx[order_idx != a]
        # ascending distance, ties by patch index
        ranked = others[np.lexsort((subset[others], pool.distances[a, others]))]
        pa = int(subset[a])
        eligible = np.array([ids[j] != ids[a] and (min(pa, int(subset[j])), max(pa, int(subset[j]))) not in blocked
                             for j in ranked], dtype=bool)
        split = np.array_split(np.arange(len(ranked)), 4)
        taken = np.zeros(len(ranked), dtype=bool)
        got = 0
        for b, want in enumerate(per_bucket):
            members = split[b] if b < len(split) else np.zeros(0, dtype=np.intp)
            cand = members[eligible[members] & ~taken[members]]
            k = min(want, len(cand))
            pick = rng.choice(cand, size=k, replace=False) if k else np.zeros(0, dtype=np.intp)
            taken[pick] = True
            chosen = [(int(p), False) for p in pick]
            if k < want and len(members):
                beyond = np.arange(members[-1] + 1, len(ranked))
                extra = beyond[eligible[beyond] & ~taken[beyond]][: want - k]
                taken[extra] = True
                chosen += [(int(p), True) for p in extra]
            for p, fb in chosen:
                anchors.append(pa)
                partners.append(int(subset[ranked[p]]))
                buckets.append(b + 1)
                fallback.append(fb)
            got += len(chosen)
        if got < sum(per_bucket):
            warnings += 1
    return NegativePool(np.asarray(anchors, dtype=np.int64), np.asarray(partners, dtype=np.int64),
                        np.asarray(buckets, dtype=np.int64), np.asarray(fallback, dtype=bool), warnings)


# batches

@dataclass
class PairBatch:
    idx_a: np.ndarray
    idx_b: np.ndarray
    labels: np.ndarray
    composition: dict = field(default_factory=dict)
    kind: str = "multi-image"
    # single-image batches carry their synthesized second patches
    patches_b: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def range_edges(margin: float) -> np.ndarray:
    return np.asarray([f * margin for f in RANGE_FRACTIONS])


def range_of(distances: np.ndarray, margin: float) -> np.ndarray:
    """Matching-distance range 0..3; distances past 1.6 m count as range 3."""
    inner = range_edges(margin)[1:4]
    return np.searchsorted(inner, distances, side="right")


def split_counts(total: int, ratio=RANGE_RATIO) -> list[int]:
    """Apportion ``total`` by ``ratio`` with largest remainders (16 -> 4/4/6/2)."""
    s = sum(ratio)
    raw = [total * r / s for r in ratio]
    counts = [int(math.floor(x)) for x in raw]
    rest = total - sum(counts)
    for i in sorted(range(len(ratio)), key=lambda i: (-(raw[i] - counts[i]), i))[:rest]:
        counts[i] += 1
    return counts


def _draw(rng, pool: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(pool, size=k, replace=len(pool) < k)


def sample_batch(scene: SceneStore, pool: PoolIndex, negatives: NegativePool, rng: np.random.Generator,
                 margin: float = 2.0, batch_size: int = 64, n_pos: int | None = None,
                 carry: list | None = None, carry_cap: int | None = None) -> PairBatch:
    """Compose one batch: range-stratified positives, mined and carried negatives, shuffled.

    ``carry`` is a queue of (a, b) negative pairs re-used from the previous
    epoch; up to ``carry_cap`` (default a quarter of the negative slots) are
    consumed from its front.
    """
    n_pos = batch_size // 4 if n_pos is None else n_pos
    n_neg = batch_size - n_pos
    if not len(pool.match_pairs):
        raise SceneError(f"scene {scene.name!r} has no training matches")
    if not len(negatives) and not carry:
        raise SceneError(f"scene {scene.name!r} has no negatives to sample")
    want = split_counts(n_pos)
    ranges = range_of(pool.match_distances, margin)
    by_range = [np.flatnonzero(ranges == r) for r in range(4)]
    populated = [r for r in range(4) if len(by_range[r])]
    drawn_from = [0, 0, 0, 0]
    substitutions = 0
    pos_rows = []
    for r, k in enumerate(want):
        src = r
        if not len(by_range[r]):
            src = min(populated, key=lambda j: (abs(j - r), j))
            substitutions += k
        pos_rows.append(_draw(rng, by_range[src], k))
        drawn_from[src] += k
    pos_rows = np.concatenate(pos_rows)
    pos_pairs = pool.match_pairs[pos_rows]

    carry_cap = n_neg // 4 if carry_cap is None else carry_cap
    taken_carry = []
    if carry:
        while carry and len(taken_carry) < carry_cap:
            taken_carry.append(carry.pop(0))
    n_mined = n_neg - len(taken_carry)
    rows = _draw(rng, np.arange(len(negatives)), n_mined)
    neg_pairs = np.concatenate([np.asarray(taken_carry, dtype=np.int64).reshape(-1, 2),
                                negatives.pairs()[rows].reshape(-1, 2)])
    bucket_counts = {1: int((negatives.buckets[rows] == 1).sum()), 2: int((negatives.buckets[rows] == 2).sum()),
                     "carry": len(taken_carry)}

    pairs = np.concatenate([pos_pairs, neg_pairs])
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
    perm = rng.permutation(batch_size)
    composition = {
        "n_pos": n_pos, "n_neg": n_neg, "requested": want, "drawn_from": drawn_from,
        "substitutions": substitutions, "negative_buckets": bucket_counts,
        "range_edges": range_edges(margin).tolist(),
    }
    return PairBatch(pairs[perm, 0], pairs[perm, 1], labels[perm], composition)


def synth_pair_single_image(scene: SceneStore, rng: np.random.Generator, match: bool,
                            params: pp.AffineParams | None = None,
                            ranges: pp.AffineRanges = pp.AffineRanges()):
    """(patch, affine-transformed patch, Y, (i, j)) from a single-image scene.

    The second patch is a fresh affine transform of patch i (Y=1) or of a
    different patch j (Y=0).
    """
    if scene.kind != "single-image":
        raise SceneError("synth_pair_single_image needs a single-image scene")
    n = len(scene)
    if not match and n < 2:
        raise SceneError("need at least two patches for a non-matching pair")
    i = int(rng.integers(n))
    j = i
    if not match:
        j = int(rng.integers(n - 1))
        j += j >= i
    if params is None:
        params = pp.sample_affine(rng, ranges)
    return scene.patches[i], pp.apply_affine(scene.patches[j], params), int(match), (i, j)


def sample_single_image_batch(scene: SceneStore, rng: np.random.Generator, batch_size: int = 64,
                              n_pos: int | None = None,
                              ranges: pp.AffineRanges = pp.AffineRanges()) -> PairBatch:
    n_pos = batch_size // 4 if n_pos is None else n_pos
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(batch_size - n_pos, dtype=np.int64)])
    labels = labels[rng.permutation(batch_size)]
    ia, ib, pb = [], [], []
    for y in labels:
        _, b, _, (i, j) = synth_pair_single_image(scene, rng, bool(y), ranges=ranges)
        ia.append(i)
        ib.append(j)
        pb.append(b)
    composition = {"n_pos": n_pos, "n_neg": batch_size - n_pos, "substitutions": 0, "synthesized": True}
    return PairBatch(np.asarray(ia), np.asarray(ib), labels, composition, kind="single-image",
                     patches_b=np.stack(pb))
