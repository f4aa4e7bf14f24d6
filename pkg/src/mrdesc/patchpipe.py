"""Patch geometry: multi-resolution views, normalization, perturbation and
affine pair synthesis.

All resampling is bilinear with edge clamping. Coordinates are pixel
centres: pixel (r, c) sits at x = c, y = r, and the centre of an n x n
patch is at ((n - 1) / 2, (n - 1) / 2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PATCH_SIZE = 96
VIEW_SIZE = 64
VAR_FLOOR = 1e-6

ROTATION_RANGE = (-math.pi / 8, math.pi / 8)
SCALE_RANGE = (1.0, 1.1)


@dataclass(frozen=True)
class AffineRanges:
    rotation: tuple[float, float] = ROTATION_RANGE
    scale: tuple[float, float] = (0.9, 1.1)
    shear: tuple[float, float] = (-0.1, 0.1)
    translation: tuple[float, float] = (-3.0, 3.0)


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    shear: float = 0.0
    tx: float = 0.0
    ty: float = 0.0


IDENTITY = AffineParams()


def check_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {patch.shape}")
    return patch


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` at float coordinates, clamping to the border."""
    h, w = image.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def warp(image: np.ndarray, matrix: np.ndarray, out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Resample ``image`` so that output pixel p shows source point ``matrix^-1 p``.

    ``matrix`` is a 3x3 homogeneous forward map (source -> output).
    """
    image = np.asarray(image, dtype=np.float64)
    oh, ow = out_shape or image.shape
    inv = np.linalg.inv(matrix) if not _is_identity(matrix) else np.eye(3)
    yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    if not (inv[2, 0] == 0 and inv[2, 1] == 0 and inv[2, 2] == 1):
        sw = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
        sx, sy = sx / sw, sy / sw
    return bilinear_sample(image, sx, sy)


def _is_identity(m: np.ndarray) -> bool:
    return bool(np.array_equal(m, np.eye(3)))


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a square image with pixel-centre alignment."""
    n = image.shape[0]
    ratio = n / size
    coords = (np.arange(size, dtype=np.float64) + 0.5) * ratio - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return bilinear_sample(np.asarray(image, dtype=np.float64), xx, yy)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    n = image.shape[0]
    lo = (n - size) // 2
    return image[lo:lo + size, lo:lo + size]


def normalize(view: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; views with variance below the floor map to zeros."""
    mean = view.mean()
    centred = view - mean
    var = float(np.mean(centred * centred))
    if var < VAR_FLOOR:
        return np.zeros_like(view)
    return centred / math.sqrt(var)


def raw_views(patch: np.ndarray) -> np.ndarray:
    """The three un-normalized 64x64 views: wide (96 -> 64), mid (crop 64), fine (crop 32 -> 64)."""
    patch = check_patch(patch)
    wide = resize(patch, VIEW_SIZE)
    mid = center_crop(patch, VIEW_SIZE).copy()
    fine = resize(center_crop(patch, 32), VIEW_SIZE)
    return np.stack([wide, mid, fine])


def make_triple(patch: np.ndarray) -> np.ndarray:
    """3 x 64 x 64 array of normalized (wide, mid, fine) views."""
    return np.stack([normalize(v) for v in raw_views(patch)])


def make_triples(patches: np.ndarray) -> np.ndarray:
    return np.stack([make_triple(p) for p in patches]) if len(patches) else np.zeros((0, 3, VIEW_SIZE, VIEW_SIZE))


# geometric transforms

def _translate(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _rotate(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _shear(k: float) -> np.ndarray:
    return np.array([[1.0, k, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _scale(sx: float, sy: float) -> np.ndarray:
    return np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])


def affine_matrix(params: AffineParams, size: int = PATCH_SIZE) -> np.ndarray:
    """Forward map about the patch centre: T(c + t) R Sh S T(-c)."""
    c = (size - 1) / 2.0
    if params == IDENTITY:
        return np.eye(3)
    return (_translate(c + params.tx, c + params.ty) @ _rotate(params.rotation) @ _shear(params.shear)
            @ _scale(params.scale_x, params.scale_y) @ _translate(-c, -c))


def sample_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    return AffineParams(
        rotation=float(rng.uniform(*ranges.rotation)),
        scale_x=float(rng.uniform(*ranges.scale)),
        scale_y=float(rng.uniform(*ranges.scale)),
        shear=float(rng.uniform(*ranges.shear)),
        tx=float(rng.uniform(*ranges.translation)),
        ty=float(rng.uniform(*ranges.translation)),
    )


def apply_affine(patch: np.ndarray, params: AffineParams) -> np.ndarray:
    patch = check_patch(patch)
    return warp(patch, affine_matrix(params, patch.shape[0]))


def sample_perturbation(rng: np.random.Generator) -> tuple[float, float]:
    """(angle, scale) uniform over [-pi/8, pi/8] x [1.0, 1.1]."""
    return float(rng.uniform(*ROTATION_RANGE)), float(rng.uniform(*SCALE_RANGE))


def perturb(patch: np.ndarray, rng: np.random.Generator | None = None,
            angle: float | None = None, scale: float | None = None) -> np.ndarray:
    """Random rotation and isotropic zoom about the centre.

    ``angle``/``scale`` override the random draw (both are drawn from ``rng``
    regardless, so forcing one value does not shift the stream).
    """
    if rng is not None:
        a, s = sample_perturbation(rng)
        angle = a if angle is None else angle
        scale = s if scale is None else scale
    angle = 0.0 if angle is None else angle
    scale = 1.0 if scale is None else scale
    return apply_affine(patch, AffineParams(rotation=angle, scale_x=scale, scale_y=scale))
