"""Spatial transformation of images, label maps and displacement fields.

A displacement is a ``(2, H, W)`` grid of pixel offsets ``(dy, dx)``. Warping
pulls intensities: ``out(p) = img(p + d(p))``. Samples falling outside the image
are clamped to the nearest edge pixel.
"""

from __future__ import annotations

import numpy as np

from . import gridmath as gm
from .gridmath import Grid, ShapeError

ONEHOT_TOL = 1e-6


def _base_coords(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    return np.stack([yy, xx])


def identity_displacement(h: int, w: int) -> Grid:
    if h < 2 or w < 2:
        raise ValueError(f"degenerate grid size {h}x{w}")
    return Grid(np.zeros((2, h, w)))


def _check_disp(img: Grid, d: Grid) -> None:
    if d.data.ndim != 3 or d.shape[0] != 2:
        raise ShapeError(f"displacement must be (2, H, W), got {d.shape}")
    if img.shape[-2:] != d.shape[-2:]:
        raise ShapeError(f"image {img.shape} and displacement {d.shape} differ in size")


def warp_image(img, d, mode: str = "bilinear") -> Grid:
    """Resample ``img`` at ``p + d(p)``.

    Bilinear mode is differentiable in both arguments. Nearest mode returns a
    plain (unrecorded) grid and is meant for hard label maps.
    """
    img, d = gm.as_grid(img), gm.as_grid(d)
    squeeze = img.data.ndim == 2
    if squeeze:
        img = gm.reshape(img, (1,) + img.shape)
    _check_disp(img, d)
    h, w = d.shape[1:]
    if mode == "bilinear":
        coords = gm.add(d, _base_coords(h, w))
        out = gm.bilinear_sample(img, coords)
    elif mode == "nearest":
        out = Grid(_nearest(img.data, d.data))
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return gm.reshape(out, out.shape[1:]) if squeeze else out


def _nearest(data: np.ndarray, disp: np.ndarray) -> np.ndarray:
    _, h, w = data.shape
    base = _base_coords(h, w)
    y = np.clip(np.rint(base[0] + disp[0]), 0, h - 1).astype(np.intp)
    x = np.clip(np.rint(base[1] + disp[1]), 0, w - 1).astype(np.intp)
    return data[:, y, x]


def warp_labels(labels: np.ndarray, d) -> np.ndarray:
    """Nearest-neighbour warp of an integer label map ``(H, W)``."""
    disp = d.data if isinstance(d, Grid) else np.asarray(d)
    return _nearest(np.asarray(labels)[None], disp)[0]


def warp_onehot(labels, d) -> Grid:
    """Channel-wise bilinear warp of a one-hot ``(K, H, W)`` map."""
    labels = gm.as_grid(labels)
    v = labels.data
    if v.ndim != 3:
        raise ShapeError(f"one-hot map must be (K, H, W), got {v.shape}")
    if v.min() < -ONEHOT_TOL or v.max() > 1 + ONEHOT_TOL:
        raise ValueError("one-hot values must lie in [0, 1]")
    if np.abs(v.sum(axis=0) - 1.0).max() > ONEHOT_TOL:
        raise ValueError("one-hot channels must sum to 1 at every pixel")
    return warp_image(labels, d)


def compose(d1, d2) -> Grid:
    """Displacement of ``p -> q + d1(q)`` with ``q = p + d2(p)``."""
    d1, d2 = gm.as_grid(d1), gm.as_grid(d2)
    if d1.shape != d2.shape:
        raise ShapeError(f"cannot compose {d1.shape} with {d2.shape}")
    return gm.add(d2, warp_image(d1, d2))


def sample_at(field, points) -> Grid:
    """Bilinear samples of ``field`` (C, H, W) at ``points`` ``(N, 2)`` -> ``(C, N)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return gm.bilinear_sample(field, pts.T.copy())


def invert(d, iterations: int = 50) -> Grid:
    """Fixed-point inverse ``v(q) = -d(q + v(q))`` of a smooth displacement."""
    disp = d.data if isinstance(d, Grid) else np.asarray(d)
    v = -disp.copy()
    for _ in range(iterations):
        v = -warp_image(Grid(disp), Grid(v)).data
    return Grid(v)
