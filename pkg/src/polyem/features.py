"""Fixed feature extraction shared by every detector head.

The detector heads are linear, so spatial context has to come from here. A
per-cell descriptor stacks square and strip averages of the standardized
channels at a few scales, and an optional fixed random ReLU layer adds
nonlinear combinations of them. Nothing in this module is trained.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

SQUARE_SIZES = (3, 7, 13, 21)
STRIP_LENGTHS = (11, 21, 31)
STRIP_THICKNESS = 3


def standardize(values: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Z-score every channel over the grid; constant channels become zero."""
    v = np.asarray(values, dtype=np.float64)
    flat = v.reshape(-1, v.shape[-1])
    mu = flat.mean(axis=0)
    sd = np.maximum(flat.std(axis=0), floor)
    return (v - mu) / sd


def descriptor_dim(feature_dim: int) -> int:
    return feature_dim * (len(SQUARE_SIZES) + 2 * len(STRIP_LENGTHS))


def cell_descriptors(features: np.ndarray) -> np.ndarray:
    """(H, W, F) grid -> (H, W, D) descriptors, float64.

    Window means use zero padding, computed from one integral image.
    """
    f = np.asarray(features, dtype=np.float64)
    h, w, c = f.shape
    pad = max(SQUARE_SIZES + STRIP_LENGTHS) // 2 + 1
    integral = np.zeros((h + 2 * pad + 1, w + 2 * pad + 1, c))
    integral[1 + pad : 1 + pad + h, 1 + pad : 1 + pad + w] = f
    integral = integral.cumsum(axis=0).cumsum(axis=1)

    def box_mean(kh, kw):
        r0, c0 = pad - kh // 2, pad - kw // 2
        r1, c1 = r0 + kh, c0 + kw
        s = (
            integral[r1 : r1 + h, c1 : c1 + w]
            - integral[r0 : r0 + h, c1 : c1 + w]
            - integral[r1 : r1 + h, c0 : c0 + w]
            + integral[r0 : r0 + h, c0 : c0 + w]
        )
        return s / (kh * kw)

    out = [box_mean(k, k) for k in SQUARE_SIZES]
    out += [box_mean(STRIP_THICKNESS, n) for n in STRIP_LENGTHS]
    out += [box_mean(n, STRIP_THICKNESS) for n in STRIP_LENGTHS]
    return np.concatenate(out, axis=2)


def block_edges(n: int, stride: int) -> np.ndarray:
    """Start offsets of the ``stride``-sized blocks covering ``n`` cells (last may be short)."""
    return np.arange(0, n, stride)


def block_mean(values: np.ndarray, stride: int) -> np.ndarray:
    """Average an (H, W, C) grid over non-overlapping ``stride x stride`` blocks."""
    if stride == 1:
        return np.asarray(values, dtype=np.float64)
    h, w = values.shape[:2]
    r, c = block_edges(h, stride), block_edges(w, stride)
    sums = np.add.reduceat(np.add.reduceat(values, r, axis=0), c, axis=1)
    counts = np.outer(np.diff(np.append(r, h)), np.diff(np.append(c, w)))
    return sums / counts[:, :, None]


def bilinear(features: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample an (H, W, F) grid at continuous points (..., 2) -> (..., F).

    Cell ``(i, j)`` has its centre at ``(j + 0.5, i + 0.5)``; outside the
    grid the field is zero.
    """
    h, w, f = features.shape
    padded = np.zeros((h + 2, w + 2, f))
    padded[1:-1, 1:-1] = features
    flat = padded.reshape(-1, f)
    pts = np.asarray(pts, dtype=np.float64)
    lead = pts.shape[:-1]
    u = np.clip(pts[..., 0].ravel() + 0.5, 0.0, w + 1.0)
    v = np.clip(pts[..., 1].ravel() + 0.5, 0.0, h + 1.0)
    j0 = np.minimum(np.floor(u).astype(np.int64), w)
    i0 = np.minimum(np.floor(v).astype(np.int64), h)
    du = (u - j0)[:, None]
    dv = (v - i0)[:, None]
    base = i0 * (w + 2) + j0
    out = (
        flat[base] * ((1 - du) * (1 - dv))
        + flat[base + 1] * (du * (1 - dv))
        + flat[base + w + 2] * ((1 - du) * dv)
        + flat[base + w + 3] * (du * dv)
    )
    return out.reshape(lead + (f,))


@lru_cache(maxsize=8)
def random_projection(dim_in: int, units: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed Gaussian weights and biases for a random ReLU feature expansion."""
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(dim_in), size=(dim_in, units))
    b = rng.normal(0.0, 0.5, size=units)
    w.flags.writeable = False
    b.flags.writeable = False
    return w, b


def expand(descriptors: np.ndarray, units: int, seed: int) -> np.ndarray:
    """Append ``units`` random ReLU features to each descriptor vector."""
    if units == 0:
        return descriptors
    w, b = random_projection(descriptors.shape[-1], units, seed)
    hidden = np.maximum(descriptors @ w + b, 0.0)
    return np.concatenate([descriptors, hidden], axis=-1)
