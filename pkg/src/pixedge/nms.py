"""Orientation-aware non-maximal suppression of soft edge maps."""

import numpy as np
from scipy.ndimage import correlate1d

from .imagecore import as_map


def gaussian_kernel(sigma):
    """Sampled Gaussian truncated at 3 sigma and normalized to sum 1."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def smooth(edge_map, sigma):
    k = gaussian_kernel(sigma)
    out = correlate1d(as_map(edge_map), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def central_gradient(img):
    """``(gy, gx)`` by central differences; borders replicate the edge pixel."""
    p = np.pad(img, 1, mode="edge")
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    return gy, gx


def estimate_orientation(edge_map, sigma=2.0):
    """Edge orientation in [0, pi) at every pixel.

    The orientation is perpendicular to the central-difference gradient of
    the smoothed map: ``atan2(gy, gx) + pi/2 (mod pi)``, with rows as ``y``.
    Pixels whose gradient vanishes get 0.
    """
    e = as_map(edge_map)
    s = smooth(e, sigma)
    gy, gx = central_gradient(s)
    theta = np.mod(np.arctan2(gy, gx) + np.pi / 2, np.pi)
    flat = np.hypot(gx, gy) <= 1e-12 * max(1.0, float(np.abs(e).max()))
    theta[flat] = 0.0
    # mod can return pi itself for tiny negative angles
    theta[theta >= np.pi] = 0.0
    return theta


def _bilinear_zero(img, ys, xs):
    """Bilinear samples of ``img`` with zeros outside the grid."""
    h, w = img.shape
    padded = np.pad(img, 1)
    ys = np.clip(ys + 1, 0, h + 1)
    xs = np.clip(xs + 1, 0, w + 1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w)
    fy = ys - y0
    fx = xs - x0
    return (
        padded[y0, x0] * (1 - fy) * (1 - fx)
        + padded[y0, x0 + 1] * (1 - fy) * fx
        + padded[y0 + 1, x0] * fy * (1 - fx)
        + padded[y0 + 1, x0 + 1] * fy * fx
    )


def suppress(edge_map, orientation):
    """Zero every pixel that is below either neighbour one step along the edge normal.

    Ties are kept (``>=``) so flat-topped ridges survive.
    """
    e = as_map(edge_map)
    theta = np.asarray(orientation, dtype=np.float64)
    if theta.shape != e.shape:
        raise ValueError(f"orientation {theta.shape} does not match map {e.shape}")
    # unit normal to the edge direction (cos t, sin t)
    ny, nx = -np.cos(theta), np.sin(theta)
    rows, cols = np.indices(e.shape, dtype=np.float64)
    ahead = _bilinear_zero(e, rows + ny, cols + nx)
    behind = _bilinear_zero(e, rows - ny, cols - nx)
    keep = (e >= ahead) & (e >= behind) & (e > 0)
    return np.where(keep, e, 0.0)


def thin_edges(edge_map, sigma=2.0):
    """Estimate orientation and suppress in one call."""
    return suppress(edge_map, estimate_orientation(edge_map, sigma))
