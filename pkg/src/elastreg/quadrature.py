"""Gauss-Legendre quadrature rules on the reference interval and square."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_1d(n: int):
    """n-point Gauss-Legendre rule on [0, 1]; exact for degree 2n-1."""
    if n < 1:
        raise ValueError("need at least one quadrature point")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def points_for_order(order: int) -> int:
    """Smallest point count whose 1D Gauss rule integrates degree `order` exactly."""
    if order < 0:
        raise ValueError("quadrature order must be non-negative")
    return order // 2 + 1


@lru_cache(maxsize=None)
def gauss_2d(n: int):
    """Tensor-product rule with n points per axis on [0, 1]^2.

    Returns (points, weights) with points of shape (n*n, 2), x running fastest.
    """
    x, w = gauss_1d(n)
    xx, yy = np.meshgrid(x, x, indexing="xy")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    wts = np.outer(w, w).ravel()
    return pts, wts


@lru_cache(maxsize=None)
def corner_refined_1d(n: int, depth: int):
    """Composite rule on [0, 1] geometrically graded toward t = 0.

    Splits off dyadic intervals [2^-(i+1), 2^-i] each carrying an n-point
    Gauss rule; used for integrands with an integrable endpoint singularity.
    """
    x, w = gauss_1d(n)
    pts, wts = [], []
    hi = 1.0
    for _ in range(depth):
        lo = hi / 2.0
        pts.append(lo + (hi - lo) * x)
        wts.append((hi - lo) * w)
        hi = lo
    # innermost sliver [0, hi] gets a plain rule as well
    pts.append(hi * x)
    wts.append(hi * w)
    return np.concatenate(pts), np.concatenate(wts)


@lru_cache(maxsize=None)
def corner_refined_2d(n: int, depth: int):
    """Composite tensor rule on [0, 1]^2 graded toward the origin corner."""
    x, w = corner_refined_1d(n, depth)
    xx, yy = np.meshgrid(x, x, indexing="xy")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    wts = np.outer(w, w).ravel()
    return pts, wts
