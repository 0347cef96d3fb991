"""Grayscale images as smooth, continuously sampleable intensity fields.

A raster is loaded once, pre-smoothed with a truncated Gaussian, and wrapped
in a bilinear interpolant whose values and gradients can be queried anywhere
in the plane (constant extension outside the pixel grid). These fields feed
the registration forcing (T(x+u) - R) grad T(x+u), the similarity integral
and the quadrature-sensitivity study.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import mesh as meshmod
from .quadrature import points_for_order


@dataclass(frozen=True)
class RasterImage:
    """Pixel grid with intensities in [0, 1], row-major, row 0 at the bottom."""

    width: int
    height: int
    intensity: np.ndarray  # shape (height, width)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("raster needs at least 2 pixels per dimension")
        if self.intensity.shape != (self.height, self.width):
            raise ValueError("intensity grid does not match width/height")
        if self.intensity.min() < -1e-12 or self.intensity.max() > 1 + 1e-12:
            raise ValueError("intensities must lie in [0, 1]")


def load_raster(path) -> RasterImage:
    """Load an 8- or 16-bit grayscale PNG/PGM, rescaled so full range is [0, 1]."""
    with Image.open(path) as img:
        mode = img.mode
        if mode == "L":
            scale = 255.0
        elif mode in ("I;16", "I;16B", "I;16L"):
            scale = 65535.0
        elif mode == "I":
            # Pillow promotes 16-bit PGMs to mode I
            scale = 65535.0
        else:
            raise ValueError(f"not an 8/16-bit grayscale image (mode {mode})")
        data = np.asarray(img, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("expected a single-channel image")
    h, w = data.shape
    if w < 2 or h < 2:
        raise ValueError("degenerate image: need at least 2x2 pixels")
    # flip so row index increases with the physical y coordinate
    return RasterImage(w, h, np.ascontiguousarray(data[::-1] / scale))


def save_raster(img: RasterImage, path) -> None:
    """Write as 8-bit grayscale PNG."""
    data = np.clip(img.intensity[::-1] * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(4.0 * sigma)
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(img: RasterImage, sigma: float) -> RasterImage:
    """Separable convolution with a normalized Gaussian truncated at ceil(4*sigma).

    Boundary handling is clamp-to-edge; sigma = 0 returns the input unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img
    k = _gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    data = img.intensity
    padded = np.pad(data, ((0, 0), (r, r)), mode="edge")
    rows = np.einsum("ijk,k->ij", np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=1), k)
    padded = np.pad(rows, ((r, r), (0, 0)), mode="edge")
    out = np.einsum("ijk,k->ij", np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=0), k)
    out = np.clip(out, 0.0, 1.0)
    return RasterImage(img.width, img.height, out)


@dataclass(frozen=True)
class ImageField:
    """Bilinear interpolant of smoothed pixel values over a physical rectangle.

    Pixel centers are mapped uniformly into the domain; queries outside it are
    clamped (constant extension along normals), so the field is defined on all
    of R^2 and the registration forcing stays bounded.
    """

    coefficients: np.ndarray  # (height, width) smoothed values
    sigma: float
    domain: tuple[float, float, float, float]  # x0, y0, width, height

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.coefficients.shape

    def _to_grid(self, pts: np.ndarray):
        """Map physical points to (col, row) pixel-center coordinates."""
        x0, y0, w, h = self.domain
        ny, nx = self.coefficients.shape
        dx = w / nx
        dy = h / ny
        gx = (pts[..., 0] - x0) / dx - 0.5
        gy = (pts[..., 1] - y0) / dy - 0.5
        return gx, gy, dx, dy

    def sample(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        gx, gy, _, _ = self._to_grid(pts)
        ny, nx = self.coefficients.shape
        gx = np.clip(gx, 0.0, nx - 1.0)
        gy = np.clip(gy, 0.0, ny - 1.0)
        i0 = np.clip(np.floor(gx).astype(np.int64), 0, nx - 2)
        j0 = np.clip(np.floor(gy).astype(np.int64), 0, ny - 2)
        s = gx - i0
        t = gy - j0
        c = self.coefficients
        return ((1 - s) * (1 - t) * c[j0, i0] + s * (1 - t) * c[j0, i0 + 1]
                + (1 - s) * t * c[j0 + 1, i0] + s * t * c[j0 + 1, i0 + 1])

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        """Exact gradient of the interpolant; lesser-side cell at grid lines,
        zero in the clamped exterior."""
        pts = np.asarray(pts, dtype=float)
        gx, gy, dx, dy = self._to_grid(pts)
        ny, nx = self.coefficients.shape
        inside_x = (gx > 0.0) & (gx < nx - 1.0)
        inside_y = (gy > 0.0) & (gy < ny - 1.0)
        cgx = np.clip(gx, 0.0, nx - 1.0)
        cgy = np.clip(gy, 0.0, ny - 1.0)
        # ceil - 1 puts exact grid hits into the lesser-coordinate cell
        i0 = np.clip(np.ceil(cgx).astype(np.int64) - 1, 0, nx - 2)
        j0 = np.clip(np.ceil(cgy).astype(np.int64) - 1, 0, ny - 2)
        s = cgx - i0
        t = cgy - j0
        c = self.coefficients
        c00, c10 = c[j0, i0], c[j0, i0 + 1]
        c01, c11 = c[j0 + 1, i0], c[j0 + 1, i0 + 1]
        dvdx = ((1 - t) * (c10 - c00) + t * (c11 - c01)) / dx
        dvdy = ((1 - s) * (c01 - c00) + s * (c11 - c10)) / dy
        out = np.empty(pts.shape, dtype=float)
        out[..., 0] = np.where(inside_x, dvdx, 0.0)
        out[..., 1] = np.where(inside_y, dvdy, 0.0)
        return out


def build_field(img: RasterImage, domain, sigma: float) -> ImageField:
    """Smooth `img` and wrap it in a bilinear field over `domain` = (x0, y0, w, h)."""
    x0, y0, w, h = domain
    if w <= 0 or h <= 0:
        raise ValueError("domain must have positive side lengths")
    smoothed = gaussian_smooth(img, sigma)
    return ImageField(smoothed.intensity, sigma, (x0, y0, w, h))


def image_domain(img: RasterImage) -> tuple[float, float, float, float]:
    """Default physical domain: longest image side scaled to unit length."""
    longest = max(img.width, img.height)
    return (0.0, 0.0, img.width / longest, img.height / longest)


def sample(field, x) -> np.ndarray:
    return field.sample(x)


def sample_gradient(field, x) -> np.ndarray:
    return field.gradient(x)


def forcing(field_t, field_r, x, u_at_x) -> np.ndarray:
    """(T(x+u) - R(x)) * grad T(x+u), vectorized over leading dimensions."""
    x = np.asarray(x, dtype=float)
    warped = x + np.asarray(u_at_x, dtype=float)
    mismatch = field_t.sample(warped) - field_r.sample(x)
    return mismatch[..., None] * field_t.gradient(warped)


def similarity(field_t, field_r, u_h, q_img: int) -> float:
    """Integral of the squared warped mismatch over u_h's mesh."""
    total = 0.0
    for phys, wts, uvals in u_h.sample_quadrature(points_for_order(q_img)):
        mism = field_t.sample(phys + uvals) - field_r.sample(phys)
        total += float(np.einsum("cq,q->", mism * mism, wts))
    return total


@dataclass(frozen=True)
class QuadratureStudyResult:
    """Rows of (pixels-per-element, order, relative residual error e(q))."""

    rows: tuple[tuple[int, int, float], ...]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pixels_per_element", "order", "e_q"])
            for ppe, order, eq in self.rows:
                writer.writerow([ppe, order, f"{eq:.16e}"])


def quadrature_study(field_t, field_r, pixels_per_element, orders, q_truth: int) -> QuadratureStudyResult:
    """Relative error e(q) of the assembled residual vector vs an order-q_truth rule.

    The mesh for a block size p covers the field's pixel grid with one cell per
    p x p block; the single-root quadtree requires the quotient to be a power
    of two and the grid to be square.
    """
    from .fespace import FeSpace, volume_load

    if any(q_truth <= q for q in orders):
        raise ValueError("q_truth must exceed every studied order")
    ny, nx = field_t.grid_shape
    rows = []

    def integrand(pts):
        mism = field_t.sample(pts) - field_r.sample(pts)
        return mism[..., None] * field_t.gradient(pts)

    for ppe in pixels_per_element:
        if nx != ny:
            raise ValueError("quadrature study requires square images")
        cells, rem = divmod(nx, ppe)
        level = cells.bit_length() - 1
        if rem or (1 << level) != cells:
            raise ValueError(
                f"grid of {nx} pixels cannot be tiled by {ppe}x{ppe} blocks on a quadtree")
        forest = meshmod.uniform_refine(
            meshmod.QuadForest((field_t.domain[0], field_t.domain[1]),
                               (field_t.domain[2], field_t.domain[3])), level)
        space = FeSpace(forest, 1)
        w_truth = volume_load(space, integrand, q_truth)
        denom = float(np.linalg.norm(w_truth))
        for q in orders:
            w_q = volume_load(space, integrand, q)
            eq = float(np.linalg.norm(w_q - w_truth)) / denom
            rows.append((ppe, q, eq))
    return QuadratureStudyResult(tuple(rows))
