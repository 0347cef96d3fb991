"""Residual a posteriori error indicators on the quadtree mesh.

Per leaf K the squared indicator collects a volume residual weighted by the
cell diameter, stress-jump terms across interior facets (each facet split
half/half between its two cells so the global value matches the facet-sum
definition), and boundary residuals of the Robin condition. A manufactured
variant subtracts the exact stress from fluxes and adds the exact forcing to
the volume residual so the indicator vanishes at the exact solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fespace import FeFunction, FeSpace, MaterialParams, shape1d
from .mesh import MortonKey
from .quadrature import gauss_1d, points_for_order


@dataclass
class CellIndicators:
    """Per-leaf squared indicator components and the global estimator."""

    keys: tuple[MortonKey, ...]
    volume: np.ndarray
    jump: np.ndarray
    boundary: np.ndarray

    @property
    def theta_sq(self) -> np.ndarray:
        return self.volume + self.jump + self.boundary

    @property
    def theta(self) -> float:
        return float(np.sqrt(self.theta_sq.sum()))


def _edge_ref_points(axis: int, is_hi: bool, t: np.ndarray) -> np.ndarray:
    """Reference coordinates of edge parameter t on a given cell side."""
    pts = np.empty((len(t), 2))
    if axis == 0:
        pts[:, 0] = 1.0 if is_hi else 0.0
        pts[:, 1] = t
    else:
        pts[:, 0] = t
        pts[:, 1] = 1.0 if is_hi else 0.0
    return pts


def _stress_coeffs(space: FeSpace, u: FeFunction, level: int, ref_pts: np.ndarray,
                   rows: np.ndarray, lam: float, mu: float) -> np.ndarray:
    """sigma(u_h) at given reference points for the cells in `rows`.

    Returns (ncells, npts, 3) with components (s11, s22, s12).
    """
    tab = space._basis_tables(ref_pts)
    w, h = space.cell_size(level)
    nod = u.nodal_values()
    nodes = space.cell_nodes[rows]
    vals = nod[(2 * nodes[:, :, None] + np.arange(2)[None, None, :])]
    ux = np.einsum("cld,lq->cqd", vals, tab["dxi"]) / w
    uy = np.einsum("cld,lq->cqd", vals, tab["deta"]) / h
    out = np.empty(ux.shape[:2] + (3,))
    out[..., 0] = (lam + 2 * mu) * ux[..., 0] + lam * uy[..., 1]
    out[..., 1] = lam * ux[..., 0] + (lam + 2 * mu) * uy[..., 1]
    out[..., 2] = mu * (uy[..., 0] + ux[..., 1])
    return out


def _traction(stress: np.ndarray, normal) -> np.ndarray:
    """sigma . n from packed stress components."""
    nx, ny = normal
    t = np.empty(stress.shape[:-1] + (2,))
    t[..., 0] = stress[..., 0] * nx + stress[..., 2] * ny
    t[..., 1] = stress[..., 2] * nx + stress[..., 1] * ny
    return t


def compute_indicators(space: FeSpace, u_h: FeFunction, field_t, field_r,
                       params: MaterialParams, q_img: int = 6,
                       manufactured=None, include_time_term: bool = False,
                       u_prev: FeFunction | None = None) -> CellIndicators:
    """Evaluate the per-cell indicator for the current iterate.

    `manufactured` (when given) provides exact data with vectorized methods
    u(pts), sigma_packed(pts) and f_plus_g(pts); `include_time_term` adds the
    pseudo-time residual (1/dt)(u_h - u_prev) to the volume term.
    """
    if manufactured is not None and include_time_term and u_prev is None:
        raise ValueError("time term requested without previous iterate")
    forest = space.forest
    n_leaves = len(forest.leaves)
    lam, mu = params.lam, params.mu
    vol = np.zeros(n_leaves)
    jump = np.zeros(n_leaves)
    bdry = np.zeros(n_leaves)

    # volume residual: div sigma(u_h) - alpha f_{u_h} (+ f_ex + g_ex)
    npts = points_for_order(q_img)
    _, _, tab = space.rule(npts)
    nod = u_h.nodal_values()
    for level, phys, wts in space.quadrature_bundles(npts):
        w, h = space.cell_size(level)
        rows = space.cells_by_level[level]
        nodes = space.cell_nodes_by_level[level]
        vals = nod[(2 * nodes[:, :, None] + np.arange(2)[None, None, :])]
        uxx = np.einsum("cld,lq->cqd", vals, tab["dxixi"]) / (w * w)
        uyy = np.einsum("cld,lq->cqd", vals, tab["detaeta"]) / (h * h)
        uxy = np.einsum("cld,lq->cqd", vals, tab["dxieta"]) / (w * h)
        div1 = (lam + 2 * mu) * uxx[..., 0] + mu * uyy[..., 0] + (lam + mu) * uxy[..., 1]
        div2 = (lam + mu) * uxy[..., 0] + mu * uxx[..., 1] + (lam + 2 * mu) * uyy[..., 1]
        uq = np.einsum("cld,lq->cqd", vals, tab["N"])
        warped = phys + uq
        mism = field_t.sample(warped) - field_r.sample(phys)
        fvals = mism[..., None] * field_t.gradient(warped)
        resid = np.stack([div1, div2], axis=-1) - params.alpha * fvals
        if manufactured is not None:
            resid = resid + manufactured.f_plus_g(phys)
        if include_time_term:
            vprev = u_prev.cell_values(level)
            upq = np.einsum("cld,lq->cqd", vprev, tab["N"])
            resid = resid + (uq - upq) / params.dt
        h_k2 = w * w + h * h
        vol[rows] = h_k2 * np.einsum("cqd,q->c", resid * resid, wts)

    # facet terms, conforming interior and boundary handled in level groups
    npts_e = space.degree + 2 if manufactured is None else max(space.degree + 2, 6)
    t_e, w_e = gauss_1d(npts_e)
    groups: dict = {}
    noncf = []
    for facet in space.facets:
        if facet.kind == "nonconforming":
            noncf.append(facet)
        else:
            key = (facet.kind, facet.axis, facet.owner.level)
            groups.setdefault(key, []).append(facet)

    leaf_pos = {key: p for p, key in enumerate(forest.leaves)}

    for (kind, axis, level), fl in groups.items():
        own = np.array([leaf_pos[f.owner] for f in fl])
        lo = np.array([f.span[0] for f in fl])
        length = np.array([f.h_e for f in fl])
        normal = np.asarray(fl[0].normal)
        is_hi_owner = normal[axis] > 0
        ref_o = _edge_ref_points(axis, is_hi_owner, t_e)
        stress_o = _stress_coeffs(space, u_h, level, ref_o, own, lam, mu)
        trac_o = _traction(stress_o, normal)
        if kind == "interior":
            nb = np.array([leaf_pos[f.neighbor] for f in fl])
            ref_n = _edge_ref_points(axis, not is_hi_owner, t_e)
            stress_n = _stress_coeffs(space, u_h, level, ref_n, nb, lam, mu)
            trac_n = _traction(stress_n, normal)
            diff = trac_o - trac_n
            integ = np.einsum("cqd,q->c", diff * diff, w_e) * length
            contrib = 0.5 * length * integ
            np.add.at(jump, own, contrib)
            np.add.at(jump, nb, contrib)
        else:  # boundary
            pts = np.empty((len(fl), npts_e, 2))
            pts[..., axis] = np.array([f.coord for f in fl])[:, None]
            pts[..., 1 - axis] = lo[:, None] + t_e[None, :] * length[:, None]
            resid = trac_o
            if params.kappa > 0 or manufactured is not None:
                uvals = _edge_values(space, u_h, level, axis, is_hi_owner, t_e, own)
                resid = resid + params.kappa * uvals
                if manufactured is not None:
                    resid = resid - _traction(manufactured.sigma_packed(pts), normal)
                    resid = resid - params.kappa * manufactured.u(pts)
            integ = np.einsum("cqd,q->c", resid * resid, w_e) * length
            np.add.at(bdry, own, length * integ)

    for facet in noncf:
        fine_keys = {s.key for s in facet.subfacets}
        coarse = facet.owner if facet.owner not in fine_keys else facet.neighbor
        cpos = leaf_pos[coarse]
        cx0, cy0, cw, ch = forest.cell_rect(coarse)
        corigin = np.array([cx0, cy0])
        csize = np.array([cw, ch])
        normal = np.asarray(facet.normal)
        along = 1 - facet.axis
        for sub in facet.subfacets:
            fpos = leaf_pos[sub.key]
            fx0, fy0, fw, fh = forest.cell_rect(sub.key)
            length = sub.hi - sub.lo
            pts = np.empty((npts_e, 2))
            pts[:, facet.axis] = facet.coord
            pts[:, along] = sub.lo + t_e * length
            ref_c = (pts - corigin) / csize
            ref_f = (pts - (fx0, fy0)) / (fw, fh)
            sc = _stress_coeffs(space, u_h, coarse.level, ref_c,
                                np.array([cpos]), lam, mu)[0]
            sf = _stress_coeffs(space, u_h, sub.key.level, ref_f,
                                np.array([fpos]), lam, mu)[0]
            diff = _traction(sc - sf, normal)
            integ = float(np.einsum("qd,q->", diff * diff, w_e)) * length
            contrib = 0.5 * length * integ
            jump[cpos] += contrib
            jump[fpos] += contrib

    return CellIndicators(forest.leaves, vol, jump, bdry)


def _edge_values(space: FeSpace, u: FeFunction, level: int, axis: int,
                 is_hi: bool, t: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """u_h on a cell edge at parameters t for the cells in `rows`."""
    ref = _edge_ref_points(axis, is_hi, t)
    N = space.scalar_basis(ref)
    nod = u.nodal_values()
    nodes = space.cell_nodes[rows]
    vals = nod[(2 * nodes[:, :, None] + np.arange(2)[None, None, :])]
    return np.einsum("cld,lq->cqd", vals, N)


def mark_fraction(indicators: CellIndicators, theta_refine: float,
                  theta_coarsen: float) -> tuple[set, set]:
    """Largest-indicator refine marks and smallest-indicator coarsen marks.

    Fractions are floored; ties break by Z-order (lower key enters the refine
    set first, higher key the coarsen set first) so marking is deterministic.
    """
    if not (0 <= theta_refine <= 1 and 0 <= theta_coarsen <= 1):
        raise ValueError("fractions must lie in [0, 1]")
    if theta_refine + theta_coarsen > 1:
        raise ValueError("refine and coarsen fractions overlap")
    n = len(indicators.keys)
    theta_sq = indicators.theta_sq
    zstarts = np.array([k.zstart() for k in indicators.keys])
    n_ref = int(theta_refine * n)
    n_coars = int(theta_coarsen * n)
    order_ref = np.lexsort((zstarts, -theta_sq))
    order_coars = np.lexsort((-zstarts, theta_sq))
    refine = {indicators.keys[i] for i in order_ref[:n_ref]}
    coarsen = {indicators.keys[i] for i in order_coars[:n_coars]}
    return refine, coarsen
