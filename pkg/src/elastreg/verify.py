"""Manufactured-solution verification: exact fields, tables, rates, effectivity.

Two exact displacements over the unit square drive the harness: a smooth
trigonometric field solved with Robin boundary springs, and an r^beta corner
singularity (beta = 2/3) under pure traction with the rigid-body multiplier.
Synthetic quadratic images supply the registration forcing; correction terms
make the exact field a stationary point of the discrete iteration, so energy
errors and estimator effectivity can be tabulated under uniform or adaptive
refinement.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dfield

import numpy as np

from . import estimator as estmod
from . import mesh as meshmod
from .fespace import (FeFunction, MaterialParams, boundary_load, build_space,
                      transfer, volume_load)
from .quadrature import (corner_refined_1d, corner_refined_2d, gauss_2d,
                         points_for_order)
from .regsolver import SolverConfig, solve_stationary


class QuadraticField:
    """Analytic image |x - c|^2, sampleable like an ImageField."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)

    def sample(self, pts):
        pts = np.asarray(pts, dtype=float)
        d = pts - self.center
        return np.sum(d * d, axis=-1)

    def gradient(self, pts):
        pts = np.asarray(pts, dtype=float)
        return 2.0 * (pts - self.center)


def synthetic_images() -> tuple[QuadraticField, QuadraticField]:
    """Target T centered at (0.8, 0.8), reference R at (0.2, 0.2)."""
    return QuadraticField((0.8, 0.8)), QuadraticField((0.2, 0.2))


@dataclass(frozen=True)
class ManufacturedCase:
    kind: str  # 'smooth' | 'singular'
    beta: float = 2.0 / 3.0
    params: MaterialParams = dfield(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in ("smooth", "singular"):
            raise ValueError("kind must be 'smooth' or 'singular'")
        if self.params is None:
            kappa = 0.5 if self.kind == "smooth" else 0.0
            object.__setattr__(self, "params", MaterialParams(
                E=1.0, nu=0.25, kappa=kappa, alpha=1.0, dt=1.0))


class ExactFields:
    """Closed-form exact solution data for a manufactured case.

    All methods are vectorized over leading point dimensions; stresses are
    packed as (s11, s22, s12).
    """

    def __init__(self, case: ManufacturedCase):
        self.case = case
        self.params = case.params
        self.field_t, self.field_r = synthetic_images()
        self._moments = None

    # displacement and strain ------------------------------------------------

    def u(self, pts):
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        if self.case.kind == "smooth":
            lam = self.params.lam
            pi = math.pi
            u1 = ((-np.sin(pi * x) + np.cos(pi * x) / lam) * np.sin(pi * y)
                  + 4.0 / pi ** 2) / 10.0
            u2 = (-np.cos(pi * x) + np.sin(pi * x) / lam) * np.cos(pi * y) / 10.0
            return np.stack([u1, u2], axis=-1)
        z = x + 1j * y
        w = _zpow(z, self.case.beta) / 10.0
        return np.stack([w.real, w.imag], axis=-1)

    def grad_u(self, pts):
        """Displacement gradient, (..., 2, 2) with entry [i, j] = du_i/dx_j."""
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        out = np.empty(pts.shape[:-1] + (2, 2))
        if self.case.kind == "smooth":
            lam = self.params.lam
            pi = math.pi
            sx, cx = np.sin(pi * x), np.cos(pi * x)
            sy, cy = np.sin(pi * y), np.cos(pi * y)
            out[..., 0, 0] = pi * (-cx - sx / lam) * sy / 10.0
            out[..., 0, 1] = pi * (-sx + cx / lam) * cy / 10.0
            out[..., 1, 0] = pi * (sx + cx / lam) * cy / 10.0
            out[..., 1, 1] = pi * (cx - sx / lam) * sy / 10.0
            return out
        beta = self.case.beta
        z = x + 1j * y
        dw = beta * _zpow(z, beta - 1.0) / 10.0
        # the field is holomorphic: shear-free, gradient from Cauchy-Riemann
        out[..., 0, 0] = dw.real
        out[..., 0, 1] = -dw.imag
        out[..., 1, 0] = dw.imag
        out[..., 1, 1] = dw.real
        return out

    def strain_packed(self, pts):
        g = self.grad_u(pts)
        out = np.empty(g.shape[:-2] + (3,))
        out[..., 0] = g[..., 0, 0]
        out[..., 1] = g[..., 1, 1]
        out[..., 2] = 0.5 * (g[..., 0, 1] + g[..., 1, 0])
        return out

    def sigma_packed(self, pts):
        lam, mu = self.params.lam, self.params.mu
        e = self.strain_packed(pts)
        tr = e[..., 0] + e[..., 1]
        out = np.empty_like(e)
        out[..., 0] = lam * tr + 2 * mu * e[..., 0]
        out[..., 1] = lam * tr + 2 * mu * e[..., 1]
        out[..., 2] = 2 * mu * e[..., 2]
        return out

    # forcing ------------------------------------------------------------------

    def f_ex(self, pts):
        """-div sigma_ex from the closed-form second derivatives."""
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        lam, mu = self.params.lam, self.params.mu
        if self.case.kind == "smooth":
            pi = math.pi
            sx, cx = np.sin(pi * x), np.cos(pi * x)
            sy, cy = np.sin(pi * y), np.cos(pi * y)
            # u1 = a(x) sy + c, u2 = b(x) cy with a = (-sx + cx/lam)/10, b = (-cx + sx/lam)/10
            a = (-sx + cx / lam) / 10.0
            b = (-cx + sx / lam) / 10.0
            da = pi * (-cx - sx / lam) / 10.0
            db = pi * (sx + cx / lam) / 10.0
            d2a = -pi * pi * a
            d2b = -pi * pi * b
            u1xx = d2a * sy
            u1yy = -pi * pi * a * sy
            u1xy = da * pi * cy
            u2xx = d2b * cy
            u2yy = -pi * pi * b * cy
            u2xy = -db * pi * sy
        else:
            beta = self.case.beta
            z = x + 1j * y
            d2w = beta * (beta - 1.0) * _zpow(z, beta - 2.0) / 10.0
            u1xx, u1xy = d2w.real, -d2w.imag
            u1yy = -d2w.real
            u2xx, u2xy = d2w.imag, d2w.real
            u2yy = -d2w.imag
        div1 = (lam + 2 * mu) * u1xx + mu * u1yy + (lam + mu) * u2xy
        div2 = (lam + mu) * u1xy + mu * u2xx + (lam + 2 * mu) * u2yy
        return -np.stack([div1, div2], axis=-1)

    def g_ex(self, pts):
        """alpha (T(x + u_ex) - R) grad T(x + u_ex)."""
        pts = np.asarray(pts, dtype=float)
        warped = pts + self.u(pts)
        mism = self.field_t.sample(warped) - self.field_r.sample(pts)
        return self.params.alpha * mism[..., None] * self.field_t.gradient(warped)

    def f_plus_g(self, pts):
        return self.f_ex(pts) + self.g_ex(pts)

    def robin_datum(self, pts, normal):
        """sigma_ex . n + kappa u_ex, the weakly imposed boundary datum."""
        s = self.sigma_packed(pts)
        nx, ny = normal
        out = np.empty(pts.shape[:-1] + (2,))
        out[..., 0] = s[..., 0] * nx + s[..., 2] * ny
        out[..., 1] = s[..., 2] * nx + s[..., 1] * ny
        if self.params.kappa > 0:
            out = out + self.params.kappa * self.u(pts)
        return out

    def rm_moments(self) -> np.ndarray:
        """L2 moments of u_ex against (1,0), (0,1), (-y,x) over the unit square."""
        if self._moments is None:
            pts, wts = gauss_2d(12)
            cells = 16
            total = np.zeros(3)
            for ci in range(cells):
                for cj in range(cells):
                    p = (np.array([ci, cj]) + pts) / cells
                    w = wts / (cells * cells)
                    uv = self.u(p)
                    total[0] += np.dot(uv[:, 0], w)
                    total[1] += np.dot(uv[:, 1], w)
                    total[2] += np.dot(p[:, 0] * uv[:, 1] - p[:, 1] * uv[:, 0], w)
            self._moments = total
        return self._moments


def _zpow(z: np.ndarray, p: float) -> np.ndarray:
    """z**p with a guard at the origin (limit 0 for p > 0, inf otherwise)."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    zero = z == 0
    out[~zero] = z[~zero] ** p
    out[zero] = 0.0 if p > 0 else np.inf
    return out


def exact_fields(case: ManufacturedCase) -> ExactFields:
    return ExactFields(case)


@dataclass
class ConvergenceRow:
    dofs: int
    h: float
    error: float
    rate: float  # nan on the first row
    eff: float
    theta: float


def _origin_cells(space) -> dict:
    """Corner-refined volume rules for leaves touching the origin corner."""
    rules = {}
    base = points_for_order(2 * space.degree + 3)
    pts, wts = corner_refined_2d(base, 14)
    ox, oy = space.forest.origin
    for pos, key in enumerate(space.forest.leaves):
        x0, y0, _, _ = space.forest.cell_rect(key)
        if abs(x0 - ox) < 1e-14 and abs(y0 - oy) < 1e-14:
            rules[pos] = (pts, wts)
    return rules


def _origin_edges(space) -> dict:
    base = points_for_order(2 * space.degree + 3)
    t, w = corner_refined_1d(base, 14)
    rules = {}
    ox, oy = space.forest.origin
    for pos, key in enumerate(space.forest.leaves):
        x0, y0, _, _ = space.forest.cell_rect(key)
        if abs(x0 - ox) < 1e-14 and abs(y0 - oy) < 1e-14:
            rules[pos] = (t, w)
    return rules


def manufactured_extra_load(space, exact: ExactFields) -> np.ndarray:
    """Volume correction f_ex + g_ex, weak boundary datum, and RM moments."""
    singular = exact.case.kind == "singular"
    vol_specials = _origin_cells(space) if singular else None
    edge_specials = _origin_edges(space) if singular else None
    order = 2 * space.degree + 3
    extra = volume_load(space, exact.f_plus_g, order, special_rules=vol_specials)
    extra += boundary_load(space, exact.robin_datum,
                           npts=points_for_order(order) + 2,
                           special_rules=edge_specials)
    if space.rm_mode:
        extra[2 * space.n_free:] = exact.rm_moments()
    return extra


def energy_error(space, u_h: FeFunction, exact: ExactFields) -> float:
    """|u_ex - u_h|_{1,Omega} = ||eps(u_ex - u_h)||_{0,Omega} by quadrature."""
    order = 2 * space.degree + 3
    npts = points_for_order(order)
    _, _, tab = space.rule(npts)
    singular = exact.case.kind == "singular"
    specials = _origin_cells(space) if singular else {}
    nod = u_h.nodal_values()
    total = 0.0
    for level, phys, wts in space.quadrature_bundles(npts):
        w, h = space.cell_size(level)
        rows = space.cells_by_level[level]
        mask = np.array([pos not in specials for pos in rows])
        nodes = space.cell_nodes_by_level[level][mask]
        vals = nod[(2 * nodes[:, :, None] + np.arange(2)[None, None, :])]
        ux = np.einsum("cld,lq->cqd", vals, tab["dxi"]) / w
        uy = np.einsum("cld,lq->cqd", vals, tab["deta"]) / h
        e_h = np.stack([ux[..., 0], uy[..., 1],
                        0.5 * (uy[..., 0] + ux[..., 1])], axis=-1)
        e_ex = exact.strain_packed(phys[mask])
        d = e_h - e_ex
        ee = d[..., 0] ** 2 + d[..., 1] ** 2 + 2.0 * d[..., 2] ** 2
        total += float(np.einsum("cq,q->", ee, wts))
    for pos, (spts, swts) in specials.items():
        key = space.forest.leaves[pos]
        x0, y0, w, h = space.forest.cell_rect(key)
        phys = np.array([x0, y0]) + spts * np.array([w, h])
        tabs = space._basis_tables(spts)
        nodes = space.cell_nodes[pos]
        vals = nod[(2 * nodes[:, None] + np.arange(2)[None, :])]
        ux = np.einsum("ld,lq->qd", vals, tabs["dxi"]) / w
        uy = np.einsum("ld,lq->qd", vals, tabs["deta"]) / h
        e_h = np.stack([ux[..., 0], uy[..., 1],
                        0.5 * (uy[..., 0] + ux[..., 1])], axis=-1)
        d = e_h - exact.strain_packed(phys)
        ee = d[..., 0] ** 2 + d[..., 1] ** 2 + 2.0 * d[..., 2] ** 2
        total += float(np.dot(ee, swts)) * (w * h)
    return math.sqrt(total)


def solve_manufactured(space, exact: ExactFields, config: SolverConfig,
                       x0: np.ndarray | None = None):
    extra = manufactured_extra_load(space, exact)
    return solve_stationary(space, exact.field_t, exact.field_r, exact.params,
                            config, extra_load=extra, x0=x0), extra


def _default_config() -> SolverConfig:
    return SolverConfig(tol=1e-10, max_iter=400, aa_depth=10, q_img=6,
                        log_similarity=False)


def run_convergence(case: ManufacturedCase, mode: str, k: int, levels: int,
                    theta_refine: float = 0.15,
                    config: SolverConfig | None = None) -> list[ConvergenceRow]:
    """Solve the manufactured problem over a refinement sequence.

    Uniform mode refines globally starting from a 2x2 mesh; adaptive mode
    starts from a 4x4 mesh and marks `theta_refine` of the cells with the
    largest indicators (no coarsening). Rates use the mesh-size formula for
    uniform runs and the dof-based formula for adaptive ones.
    """
    if levels < 2:
        raise ValueError("need at least two levels to report rates")
    if mode not in ("uniform", "adaptive"):
        raise ValueError("mode must be 'uniform' or 'adaptive'")
    exact = exact_fields(case)
    config = config or _default_config()
    rows: list[ConvergenceRow] = []

    if mode == "uniform":
        for lvl in range(1, levels + 1):
            forest = meshmod.uniform_refine(meshmod.QuadForest(), lvl)
            space = build_space(forest, k, case.params, rm_mode=True)
            (u_h, log), _ = solve_manufactured(space, exact, config)
            if not log.converged:
                raise RuntimeError(f"manufactured solve failed at level {lvl}")
            _append_row(rows, case, space, u_h, exact, config, dof_rate=False)
        return rows

    forest = meshmod.uniform_refine(meshmod.QuadForest(), 2)
    space = build_space(forest, k, case.params, rm_mode=True)
    u_prev = None
    for cycle in range(levels):
        x0 = transfer(u_prev, space).vec if u_prev is not None else None
        (u_h, log), _ = solve_manufactured(space, exact, config, x0=x0)
        if not log.converged:
            raise RuntimeError(f"manufactured solve failed at cycle {cycle}")
        _append_row(rows, case, space, u_h, exact, config, dof_rate=True)
        if cycle == levels - 1:
            break
        ind = estmod.compute_indicators(space, u_h, exact.field_t, exact.field_r,
                                        case.params, config.q_img, manufactured=exact)
        refine, _ = estmod.mark_fraction(ind, theta_refine, 0.0)
        forest, _ = meshmod.adapt(forest, refine, set())
        u_prev = u_h
        space = build_space(forest, k, case.params, rm_mode=True)
    return rows


def _append_row(rows, case, space, u_h, exact, config, dof_rate: bool):
    err = energy_error(space, u_h, exact)
    ind = estmod.compute_indicators(space, u_h, exact.field_t, exact.field_r,
                                    case.params, config.q_img, manufactured=exact)
    theta = ind.theta
    h_min = min(np.hypot(*space.forest.cell_rect(k)[2:]) for k in space.forest.leaves)
    if rows:
        prev = rows[-1]
        if dof_rate:
            rate = -2.0 * math.log(err / prev.error) / math.log(space.ndof / prev.dofs)
        else:
            rate = math.log(err / prev.error) / math.log(h_min / prev.h)
    else:
        rate = float("nan")
    rows.append(ConvergenceRow(space.ndof, h_min, err, rate, err / theta, theta))


def write_convergence_csv(rows: list[ConvergenceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dofs", "h", "error", "rate", "eff"])
        for r in rows:
            rate = "" if math.isnan(r.rate) else f"{r.rate:.3f}"
            writer.writerow([r.dofs, f"{r.h:.4f}", f"{r.error:.6e}", rate,
                             f"{r.eff:.3f}"])


def write_error_vs_dofs(rows: list[ConvergenceRow], path) -> None:
    """Two-column whitespace table (dofs, energy error) for plotting."""
    with open(path, "w") as fh:
        fh.write("# dofs  energy_error\n")
        for r in rows:
            fh.write(f"{r.dofs} {r.error:.12e}\n")
