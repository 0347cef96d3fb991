"""Vector Q1/Q2 Lagrangian spaces on the quadtree forest.

Hanging-node constraints are eliminated by condensation: assembly happens on
the full node set and is folded onto the free dofs through a sparse expansion
matrix, which keeps the operator symmetric and lets one sparse LU be reused
across all pseudo-time iterations. The optional rigid-body-mode block appends
three Lagrange-multiplier rows enforcing L2-orthogonality to translations and
the infinitesimal rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import mesh as meshmod
from .mesh import MortonKey, QuadForest
from .quadrature import gauss_1d, gauss_2d, points_for_order

# total sparse factorizations performed; tests assert factorization reuse
FACTORIZATION_COUNT = 0


@dataclass(frozen=True)
class MaterialParams:
    """Elastic moduli, boundary spring stiffness and solver scalings."""

    E: float = 1.0
    nu: float = 0.25
    kappa: float = 0.0
    alpha: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        if self.E <= 0 or not (-1.0 < self.nu < 0.5):
            raise ValueError("need E > 0 and nu in (-1, 1/2) for mu, lambda > 0")
        if self.kappa < 0:
            raise ValueError("boundary stiffness kappa must be >= 0")
        if self.alpha <= 0:
            raise ValueError("similarity weight alpha must be positive")
        if self.dt <= 0:
            raise ValueError("pseudo-timestep dt must be positive")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))


def shape1d(k: int, t: np.ndarray):
    """1D Lagrange basis on [0,1] with equispaced nodes: values, d/dt, d2/dt2."""
    t = np.asarray(t, dtype=float)
    if k == 1:
        N = np.stack([1.0 - t, t], axis=-1)
        dN = np.stack([-np.ones_like(t), np.ones_like(t)], axis=-1)
        d2N = np.zeros_like(N)
    elif k == 2:
        N = np.stack([2 * t * t - 3 * t + 1, 4 * t * (1 - t), 2 * t * t - t], axis=-1)
        dN = np.stack([4 * t - 3, 4 - 8 * t, 4 * t - 1], axis=-1)
        d2N = np.stack([4 * np.ones_like(t), -8 * np.ones_like(t), 4 * np.ones_like(t)], axis=-1)
    else:
        raise ValueError("only degrees 1 and 2 are supported")
    return N, dN, d2N


def _compact_array(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.int64) & 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


class ConstraintSet:
    """Hanging-dof resolution: node -> master nodes with interpolation weights."""

    def __init__(self):
        self.by_node: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, node: int, masters: np.ndarray, weights: np.ndarray):
        if node in self.by_node:
            old_m, old_w = self.by_node[node]
            if not (np.array_equal(old_m, masters) and np.allclose(old_w, weights)):
                raise ValueError(f"conflicting constraints for node {node}")
            return
        self.by_node[node] = (masters, weights)

    def __len__(self):
        return len(self.by_node)

    def __contains__(self, node):
        return node in self.by_node


class FeSpace:
    """Vector-valued Q_k space with hanging-node constraints on a forest."""

    def __init__(self, forest: QuadForest, degree: int, rm_mode: bool = False):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.forest = forest
        self.degree = degree
        self.rm_mode = rm_mode
        self.facets = meshmod.facets(forest)  # validates 2:1 balance
        self._build_nodes()
        self._build_constraints()
        self._build_expansion()
        self._rule_cache: dict[int, tuple] = {}
        self._matrix_cache: dict = {}

    # -- topology ---------------------------------------------------------

    def _build_nodes(self):
        k = self.degree
        forest = self.forest
        self.max_level = forest.max_level
        levels = np.array([key.level for key in forest.leaves])
        idxs = np.array([key.index for key in forest.leaves], dtype=np.int64)
        ii = _compact_array(idxs)
        jj = _compact_array(idxs >> 1)

        self.cells_by_level: dict[int, np.ndarray] = {}
        for lvl in np.unique(levels):
            self.cells_by_level[int(lvl)] = np.where(levels == lvl)[0]

        locs = np.arange((k + 1) ** 2)
        la, lb = locs % (k + 1), locs // (k + 1)
        # node grid has k * 2**max_level + 1 lines per axis
        self._node_denom = k * (1 << self.max_level)
        shift = self.max_level - levels
        px = ((ii * k)[:, None] + la[None, :]) << shift[:, None]
        py = ((jj * k)[:, None] + lb[None, :]) << shift[:, None]
        big = self._node_denom + 1
        keys = px * big + py
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.node_keys = uniq
        self.n_nodes = len(uniq)
        self.cell_nodes = inverse.reshape(keys.shape)  # (n_leaves, nloc)
        self.cell_nodes_by_level = {
            lvl: self.cell_nodes[rows] for lvl, rows in self.cells_by_level.items()
        }
        gx = (uniq // big).astype(float) / self._node_denom
        gy = (uniq % big).astype(float) / self._node_denom
        ox, oy = forest.origin
        w, h = forest.size
        self.node_coords = np.column_stack([ox + gx * w, oy + gy * h])
        self._leaf_levels = levels

    def _node_id(self, px: int, py: int) -> int:
        key = px * (self._node_denom + 1) + py
        pos = int(np.searchsorted(self.node_keys, key))
        if pos >= self.n_nodes or self.node_keys[pos] != key:
            raise KeyError("no node at given grid position")
        return pos

    def _edge_node_grid(self, key: MortonKey, axis: int, coord_is_hi: bool):
        """Integer grid coords of the (k+1) nodes on one cell edge, sorted along it."""
        k = self.degree
        level, i, j = meshmod.morton_decode(key)
        shift = self.max_level - level
        ts = np.arange(k + 1)
        if axis == 0:  # vertical edge, nodes vary in y
            px = ((i + (1 if coord_is_hi else 0)) * k) << shift
            pys = ((j * k) + ts) << shift
            return np.full(k + 1, px), pys
        py = ((j + (1 if coord_is_hi else 0)) * k) << shift
        pxs = ((i * k) + ts) << shift
        return pxs, np.full(k + 1, py)

    def _build_constraints(self):
        k = self.degree
        self.constraints = ConstraintSet()
        for facet in self.facets:
            if facet.kind != "nonconforming":
                continue
            fine_keys = {s.key for s in facet.subfacets}
            coarse = facet.owner if facet.owner not in fine_keys else facet.neighbor
            cx0, cy0, cw, ch = self.forest.cell_rect(coarse)
            if facet.axis == 0:
                coarse_hi = facet.coord > cx0 + 0.5 * cw
            else:
                coarse_hi = facet.coord > cy0 + 0.5 * ch
            cpx, cpy = self._edge_node_grid(coarse, facet.axis, coarse_hi)
            master_ids = np.array([self._node_id(a, b) for a, b in zip(cpx, cpy)])
            along = cpy if facet.axis == 0 else cpx
            lo, hi = int(along[0]), int(along[-1])
            for sub in facet.subfacets:
                fx0, fy0, fw, fh = self.forest.cell_rect(sub.key)
                if facet.axis == 0:
                    fine_hi = facet.coord > fx0 + 0.5 * fw
                else:
                    fine_hi = facet.coord > fy0 + 0.5 * fh
                fpx, fpy = self._edge_node_grid(sub.key, facet.axis, fine_hi)
                falong = fpy if facet.axis == 0 else fpx
                for a, b, p in zip(fpx, fpy, falong):
                    num = int(p) - lo
                    den = hi - lo
                    if (num * k) % den == 0:
                        continue  # coincides with a coarse-side node
                    t = num / den
                    wts, _, _ = shape1d(k, np.array([t]))
                    node = self._node_id(int(a), int(b))
                    self.constraints.add(node, master_ids, wts[0])
        for node, (masters, _) in self.constraints.by_node.items():
            for m in masters:
                if int(m) in self.constraints:
                    raise AssertionError("constraint master is itself hanging")

    def _build_expansion(self):
        hanging = np.fromiter(self.constraints.by_node.keys(), dtype=np.int64,
                              count=len(self.constraints))
        is_free = np.ones(self.n_nodes, dtype=bool)
        if len(hanging):
            is_free[hanging] = False
        self.free_nodes = np.where(is_free)[0]
        self.n_free = len(self.free_nodes)
        self.node_to_free = np.full(self.n_nodes, -1, dtype=np.int64)
        self.node_to_free[self.free_nodes] = np.arange(self.n_free)

        rows, cols, data = [], [], []
        for comp in range(2):
            rows.append(2 * self.free_nodes + comp)
            cols.append(2 * np.arange(self.n_free) + comp)
            data.append(np.ones(self.n_free))
        for node, (masters, weights) in self.constraints.by_node.items():
            mf = self.node_to_free[masters]
            for comp in range(2):
                rows.append(np.full(len(masters), 2 * node + comp))
                cols.append(2 * mf + comp)
                data.append(weights)
        self.expansion = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * self.n_nodes, 2 * self.n_free)).tocsr()

    @property
    def ndof(self) -> int:
        return 2 * self.n_free + (3 if self.rm_mode else 0)

    @property
    def n_multipliers(self) -> int:
        return 3 if self.rm_mode else 0

    # -- geometry and basis tables ----------------------------------------

    def cell_size(self, level: int) -> tuple[float, float]:
        return (self.forest.size[0] / (1 << level), self.forest.size[1] / (1 << level))

    def cell_origins(self, level: int) -> np.ndarray:
        key = ("origins", level)
        if key not in self._matrix_cache:
            rows = self.cells_by_level[level]
            out = np.empty((len(rows), 2))
            for r, pos in enumerate(rows):
                x0, y0, _, _ = self.forest.cell_rect(self.forest.leaves[pos])
                out[r] = (x0, y0)
            self._matrix_cache[key] = out
        return self._matrix_cache[key]

    def scalar_basis(self, ref_pts: np.ndarray):
        """Tensor Lagrange values at reference points: (nloc, npts)."""
        Nx, _, _ = shape1d(self.degree, ref_pts[:, 0])
        Ny, _, _ = shape1d(self.degree, ref_pts[:, 1])
        return np.einsum("pa,pb->abp", Nx, Ny).reshape(-1, len(ref_pts), order="F")

    def _basis_tables(self, ref_pts: np.ndarray):
        """Reference values and parametric derivative products at points."""
        k = self.degree
        Nx, dNx, d2Nx = shape1d(k, ref_pts[:, 0])
        Ny, dNy, d2Ny = shape1d(k, ref_pts[:, 1])

        def mix(A, B):
            return np.einsum("pa,pb->abp", A, B).reshape(-1, len(ref_pts), order="F")

        return {
            "N": mix(Nx, Ny),
            "dxi": mix(dNx, Ny),
            "deta": mix(Nx, dNy),
            "dxixi": mix(d2Nx, Ny),
            "detaeta": mix(Nx, d2Ny),
            "dxieta": mix(dNx, dNy),
        }

    def rule(self, npts: int):
        """Cached tensor rule and basis tables for npts points per axis."""
        if npts not in self._rule_cache:
            pts, wts = gauss_2d(npts)
            self._rule_cache[npts] = (pts, wts, self._basis_tables(pts))
        return self._rule_cache[npts]

    def quadrature_bundles(self, npts: int):
        """Yield (level, physical points (nc, nq, 2), weights (nq,) incl. detJ)."""
        pts, wts, _ = self.rule(npts)
        for level in sorted(self.cells_by_level):
            w, h = self.cell_size(level)
            phys = self.cell_origins(level)[:, None, :] + pts[None, :, :] * np.array([w, h])
            yield level, phys, wts * (w * h)

    def cell_dof_matrix(self, level: int) -> np.ndarray:
        """(nc, 2*nloc) all-node dof ids, components interleaved."""
        nodes = self.cell_nodes_by_level[level]
        return (2 * nodes[:, :, None] + np.arange(2)[None, None, :]).reshape(len(nodes), -1)

    # -- element matrices ---------------------------------------------------

    def _element_stiffness(self, level: int, lam: float, mu: float) -> np.ndarray:
        key = ("K", level, lam, mu)
        if key not in self._matrix_cache:
            w, h = self.cell_size(level)
            pts, wts, tab = self.rule(self.degree + 1)
            nloc = tab["N"].shape[0]
            D = np.array([[lam + 2 * mu, lam, 0.0],
                          [lam, lam + 2 * mu, 0.0],
                          [0.0, 0.0, mu]])
            K = np.zeros((2 * nloc, 2 * nloc))
            dNdx = tab["dxi"] / w
            dNdy = tab["deta"] / h
            for q in range(len(wts)):
                B = np.zeros((3, 2 * nloc))
                B[0, 0::2] = dNdx[:, q]
                B[1, 1::2] = dNdy[:, q]
                B[2, 0::2] = dNdy[:, q]
                B[2, 1::2] = dNdx[:, q]
                K += wts[q] * (w * h) * (B.T @ D @ B)
            self._matrix_cache[key] = K
        return self._matrix_cache[key]

    def _element_mass(self, level: int) -> np.ndarray:
        key = ("M", level)
        if key not in self._matrix_cache:
            w, h = self.cell_size(level)
            pts, wts, tab = self.rule(self.degree + 1)
            N = tab["N"]
            Ms = np.einsum("lq,mq,q->lm", N, N, wts) * (w * h)
            self._matrix_cache[key] = _vectorize_scalar_matrix(Ms)
        return self._matrix_cache[key]

    def _element_laplace(self, level: int) -> np.ndarray:
        key = ("L", level)
        if key not in self._matrix_cache:
            w, h = self.cell_size(level)
            pts, wts, tab = self.rule(self.degree + 1)
            dNdx = tab["dxi"] / w
            dNdy = tab["deta"] / h
            Ls = (np.einsum("lq,mq,q->lm", dNdx, dNdx, wts)
                  + np.einsum("lq,mq,q->lm", dNdy, dNdy, wts)) * (w * h)
            self._matrix_cache[key] = _vectorize_scalar_matrix(Ls)
        return self._matrix_cache[key]

    def _edge_local_nodes(self, axis: int, is_hi: bool) -> np.ndarray:
        """Local scalar node indices along one cell edge, sorted along it."""
        k = self.degree
        ts = np.arange(k + 1)
        if axis == 0:
            a = k if is_hi else 0
            return a + (k + 1) * ts
        b = k if is_hi else 0
        return ts + (k + 1) * b

    def _element_edge_mass(self, level: int, axis: int, is_hi: bool) -> tuple:
        key = ("E", level, axis, is_hi)
        if key not in self._matrix_cache:
            w, h = self.cell_size(level)
            length = h if axis == 0 else w
            t, wt = gauss_1d(self.degree + 2)
            N, _, _ = shape1d(self.degree, t)
            Ms = np.einsum("qa,qb,q->ab", N, N, wt) * length
            self._matrix_cache[key] = (self._edge_local_nodes(axis, is_hi), Ms)
        return self._matrix_cache[key]

    # -- global assembly ----------------------------------------------------

    def _assemble_cellwise(self, element_fn) -> sp.csr_matrix:
        rows, cols, data = [], [], []
        for level in self.cells_by_level:
            K = element_fn(level)
            dofs = self.cell_dof_matrix(level)
            nc, nd = dofs.shape
            rows.append(np.repeat(dofs, nd, axis=1).ravel())
            cols.append(np.tile(dofs, (1, nd)).ravel())
            data.append(np.broadcast_to(K.ravel(), (nc, nd * nd)).ravel())
        A = sp.coo_matrix((np.concatenate(data),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * self.n_nodes, 2 * self.n_nodes)).tocsr()
        return (self.expansion.T @ A @ self.expansion).tocsr()

    def elastic_matrix(self, params: MaterialParams) -> sp.csr_matrix:
        key = ("elastic", params.lam, params.mu)
        if key not in self._matrix_cache:
            self._matrix_cache[key] = self._assemble_cellwise(
                lambda lvl: self._element_stiffness(lvl, params.lam, params.mu))
        return self._matrix_cache[key]

    def mass_matrix(self) -> sp.csr_matrix:
        if "mass" not in self._matrix_cache:
            self._matrix_cache["mass"] = self._assemble_cellwise(self._element_mass)
        return self._matrix_cache["mass"]

    def laplace_matrix(self) -> sp.csr_matrix:
        if "laplace" not in self._matrix_cache:
            self._matrix_cache["laplace"] = self._assemble_cellwise(self._element_laplace)
        return self._matrix_cache["laplace"]

    def boundary_mass_matrix(self) -> sp.csr_matrix:
        if "bmass" not in self._matrix_cache:
            rows, cols, data = [], [], []
            for facet in self.facets:
                if facet.kind != "boundary":
                    continue
                key = facet.owner
                is_hi = facet.normal[facet.axis] > 0
                locs, Ms = self._element_edge_mass(key.level, facet.axis, is_hi)
                pos = self.forest.leaf_position(key)
                nodes = self.cell_nodes[pos][locs]
                for comp in range(2):
                    dof = 2 * nodes + comp
                    rows.append(np.repeat(dof, len(dof)))
                    cols.append(np.tile(dof, len(dof)))
                    data.append(Ms.ravel())
            A = sp.coo_matrix((np.concatenate(data),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(2 * self.n_nodes, 2 * self.n_nodes)).tocsr()
            self._matrix_cache["bmass"] = (self.expansion.T @ A @ self.expansion).tocsr()
        return self._matrix_cache["bmass"]

    def proximal_matrix(self, l_kind: str) -> sp.csr_matrix:
        if l_kind == "identity":
            return self.mass_matrix()
        if l_kind == "h1":
            return (self.mass_matrix() + self.laplace_matrix()).tocsr()
        raise ValueError("L_kind must be 'identity' or 'h1'")


def _vectorize_scalar_matrix(Ms: np.ndarray) -> np.ndarray:
    nloc = Ms.shape[0]
    M = np.zeros((2 * nloc, 2 * nloc))
    M[0::2, 0::2] = Ms
    M[1::2, 1::2] = Ms
    return M


def build_space(forest: QuadForest, degree: int, params: MaterialParams,
                rm_mode: bool = False) -> FeSpace:
    """Spec-facing constructor; a kappa = 0 space must carry the RM block."""
    if params.kappa == 0.0 and not rm_mode:
        raise ValueError("kappa = 0 needs rm_mode: pure-Neumann operator is singular")
    return FeSpace(forest, degree, rm_mode=rm_mode)


class FeFunction:
    """Finite element function: free-dof coefficients plus optional multipliers."""

    def __init__(self, space: FeSpace, vec: np.ndarray | None = None):
        self.space = space
        if vec is None:
            vec = np.zeros(space.ndof)
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (space.ndof,):
            raise ValueError(f"coefficient vector must have length {space.ndof}")
        self.vec = vec

    @property
    def displacement(self) -> np.ndarray:
        return self.vec[:2 * self.space.n_free]

    @property
    def multipliers(self) -> np.ndarray:
        return self.vec[2 * self.space.n_free:]

    def nodal_values(self) -> np.ndarray:
        """Values on all geometric nodes (hanging nodes resolved), (2*n_nodes,)."""
        return self.space.expansion @ self.displacement

    def cell_values(self, level: int) -> np.ndarray:
        """(nc, nloc, 2) nodal values per cell of a level."""
        nod = self.nodal_values()
        nodes = self.space.cell_nodes_by_level[level]
        return nod[(2 * nodes[:, :, None] + np.arange(2)[None, None, :])]

    def eval(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        pos = self.space.forest.containing_leaf(pts)
        nod = self.nodal_values()
        out = np.empty((len(pts), 2))
        for p in np.unique(pos):
            sel = np.where(pos == p)[0]
            key = self.space.forest.leaves[p]
            x0, y0, w, h = self.space.forest.cell_rect(key)
            ref = (pts[sel] - (x0, y0)) / (w, h)
            N = self.space.scalar_basis(ref)  # (nloc, m)
            nodes = self.space.cell_nodes[p]
            vals = nod[(2 * nodes[:, None] + np.arange(2)[None, :])]  # (nloc, 2)
            out[sel] = np.einsum("lm,ld->md", N, vals)
        return out

    def sample_quadrature(self, npts: int):
        """Yield (physical points, weights, u values) per level for a tensor rule."""
        _, _, tab = self.space.rule(npts)
        for level, phys, wts in self.space.quadrature_bundles(npts):
            vals = self.cell_values(level)
            uq = np.einsum("cld,lq->cqd", vals, tab["N"])
            yield phys, wts, uq


class AssembledSystem:
    """Factorized IMEX operator (1/dt) L + elastic + Robin (+ RM saddle block)."""

    def __init__(self, space: FeSpace, params: MaterialParams, l_kind: str = "identity"):
        global FACTORIZATION_COUNT
        self.space = space
        self.params = params
        self.l_kind = l_kind
        if params.kappa == 0.0 and not space.rm_mode:
            raise ValueError("kappa = 0 requires the rigid-body multiplier block")

        a_disp = space.elastic_matrix(params)
        if params.kappa > 0:
            a_disp = (a_disp + params.kappa * space.boundary_mass_matrix()).tocsr()
        m_disp = (space.proximal_matrix(l_kind) / params.dt).tocsr()

        if space.rm_mode:
            C = sp.csr_matrix(rigid_body_block(space))
            self.a_stat = sp.bmat([[a_disp, C], [C.T, None]], format="csr")
            self.m_prox_dt = sp.bmat(
                [[m_disp, sp.csr_matrix((2 * space.n_free, 3))],
                 [sp.csr_matrix((3, 2 * space.n_free)), sp.csr_matrix((3, 3))]],
                format="csr")
        else:
            self.a_stat = a_disp
            self.m_prox_dt = m_disp
        self.matrix = (self.a_stat + self.m_prox_dt).tocsc()
        try:
            self.lu = splu(self.matrix)
        except RuntimeError as exc:
            raise RuntimeError(
                f"factorization failed for ndof={space.ndof}, kappa={params.kappa}, "
                f"dt={params.dt}, L={l_kind}: {exc}") from exc
        FACTORIZATION_COUNT += 1

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.space.ndof,):
            raise ValueError("right-hand side has stale dimension (mesh changed?)")
        return self.lu.solve(rhs)


def assemble_operator(space: FeSpace, params: MaterialParams,
                      l_kind: str = "identity") -> AssembledSystem:
    return AssembledSystem(space, params, l_kind)


def _pad_multipliers(space: FeSpace, vec_free: np.ndarray) -> np.ndarray:
    if not space.rm_mode:
        return vec_free
    out = np.zeros(space.ndof)
    out[:2 * space.n_free] = vec_free
    return out


def volume_load(space: FeSpace, fn, order: int, special_rules=None) -> np.ndarray:
    """Assemble integral fn(x) . phi_i over all cells with a tensor Gauss rule.

    fn maps points of shape (..., 2) to vectors (..., 2). `special_rules`
    optionally maps a leaf position to a dedicated reference-cell rule
    (points, weights), e.g. a corner-refined rule on a singular cell.
    """
    npts = points_for_order(order)
    pts, wts, tab = space.rule(npts)
    vec = np.zeros(2 * space.n_nodes)
    special = special_rules or {}
    for level, rows in space.cells_by_level.items():
        w, h = space.cell_size(level)
        origins = space.cell_origins(level)
        mask = np.array([space_pos not in special
                         for space_pos in space.cells_by_level[level]])
        phys = origins[mask][:, None, :] + pts[None, :, :] * np.array([w, h])
        vals = fn(phys)
        contrib = np.einsum("cqd,lq,q->cld", vals, tab["N"], wts) * (w * h)
        nodes = space.cell_nodes_by_level[level][mask]
        np.add.at(vec, (2 * nodes[:, :, None] + np.arange(2)[None, None, :]), contrib)
    for pos, (spts, swts) in special.items():
        key = space.forest.leaves[pos]
        x0, y0, w, h = space.forest.cell_rect(key)
        phys = np.array([x0, y0]) + spts * np.array([w, h])
        vals = fn(phys)
        N = space.scalar_basis(spts)
        contrib = np.einsum("qd,lq,q->ld", vals, N, swts) * (w * h)
        nodes = space.cell_nodes[pos]
        np.add.at(vec, (2 * nodes[:, None] + np.arange(2)[None, :]), contrib)
    return _pad_multipliers(space, space.expansion.T @ vec)


def boundary_load(space: FeSpace, fn, npts: int = 6, special_rules=None) -> np.ndarray:
    """Assemble integral fn(x, n) . phi_i over boundary facets.

    fn maps (points (m, 2), outward normal (2,)) to vectors (m, 2).
    `special_rules` maps a leaf position to a 1D rule (t, w) on [0, 1]
    parameterizing that cell's boundary edges from their low end.
    """
    t_def, w_def = gauss_1d(npts)
    vec = np.zeros(2 * space.n_nodes)
    special = special_rules or {}
    for facet in space.facets:
        if facet.kind != "boundary":
            continue
        pos = space.forest.leaf_position(facet.owner)
        t, wt = special.get(pos, (t_def, w_def))
        lo, hi = facet.span
        length = hi - lo
        pts = np.empty((len(t), 2))
        along = 1 - facet.axis
        pts[:, facet.axis] = facet.coord
        pts[:, along] = lo + t * length
        vals = fn(pts, np.asarray(facet.normal))
        is_hi = facet.normal[facet.axis] > 0
        locs = space._edge_local_nodes(facet.axis, is_hi)
        N, _, _ = shape1d(space.degree, t)  # (m, k+1) along the edge
        contrib = np.einsum("qd,qa,q->ad", vals, N, wt) * length
        nodes = space.cell_nodes[pos][locs]
        np.add.at(vec, (2 * nodes[:, None] + np.arange(2)[None, :]), contrib)
    return _pad_multipliers(space, space.expansion.T @ vec)


def registration_load(space: FeSpace, field_t, field_r, u: FeFunction,
                      q_img: int) -> np.ndarray:
    """b_i = -integral f_u . phi_i, the descent direction of the similarity."""
    npts = points_for_order(q_img)
    _, _, tab = space.rule(npts)
    vec = np.zeros(2 * space.n_nodes)
    for (level, phys, wts), uq in zip(space.quadrature_bundles(npts),
                                      _cell_quad_values(u, npts)):
        warped = phys + uq
        mism = field_t.sample(warped) - field_r.sample(phys)
        fvals = mism[..., None] * field_t.gradient(warped)
        contrib = -np.einsum("cqd,lq,q->cld", fvals, tab["N"], wts)
        nodes = space.cell_nodes_by_level[level]
        np.add.at(vec, (2 * nodes[:, :, None] + np.arange(2)[None, None, :]), contrib)
    return _pad_multipliers(space, space.expansion.T @ vec)


def _cell_quad_values(u: FeFunction, npts: int):
    _, _, tab = u.space.rule(npts)
    for level in sorted(u.space.cells_by_level):
        yield np.einsum("cld,lq->cqd", u.cell_values(level), tab["N"])


def assemble_load(space: FeSpace, u_prev: FeFunction, field_t, field_r,
                  params: MaterialParams, l_kind: str = "identity",
                  q_img: int = 6, extra_forcing: np.ndarray | None = None) -> np.ndarray:
    """(1/dt) L u_prev + alpha * registration load (+ manufactured terms)."""
    if u_prev.space is not space:
        raise ValueError("u_prev lives on a different space")
    m_disp = space.proximal_matrix(l_kind) / params.dt
    rhs = _pad_multipliers(space, m_disp @ u_prev.displacement)
    rhs += params.alpha * registration_load(space, field_t, field_r, u_prev, q_img)
    if extra_forcing is not None:
        rhs = rhs + extra_forcing
    return rhs


def rigid_body_block(space: FeSpace) -> np.ndarray:
    """Columns c_i with (c_i)_j = integral r_i . phi_j for r = (1,0), (0,1), (-y,x)."""
    npts = space.degree + 2
    pts, wts, tab = space.rule(npts)
    N = tab["N"]
    cols = np.zeros((2 * space.n_nodes, 3))
    for level, phys, w in space.quadrature_bundles(npts):
        nodes = space.cell_nodes_by_level[level]
        ints_n = np.einsum("lq,q->l", N, w)  # independent of the cell
        x_int = np.einsum("cq,lq,q->cl", phys[:, :, 0], N, w)
        y_int = np.einsum("cq,lq,q->cl", phys[:, :, 1], N, w)
        np.add.at(cols[:, 0], 2 * nodes, np.broadcast_to(ints_n, nodes.shape))
        np.add.at(cols[:, 1], 2 * nodes + 1, np.broadcast_to(ints_n, nodes.shape))
        np.add.at(cols[:, 2], 2 * nodes, -y_int)
        np.add.at(cols[:, 2], 2 * nodes + 1, x_int)
    return space.expansion.T @ cols


def norms(u: FeFunction) -> tuple[float, float, float]:
    """(L2 norm, H1 norm, energy seminorm ||eps(u)||) by degree-2k quadrature."""
    space = u.space
    npts = space.degree + 1
    _, _, tab = space.rule(npts)
    l2s = grads = energy = 0.0
    for level, phys, wts in space.quadrature_bundles(npts):
        w, h = space.cell_size(level)
        vals = u.cell_values(level)
        uq = np.einsum("cld,lq->cqd", vals, tab["N"])
        ux = np.einsum("cld,lq->cqd", vals, tab["dxi"]) / w
        uy = np.einsum("cld,lq->cqd", vals, tab["deta"]) / h
        l2s += np.einsum("cqd,q->", uq * uq, wts)
        grads += np.einsum("cqd,q->", ux * ux + uy * uy, wts)
        exy = 0.5 * (uy[..., 0] + ux[..., 1])
        ee = ux[..., 0] ** 2 + uy[..., 1] ** 2 + 2.0 * exy ** 2
        energy += np.einsum("cq,q->", ee, wts)
    return float(np.sqrt(l2s)), float(np.sqrt(l2s + grads)), float(np.sqrt(energy))


def transfer(u_old: FeFunction, space_new: FeSpace) -> FeFunction:
    """Nodal interpolation onto a new space; exact on nested refinement."""
    coords = space_new.node_coords[space_new.free_nodes]
    vals = u_old.eval(coords)
    vec = np.zeros(space_new.ndof)
    vec[0:2 * space_new.n_free:2] = vals[:, 0]
    vec[1:2 * space_new.n_free:2] = vals[:, 1]
    if space_new.rm_mode and u_old.space.rm_mode:
        vec[2 * space_new.n_free:] = u_old.multipliers
    return FeFunction(space_new, vec)


def export_matrix(system: AssembledSystem, path) -> None:
    """MatrixMarket dump of the factorized operator, for debugging."""
    scipy.io.mmwrite(path, system.matrix)
