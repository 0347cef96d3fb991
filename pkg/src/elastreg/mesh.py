"""2:1-balanced quadtree forest over a single coarse quadrilateral.

Leaves are addressed by Morton (Z-order) keys and stored in depth-first
Z-order. The coarse cell is an axis-aligned rectangle; all descendants are
congruent rectangles per level, so an anisotropic image domain only affects
the affine reference map, never the tree logic.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Hard cap on refinement depth; Z-range arithmetic stays in 64-bit ints.
MAX_LEVEL = 24

# side ids: 0 = -x, 1 = +x, 2 = -y, 3 = +y
_SIDE_STEP = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OPPOSITE = (1, 0, 3, 2)


def _spread_bits(v: int) -> int:
    """Insert a zero bit between the low 32 bits of v."""
    v &= 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _compact_bits(v: int) -> int:
    v &= 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


class MortonKey(NamedTuple):
    """Quadtree cell address: refinement level and interleaved-bit position."""

    level: int
    index: int

    def zstart(self) -> int:
        """Start of this cell's Z-order range at MAX_LEVEL resolution."""
        return self.index << (2 * (MAX_LEVEL - self.level))

    def zend(self) -> int:
        return (self.index + 1) << (2 * (MAX_LEVEL - self.level))

    def parent(self) -> "MortonKey":
        if self.level == 0:
            raise ValueError("root cell has no parent")
        return MortonKey(self.level - 1, self.index >> 2)

    def children(self) -> tuple["MortonKey", ...]:
        base = self.index << 2
        return tuple(MortonKey(self.level + 1, base + c) for c in range(4))


def morton_encode(level: int, i: int, j: int) -> MortonKey:
    """Interleave (i, j) with i in the least significant bit."""
    if level < 0 or level > MAX_LEVEL:
        raise ValueError(f"level {level} outside [0, {MAX_LEVEL}]")
    n = 1 << level
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"cell ({i}, {j}) outside level-{level} grid")
    return MortonKey(level, _spread_bits(i) | (_spread_bits(j) << 1))


def morton_decode(key: MortonKey) -> tuple[int, int, int]:
    """Inverse of morton_encode: returns (level, i, j)."""
    level, index = key
    if index < 0 or index >= 1 << (2 * level):
        raise ValueError(f"index {index} invalid at level {level}")
    return level, _compact_bits(index), _compact_bits(index >> 1)


@dataclass(frozen=True)
class QuadForest:
    """Sorted-leaf quadtree over the rectangle origin + [0, size]."""

    origin: tuple[float, float] = (0.0, 0.0)
    size: tuple[float, float] = (1.0, 1.0)
    leaves: tuple[MortonKey, ...] = (MortonKey(0, 0),)

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError("coarse cell must have positive side lengths")
        starts = [k.zstart() for k in self.leaves]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("leaves must be strictly increasing in Z-order")

    @property
    def max_level(self) -> int:
        return max(k.level for k in self.leaves)

    def leaf_position(self, key: MortonKey) -> int:
        """Index of `key` in the sorted leaf list (KeyError if absent)."""
        pos = int(np.searchsorted(self._zstarts(), key.zstart()))
        if pos >= len(self.leaves) or self.leaves[pos] != key:
            raise KeyError(f"{key} is not a leaf")
        return pos

    def _zstarts(self) -> np.ndarray:
        starts = self.__dict__.get("_zstarts_cache")
        if starts is None:
            starts = np.array([k.zstart() for k in self.leaves], dtype=np.int64)
            self.__dict__["_zstarts_cache"] = starts
        return starts

    def cell_rect(self, key: MortonKey) -> tuple[float, float, float, float]:
        """Physical (x0, y0, w, h) of a cell (not necessarily a leaf)."""
        level, i, j = morton_decode(key)
        w = self.size[0] / (1 << level)
        h = self.size[1] / (1 << level)
        return self.origin[0] + i * w, self.origin[1] + j * h, w, h

    def containing_leaf(self, points: np.ndarray) -> np.ndarray:
        """Sorted-leaf positions of the leaves containing each query point.

        Points are clamped to the coarse cell, so every query resolves.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = 1 << MAX_LEVEL
        u = (pts[:, 0] - self.origin[0]) / self.size[0]
        v = (pts[:, 1] - self.origin[1]) / self.size[1]
        ix = np.clip((u * n).astype(np.int64), 0, n - 1)
        iy = np.clip((v * n).astype(np.int64), 0, n - 1)
        z = _spread_array(ix) | (_spread_array(iy) << 1)
        pos = np.searchsorted(self._zstarts(), z, side="right") - 1
        return pos


def _spread_array(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.int64) & 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def uniform_refine(forest: QuadForest, n: int) -> QuadForest:
    """Replace every leaf by its 4**n descendants."""
    if n < 0:
        raise ValueError("refinement count must be non-negative")
    leaves = forest.leaves
    for _ in range(n):
        leaves = tuple(c for k in leaves for c in k.children())
    return QuadForest(forest.origin, forest.size, leaves)


def _neighbor_cell(level: int, i: int, j: int, side: int):
    di, dj = _SIDE_STEP[side]
    ni, nj = i + di, j + dj
    n = 1 << level
    if not (0 <= ni < n and 0 <= nj < n):
        return None
    return morton_encode(level, ni, nj)


def _edge_children(cell: MortonKey, side: int) -> tuple[MortonKey, MortonKey]:
    """The two children of `cell` adjacent to its `side`, in Z order."""
    level, i, j = morton_decode(cell)
    if side == 0:
        pairs = ((2 * i, 2 * j), (2 * i, 2 * j + 1))
    elif side == 1:
        pairs = ((2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1))
    elif side == 2:
        pairs = ((2 * i, 2 * j), (2 * i + 1, 2 * j))
    else:
        pairs = ((2 * i, 2 * j + 1), (2 * i + 1, 2 * j + 1))
    return tuple(morton_encode(level + 1, a, b) for a, b in pairs)


def _max_depth_along_side(leafset: set, cell: MortonKey, side: int) -> int:
    """Deepest leaf level inside `cell` touching its `side` (cell not a leaf)."""
    depth = cell.level
    stack = [cell]
    while stack:
        c = stack.pop()
        for child in _edge_children(c, side):
            if child in leafset:
                depth = max(depth, child.level)
            else:
                stack.append(child)
    return depth


def _classify_neighbor(leafset: set, cell) -> tuple[str, MortonKey | None]:
    """How the neighbor region `cell` is covered: same level, coarser, finer."""
    if cell is None:
        return "boundary", None
    if cell in leafset:
        return "same", cell
    k = cell
    while k.level > 0:
        k = k.parent()
        if k in leafset:
            return "coarser", k
    return "finer", None


def _balance_closure(leafset: set) -> set:
    """Refine until edge-adjacent leaves differ by at most one level."""
    work = set(leafset)
    changed = True
    while changed:
        changed = False
        to_refine = []
        for key in work:
            level, i, j = morton_decode(key)
            for side in range(4):
                cell = _neighbor_cell(level, i, j, side)
                kind, _ = _classify_neighbor(work, cell)
                if kind == "finer":
                    if _max_depth_along_side(work, cell, _OPPOSITE[side]) > level + 1:
                        to_refine.append(key)
                        break
        if to_refine:
            changed = True
            for key in to_refine:
                work.discard(key)
                work.update(key.children())
    return work


def is_balanced(forest: QuadForest) -> bool:
    """2:1 predicate: every pair of edge-adjacent leaves differs by <= 1 level."""
    leafset = set(forest.leaves)
    for key in forest.leaves:
        level, i, j = morton_decode(key)
        for side in range(4):
            cell = _neighbor_cell(level, i, j, side)
            kind, _ = _classify_neighbor(leafset, cell)
            if kind == "finer" and _max_depth_along_side(leafset, cell, _OPPOSITE[side]) > level + 1:
                return False
    return True


def _collapse_keeps_balance(leafset: set, parent: MortonKey) -> bool:
    level, i, j = morton_decode(parent)
    for side in range(4):
        cell = _neighbor_cell(level, i, j, side)
        kind, _ = _classify_neighbor(leafset, cell)
        if kind == "finer" and _max_depth_along_side(leafset, cell, _OPPOSITE[side]) > level + 1:
            return False
    return True


def adapt(forest: QuadForest, refine_set, coarsen_set):
    """Transactional refine/coarsen with 2:1 closure by refinement only.

    Refinement wins over coarsening; a parent collapses only when all four
    children are marked and the collapse does not violate balance. Returns
    the new forest plus a provenance map: new leaf -> ('same', key) |
    ('child-of', old leaf) | ('parent-of', old children tuple).
    """
    refine = set(refine_set)
    coarsen = set(coarsen_set)
    old = set(forest.leaves)
    if refine & coarsen:
        raise ValueError("refine and coarsen marks overlap")
    for k in (refine | coarsen) - old:
        raise KeyError(f"{k} is not a current leaf")

    work = old - refine
    for k in refine:
        work.update(k.children())
    work = _balance_closure(work)

    by_parent = defaultdict(set)
    for k in coarsen:
        if k in work:  # survived the refinement pass
            by_parent[k.parent()].add(k)
    for parent in sorted(by_parent, key=MortonKey.zstart):
        kids = set(parent.children())
        if by_parent[parent] == kids and kids <= work:
            work -= kids
            work.add(parent)
            if not _collapse_keeps_balance(work, parent):
                work.discard(parent)
                work |= kids

    new_leaves = tuple(sorted(work, key=MortonKey.zstart))
    transfer = {}
    for k in new_leaves:
        if k in old:
            transfer[k] = ("same", k)
            continue
        anc = k
        found = None
        while anc.level > 0:
            anc = anc.parent()
            if anc in old:
                found = anc
                break
        if found is not None:
            transfer[k] = ("child-of", found)
        else:
            transfer[k] = ("parent-of", k.children())
    return QuadForest(forest.origin, forest.size, new_leaves), transfer


@dataclass(frozen=True)
class Subfacet:
    """Fine-side piece of a nonconforming facet: cell plus edge interval."""

    key: MortonKey
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Facet:
    """One mesh facet; every leaf edge belongs to exactly one facet record."""

    kind: str  # 'interior' | 'nonconforming' | 'boundary'
    owner: MortonKey
    neighbor: MortonKey | None
    axis: int  # normal direction: 0 -> vertical edge, 1 -> horizontal edge
    coord: float  # fixed coordinate of the edge line
    span: tuple[float, float]  # extent along the edge direction
    normal: tuple[float, float]  # unit, oriented away from owner
    subfacets: tuple[Subfacet, ...] = field(default_factory=tuple)

    @property
    def h_e(self) -> float:
        return self.span[1] - self.span[0]


def _side_segment(forest: QuadForest, key: MortonKey, side: int):
    """(axis, fixed coordinate, (lo, hi)) of a cell side."""
    x0, y0, w, h = forest.cell_rect(key)
    if side == 0:
        return 0, x0, (y0, y0 + h)
    if side == 1:
        return 0, x0 + w, (y0, y0 + h)
    if side == 2:
        return 1, y0, (x0, x0 + w)
    return 1, y0 + h, (x0, x0 + w)


def _outward_normal(side: int) -> tuple[float, float]:
    return ((-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0))[side]


def facets(forest: QuadForest) -> list[Facet]:
    """Deterministic facet enumeration; requires a balanced forest."""
    if not is_balanced(forest):
        raise ValueError("facet enumeration requires a 2:1-balanced forest")
    leafset = set(forest.leaves)
    out = []
    for key in forest.leaves:
        level, i, j = morton_decode(key)
        for side in range(4):
            cell = _neighbor_cell(level, i, j, side)
            kind, nb = _classify_neighbor(leafset, cell)
            axis, coord, span = _side_segment(forest, key, side)
            if kind == "boundary":
                out.append(Facet("boundary", key, None, axis, coord, span,
                                 _outward_normal(side)))
            elif kind == "same":
                if key.zstart() < nb.zstart():
                    out.append(Facet("interior", key, nb, axis, coord, span,
                                     _outward_normal(side)))
            elif kind == "coarser":
                continue  # emitted from the coarse side
            else:  # finer: this leaf is the coarse side
                fine = _edge_children(cell, _OPPOSITE[side])
                for f in fine:
                    if f not in leafset:
                        raise ValueError("forest not 2:1 balanced at a facet")
                # order subfacets by position along the edge
                def pos(fk):
                    _, c, s = _side_segment(forest, fk, _OPPOSITE[side])
                    return s[0]
                fine = tuple(sorted(fine, key=pos))
                subs = []
                for f in fine:
                    _, _, s = _side_segment(forest, f, _OPPOSITE[side])
                    subs.append(Subfacet(f, s[0], s[1]))
                if key.zstart() < fine[0].zstart():
                    owner, neighbor = key, fine[0]
                    normal = _outward_normal(side)
                else:
                    owner, neighbor = fine[0], key
                    normal = _outward_normal(_OPPOSITE[side])
                out.append(Facet("nonconforming", owner, neighbor, axis, coord,
                                 span, normal, tuple(subs)))
    return out


def cell_geometry(forest: QuadForest, key: MortonKey):
    """Vertices (CCW from lower-left), diameter h_K and Jacobian of a leaf."""
    forest.leaf_position(key)  # raises if not a leaf
    x0, y0, w, h = forest.cell_rect(key)
    verts = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]])
    h_k = float(np.hypot(w, h))
    jac = np.diag([w, h])
    return verts, h_k, jac


def leaf_areas(forest: QuadForest) -> np.ndarray:
    out = np.empty(len(forest.leaves))
    for p, key in enumerate(forest.leaves):
        _, _, w, h = forest.cell_rect(key)
        out[p] = w * h
    return out
