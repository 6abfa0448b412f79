"""Adaptive quadtree with adjacency sets and well-separated interaction lists.

Cells carry integer grid indices (ix, iy) at their level, so adjacency tests
are exact.  Every cell's subtree owns a contiguous slice of ``tree.perm``.

Cells are closed on their upper edges, (lo, hi] per axis: a knot on a
dividing line belongs to the lower/left child.

Interaction lists are built top-down from "colleague" sets.  The colleagues
of a cell D at level L are the level-L cells adjacent to D (D included) plus
coarser leaves adjacent to D.  The candidates for a child c of D are the
children of D's non-leaf colleagues and D's leaf colleagues; those touching c
become c's colleagues, the others enter c's interaction list.  A coarse leaf
therefore enters the list at the first level where it stops being adjacent.
If that happens more than MAX_LEVEL_DIFF levels below the leaf, its multipole
expansion may not converge; by default such a leaf is summed directly for
all sources under the cell (``deferred``), or an error is raised.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

MAX_DEPTH = 30
MAX_LEVEL_DIFF = 2


class TreeStructureError(RuntimeError):
    """The tree or its interaction lists violate a structural requirement."""


@dataclass
class Cell:
    id: int
    level: int
    ix: int
    iy: int
    center: np.ndarray
    half_width: float
    parent: int | None
    children: list = field(default_factory=list)
    start: int = 0
    stop: int = 0
    is_leaf: bool = True

    @property
    def n_points(self):
        return self.stop - self.start


@dataclass(frozen=True)
class InteractionEntry:
    source_cell: int
    level_diff: int


@dataclass
class Quadtree:
    cells: list
    origin: np.ndarray
    d: float
    leaf_cap: int
    perm: np.ndarray
    leaf_of_point: np.ndarray
    levels: list
    lists: list = None
    colleagues: list = None
    deferred: list = None

    @property
    def L_max(self):
        return len(self.levels) - 1

    @property
    def root_square(self):
        return self.origin, self.d

    def points(self, cid):
        """Indices of all knots in the subtree of cell ``cid``."""
        c = self.cells[cid]
        return self.perm[c.start : c.stop]

    def leaves(self):
        return [c.id for c in self.cells if c.is_leaf]

    def ancestors(self, cid):
        """Chain from the cell up to the root, starting with the cell itself."""
        out = []
        while cid is not None:
            out.append(cid)
            cid = self.cells[cid].parent
        return out


def level_distance(d, L):
    """d_L = sqrt(2) d / 2^(L+2), the distance from a level-L center to its children's centers."""
    if L < 0:
        raise ValueError("level must be non-negative")
    return math.sqrt(2.0) * d / 2.0 ** (L + 2)


def touching(a, b):
    """Closed squares of cells a and b share at least a corner."""
    lm = max(a.level, b.level)
    sa, sb = 1 << (lm - a.level), 1 << (lm - b.level)
    return (a.ix * sa <= (b.ix + 1) * sb and b.ix * sb <= (a.ix + 1) * sa
            and a.iy * sa <= (b.iy + 1) * sb and b.iy * sb <= (a.iy + 1) * sa)


def default_center(pts, d):
    """Root-square center: the origin when the d-square around it covers the
    knots, otherwise the bounding-box center."""
    if len(pts) == 0:
        return np.zeros(2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if np.all(lo > -0.5 * d) and np.all(hi <= 0.5 * d):
        return np.zeros(2)
    return 0.5 * (lo + hi)


def build(disc, d, leaf_cap, center=None, max_depth=MAX_DEPTH, far_policy="near"):
    """Adaptive quadtree over a square of side d.

    ``center`` defaults to ``default_center``.  A cell is split while it
    holds more than ``leaf_cap`` points; empty children are pruned.
    ``far_policy`` decides what happens to a coarse leaf that would need a
    level difference above MAX_LEVEL_DIFF: "near" sums it directly, "error"
    raises TreeStructureError.
    """
    pts = disc.knots if hasattr(disc, "knots") else np.asarray(disc, dtype=float)
    if not d > 0 or leaf_cap < 1:
        raise ValueError("need d > 0 and leaf_cap >= 1")
    if far_policy not in ("near", "error"):
        raise ValueError("far_policy must be 'near' or 'error'")
    if center is None:
        center = default_center(pts, d)
    origin = np.asarray(center, dtype=float) - 0.5 * d
    rel = (pts - origin) / d
    if len(pts) and (np.any(rel <= 0) or np.any(rel > 1)):
        raise ValueError("knot outside the root square; increase d")

    cells = []
    order = []

    def make(level, ix, iy, parent):
        hw = d / 2.0 ** (level + 1)
        c = origin + np.array([(2 * ix + 1) * hw, (2 * iy + 1) * hw])
        cell = Cell(len(cells), level, ix, iy, c, hw, parent)
        cells.append(cell)
        return cell

    def split(cell, idx):
        cell.start = len(order)
        if len(idx) <= leaf_cap:
            order.extend(idx.tolist())
            cell.stop = len(order)
            return
        if cell.level >= max_depth:
            raise TreeStructureError(f"max_depth {max_depth} exceeded (coincident points?)")
        cell.is_leaf = False
        # (lo, hi]: a point on the midline goes to the lower child
        gx = np.ceil(rel[idx, 0] * 2.0 ** (cell.level + 1)).astype(np.int64) - 1 - 2 * cell.ix
        gy = np.ceil(rel[idx, 1] * 2.0 ** (cell.level + 1)).astype(np.int64) - 1 - 2 * cell.iy
        gx, gy = np.clip(gx, 0, 1), np.clip(gy, 0, 1)
        for qy in (0, 1):
            for qx in (0, 1):
                sub = idx[(gx == qx) & (gy == qy)]
                if sub.size:
                    child = make(cell.level + 1, 2 * cell.ix + qx, 2 * cell.iy + qy, cell.id)
                    cell.children.append(child.id)
                    split(child, sub)
        cell.stop = len(order)

    root = make(0, 0, 0, None)
    split(root, np.arange(len(pts)))
    perm = np.array(order, dtype=np.int64)
    leaf_of_point = np.empty(len(pts), dtype=np.int64)
    nlev = max(c.level for c in cells) + 1
    levels = [[] for _ in range(nlev)]
    for c in cells:
        levels[c.level].append(c.id)
        if c.is_leaf:
            leaf_of_point[perm[c.start : c.stop]] = c.id
    tree = Quadtree(cells, origin, float(d), int(leaf_cap), perm, leaf_of_point, levels)
    _build_lists(tree, far_policy)
    return tree


def _build_lists(tree, far_policy):
    cells = tree.cells
    col = [None] * len(cells)
    lists = [[] for _ in cells]
    deferred = [[] for _ in cells]
    col[0] = [0]
    for level_ids in tree.levels:
        for pid in level_ids:
            parent = cells[pid]
            if parent.is_leaf:
                continue
            cand = []
            for cid in col[pid]:
                c = cells[cid]
                cand.extend([cid] if c.is_leaf else c.children)
            for kid in parent.children:
                child = cells[kid]
                mine = []
                for cid in cand:
                    if touching(child, cells[cid]):
                        mine.append(cid)
                    else:
                        diff = child.level - cells[cid].level
                        if diff <= MAX_LEVEL_DIFF:
                            lists[kid].append(InteractionEntry(cid, diff))
                        elif far_policy == "near":
                            deferred[kid].append(cid)
                        else:
                            raise TreeStructureError(
                                f"cell {kid} needs an interaction with level difference {diff} > "
                                f"{MAX_LEVEL_DIFF}; use a smaller leaf_cap")
                col[kid] = mine
    tree.lists = lists
    tree.colleagues = col
    tree.deferred = deferred


def interaction_lists(tree):
    """cell id -> list of InteractionEntry (empty for levels 0 and 1)."""
    return {c.id: list(tree.lists[c.id]) for c in tree.cells}


def near_leaves(tree, leaf_id):
    """Leaves whose points are summed directly for sources in ``leaf_id``.

    These are all leaves below the leaf's colleagues, i.e. leaves whose
    ancestor at the leaf's level (or themselves, if coarser) touches it,
    plus deferred coarse leaves of the leaf's ancestors.
    """
    out = []
    for aid in tree.ancestors(leaf_id):
        out.extend(tree.deferred[aid])
    for cid in tree.colleagues[leaf_id]:
        stack = [cid]
        while stack:
            c = tree.cells[stack.pop()]
            if c.is_leaf:
                out.append(c.id)
            else:
                stack.extend(c.children)
    return set(out)


def adjacency(tree):
    """leaf id -> set of leaves whose closed squares touch it (self included).

    This is a subset of ``near_leaves``: finer leaves under a colleague that
    do not touch the leaf are summed directly as well.
    """
    out = {}
    for lid in tree.leaves():
        me = tree.cells[lid]
        out[lid] = {o for o in near_leaves(tree, lid) if touching(me, tree.cells[o])}
    return out


def near_points(tree, leaf_id):
    ids = sorted(near_leaves(tree, leaf_id))
    if not ids:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([tree.points(i) for i in ids])


def far_entries(tree, leaf_id):
    """(target ancestor, InteractionEntry) pairs over the leaf's ancestor chain."""
    out = []
    for aid in tree.ancestors(leaf_id):
        for e in tree.lists[aid]:
            out.append((aid, e))
    return out


def far_counts(tree, lists, source_index):
    """(N_0, N_1, N_2, I): far points of a source bucketed by level difference.

    I is the largest level difference with a non-zero count (-1 if none).
    """
    leaf = int(tree.leaf_of_point[source_index])
    counts = [0, 0, 0]
    for aid in tree.ancestors(leaf):
        for e in lists[aid]:
            counts[e.level_diff] += tree.cells[e.source_cell].n_points
    nz = [i for i in range(3) if counts[i]]
    return counts[0], counts[1], counts[2], (max(nz) if nz else -1)


def max_far_counts(tree):
    """Component-wise maximum of (N_0, N_1, N_2) over all sources."""
    best = [0, 0, 0]
    for lid in tree.leaves():
        if tree.cells[lid].n_points == 0:
            continue
        i = int(tree.perm[tree.cells[lid].start])
        n0, n1, n2, _ = far_counts(tree, tree.lists, i)
        best = [max(a, b) for a, b in zip(best, (n0, n1, n2))]
    return tuple(best)


def dump_csv(tree):
    """Tree dump as CSV text: cell_id,level,cx,cy,half_width,parent,is_leaf,n_points."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_id", "level", "cx", "cy", "half_width", "parent", "is_leaf", "n_points"])
    for c in tree.cells:
        w.writerow([c.id, c.level, repr(float(c.center[0])), repr(float(c.center[1])),
                    repr(float(c.half_width)), "" if c.parent is None else c.parent,
                    int(c.is_leaf), c.n_points])
    return buf.getvalue()
