"""Fast multipole product for the discretized single- and double-layer operators.

Expansion conventions (theta is the planar argument in (-pi, pi]):

    multipole  M_n(O) = sum_j J_n(k|y_j - O|) e^{-i n theta_j} q_j
    far field  sum_n M_n H_n(k|x - O|) e^{i n theta_x}
    local      sum_m L_m J_m(k|x - O|) e^{i m theta_x}

with q_j = phi(y_j) s(y_j).  For the double layer the moments carry the normal
derivative at y_j, which by the Bessel recurrences is

    (k/2) [conj(nu) J_{n-1} e^{-i(n-1)theta} - nu J_{n+1} e^{-i(n+1)theta}]

where nu is the unit normal written as a complex number.  Coefficient arrays
hold orders -p..p at positions 0..2p.
"""

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import quadtree, specfun


class FmmError(RuntimeError):
    """Numerical failure inside the FMM (e.g. Hankel overflow at large p)."""


class OperatorKind(str, Enum):
    S = "S"
    K = "K"


@dataclass(frozen=True)
class FmmConfig:
    k: float
    p: int
    leaf_cap: int = 6
    d: float = 4.0

    def __post_init__(self):
        if not (self.k > 0 and math.isfinite(self.k)):
            raise ValueError("k must be a positive finite number")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("p must be an integer >= 1")
        if int(self.leaf_cap) != self.leaf_cap or self.leaf_cap < 1:
            raise ValueError("leaf_cap must be an integer >= 1")
        if not self.d > 0:
            raise ValueError("d must be positive")


@dataclass
class MomentVector:
    center: np.ndarray
    p: int
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (2 * self.p + 1,):
            raise ValueError("moment vector must have length 2p+1")


@dataclass
class LocalVector:
    center: np.ndarray
    p: int
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (2 * self.p + 1,):
            raise ValueError("local vector must have length 2p+1")


def _op(op):
    return OperatorKind(op.value if isinstance(op, OperatorKind) else op)


def polar(v):
    v = np.asarray(v, dtype=float)
    return np.hypot(v[..., 0], v[..., 1]), np.arctan2(v[..., 1], v[..., 0])


def j_signed(P, z):
    """J_n(z) for n = -P..P on the last axis."""
    jt = specfun.j_table(P, z)
    sign = (-1.0) ** np.arange(P, 0, -1)
    return np.concatenate([jt[..., :0:-1] * sign, jt], axis=-1)


def h_signed(P, z):
    """H^(1)_n(z) for n = -P..P on the last axis; raises FmmError on overflow."""
    try:
        ht = specfun.h_table(P, z)
    except specfun.SpecialFunctionError as exc:
        raise FmmError(f"{exc} (order {P}); use a smaller p") from None
    sign = (-1.0) ** np.arange(P, 0, -1)
    return np.concatenate([ht[..., :0:-1] * sign, ht], axis=-1)


def strengths(disc, op):
    if _op(op) is OperatorKind.K and getattr(disc, "normals", None) is None:
        raise ValueError("the double-layer operator needs normals")
    return disc.strengths


def moment_rows(rel, q, normals, k, p, op):
    """Per-point moment contributions about a center, shape (len(rel), 2p+1)."""
    r, th = polar(rel)
    if _op(op) is OperatorKind.S:
        n = np.arange(-p, p + 1)
        return j_signed(p, k * r) * np.exp(-1j * np.outer(th, n)) * q[:, None]
    n = np.arange(-p - 1, p + 2)
    g = j_signed(p + 1, k * r) * np.exp(-1j * np.outer(th, n))
    nu = (normals[:, 0] + 1j * normals[:, 1])[:, None]
    return 0.5 * k * (np.conj(nu) * g[:, :-2] - nu * g[:, 2:]) * q[:, None]


def local_rows(rel, k, p):
    """J_m(k|x - O|) e^{i m theta} for m = -p..p, shape (len(rel), 2p+1)."""
    r, th = polar(rel)
    return j_signed(p, k * r) * np.exp(1j * np.outer(th, np.arange(-p, p + 1)))


def _diff_index(p):
    n = np.arange(-p, p + 1)
    return n[:, None] - n[None, :]


def m2m_matrix(delta, k, p):
    """T[n, l] = J_{n-l}(k rho) e^{-i(n-l) phi} for delta = O_child - O_parent."""
    rho, phi = polar(delta)
    D = _diff_index(p)
    return j_signed(2 * p, k * rho)[D + 2 * p] * np.exp(-1j * D * phi)


def m2l_matrix(delta, k, p):
    """T[m, n] = H_{n-m}(k R) e^{i(n-m) theta} for delta = O_target - O_source."""
    R, th = polar(delta)
    if R == 0:
        raise ValueError("m2l needs distinct source and target centers")
    D = -_diff_index(p)
    return h_signed(2 * p, k * R)[D + 2 * p] * np.exp(1j * D * th)


def l2l_matrix(delta, k, p):
    """T[l, m] = J_{m-l}(k rho) e^{i(m-l) phi} for delta = O_child - O_parent."""
    rho, phi = polar(delta)
    D = -_diff_index(p)
    return j_signed(2 * p, k * rho)[D + 2 * p] * np.exp(1j * D * phi)


# single-cell operations


def p2m(disc, indices, center, cfg, op=OperatorKind.S):
    """Exact moments of the knots ``indices`` about ``center``."""
    idx = np.asarray(indices, dtype=np.int64)
    center = np.asarray(center, dtype=float)
    q = strengths(disc, op)[idx]
    coeffs = np.zeros(2 * cfg.p + 1, dtype=complex)
    if idx.size:
        rows = moment_rows(disc.knots[idx] - center, q, disc.normals[idx], cfg.k, cfg.p, op)
        coeffs = rows.sum(axis=0)
    return MomentVector(center, cfg.p, coeffs)


def m2m(child_moments, parent_center, cfg):
    parent_center = np.asarray(parent_center, dtype=float)
    out = np.zeros(2 * cfg.p + 1, dtype=complex)
    for mv in child_moments:
        if mv.p != cfg.p:
            raise ValueError("all moment vectors must share p")
        out += m2m_matrix(mv.center - parent_center, cfg.k, cfg.p) @ mv.coeffs
    return MomentVector(parent_center, cfg.p, out)


def m2l(source, target_center, cfg):
    if source.p != cfg.p:
        raise ValueError("moment vector p does not match the config")
    target_center = np.asarray(target_center, dtype=float)
    T = m2l_matrix(target_center - source.center, cfg.k, cfg.p)
    return LocalVector(target_center, cfg.p, T @ source.coeffs)


def l2l(parent, child_center, cfg):
    if parent.p != cfg.p:
        raise ValueError("local vector p does not match the config")
    child_center = np.asarray(child_center, dtype=float)
    T = l2l_matrix(child_center - parent.center, cfg.k, cfg.p)
    return LocalVector(child_center, cfg.p, T @ parent.coeffs)


def l2p(loc, x, cfg):
    """Evaluate a local expansion at one point (complex) or many (array)."""
    x = np.asarray(x, dtype=float)
    rows = local_rows(np.atleast_2d(x) - loc.center, cfg.k, loc.p)
    val = rows @ loc.coeffs
    return complex(val[0]) if x.ndim == 1 else val


def multipole_eval(mv, x, k):
    """Far-field value sum_n M_n H_n(k|x - O|) e^{i n theta} at points x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r, th = polar(x - mv.center)
    rows = h_signed(mv.p, k * r) * np.exp(1j * np.outer(th, np.arange(-mv.p, mv.p + 1)))
    return rows @ mv.coeffs


# kernels and the dense oracle


def kernel_values(x, y, nu, q, k, op):
    """Kernel times strength for paired arrays of targets x and sources y."""
    r = np.hypot(y[:, 0] - x[:, 0], y[:, 1] - x[:, 1])
    if r.size == 0:
        return np.zeros(0, dtype=complex)
    h = specfun.h_table(1, k * r)
    if _op(op) is OperatorKind.S:
        return h[:, 0] * q
    cos = ((y[:, 0] - x[:, 0]) * nu[:, 0] + (y[:, 1] - x[:, 1]) * nu[:, 1]) / r
    return -k * h[:, 1] * cos * q


def _accumulate(n, idx, vals):
    return (np.bincount(idx, weights=vals.real, minlength=n)
            + 1j * np.bincount(idx, weights=vals.imag, minlength=n))


def direct_apply(disc, cfg, op=OperatorKind.S, chunk=200):
    """Dense O(N^2) product, diagonal excluded."""
    q = strengths(disc, op)
    P, nu = disc.knots, disc.normals
    n = disc.count
    out = np.zeros(n, dtype=complex)
    cols = np.arange(n)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(n, s + chunk))
        I = np.repeat(rows, n)
        J = np.tile(cols, rows.size)
        keep = I != J
        I, J = I[keep], J[keep]
        vals = kernel_values(P[I], P[J], nu[J], q[J], cfg.k, op)
        out[rows] = _accumulate(n, I, vals)[rows]
    return out


def near_pairs(tree):
    """(i, j) index arrays of all direct-summation pairs, i != j."""
    I, J = [], []
    for lid in tree.leaves():
        tgt = tree.points(lid)
        src = quadtree.near_points(tree, lid)
        if tgt.size == 0 or src.size == 0:
            continue
        ii = np.repeat(tgt, src.size)
        jj = np.tile(src, tgt.size)
        keep = ii != jj
        I.append(ii[keep])
        J.append(jj[keep])
    if not I:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(I), np.concatenate(J)


def near_field(x_index, disc, tree, cfg, op=OperatorKind.S):
    """Direct sum over the near set of the knot's leaf, excluding the knot itself."""
    lid = int(tree.leaf_of_point[x_index])
    src = quadtree.near_points(tree, lid)
    src = src[src != x_index]
    if src.size == 0:
        return 0j
    q = strengths(disc, op)
    x = np.repeat(disc.knots[[x_index]], src.size, axis=0)
    return complex(kernel_values(x, disc.knots[src], disc.normals[src], q[src], cfg.k, op).sum())


# the full product


def signed_scaled(table, P, z):
    """(mant, logscale) for orders -P..P from a non-negative-order scaled table."""
    m, l = table(P, z)
    sign = (-1.0) ** np.arange(P, 0, -1)
    return (np.concatenate([m[..., :0:-1] * sign, m], axis=-1),
            np.concatenate([l[..., :0:-1], l], axis=-1))


def level_scale(k, d, L, p):
    """ln of the coefficient scale of level L: |n| ln(a/2) - ln|n|!, a = k * cell radius.

    Moments are stored as M_n e^{-s_n} and locals as L_m e^{s_m}, which keeps
    every stored coefficient and translation entry within double range.
    """
    n = np.abs(np.arange(-p, p + 1))
    a = k * math.sqrt(2.0) * d / 2.0 ** (L + 1)
    return n * math.log(a / 2.0) - specfun.lgamma_int(n + 1)


def translation(kind, delta, k, rows, cols, row_scale, col_scale, table=None):
    """Translation matrix between scaled coefficient vectors.

    ``rows`` and ``cols`` are the (signed) output and input orders; the scales
    are the matching level scales.  kind is "m2m" (delta = O_child - O_parent),
    "m2l" (delta = O_target - O_source) or "l2l" (delta = O_child - O_parent).
    ``table`` may supply the signed scaled Bessel table (mant, logs) at k|delta|
    for orders -P..P with P at least max|row - col|.
    """
    rows, cols = np.asarray(rows), np.asarray(cols)
    r, th = polar(delta)
    if kind == "m2m":
        D = rows[:, None] - cols[None, :]
    else:
        D = cols[None, :] - rows[:, None]
    P = int(np.abs(D).max())
    if kind == "m2l" and r == 0:
        raise ValueError("m2l needs distinct source and target centers")
    if table is not None:
        mant, logs = table
        if (len(mant) - 1) // 2 < P:
            raise ValueError("supplied table is too short")
        P = (len(mant) - 1) // 2
    elif kind == "m2l":
        mant, logs = signed_scaled(specfun.h_scaled_table, P, k * r)
    else:
        mant, logs = signed_scaled(specfun.j_scaled_table, P, k * r)
    if kind == "m2m":
        expo = logs[D + P] - row_scale[:, None] + col_scale[None, :]
        phase = np.exp(-1j * D * th)
    elif kind == "m2l":
        expo = logs[D + P] + row_scale[:, None] + col_scale[None, :]
        phase = np.exp(1j * D * th)
    elif kind == "l2l":
        expo = logs[D + P] + row_scale[:, None] - col_scale[None, :]
        phase = np.exp(1j * D * th)
    else:
        raise ValueError(f"unknown translation kind {kind!r}")
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        T = np.where(np.isneginf(expo), 0.0, mant[D + P] * np.exp(expo)) * phase
    if not np.all(np.isfinite(T)):
        raise FmmError(f"{kind} translation overflows at order {P}")
    return T


def _scaled_matrix(kind, delta, k, p, row_scale, col_scale):
    n = np.arange(-p, p + 1)
    return translation(kind, delta, k, n, n, row_scale, col_scale)


def scaled_source_rows(rel, q, normals, k, p, op, scale, kernel="J"):
    """Per-point scaled contributions B_n(k r) e^{-i n theta} q (or their normal derivative).

    kernel "J" gives moment rows scaled by e^{-s}; "H" gives local rows
    (the exact local expansion of far sources) scaled by e^{+s}.
    """
    r, th = polar(rel)
    table = specfun.j_scaled_table if kernel == "J" else specfun.h_scaled_table
    sgn = -1.0 if kernel == "J" else 1.0
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        if _op(op) is OperatorKind.S:
            m, l = signed_scaled(table, p, k * r)
            n = np.arange(-p, p + 1)
            w = np.where(np.isneginf(l), 0.0, np.exp(l + sgn * scale))
            return m * w * np.exp(-1j * np.outer(th, n)) * q[:, None]
        m, l = signed_scaled(table, p + 1, k * r)
        n = np.arange(-p - 1, p + 2)
        g = np.exp(-1j * np.outer(th, n)) * m
        nu = (normals[:, 0] + 1j * normals[:, 1])[:, None]
        lo = np.where(np.isneginf(l[:, :-2]), 0.0, np.exp(l[:, :-2] + sgn * scale))
        hi = np.where(np.isneginf(l[:, 2:]), 0.0, np.exp(l[:, 2:] + sgn * scale))
        return 0.5 * k * (np.conj(nu) * g[:, :-2] * lo - nu * g[:, 2:] * hi) * q[:, None]


def scaled_moment_rows(rel, q, normals, k, p, op, scale):
    return scaled_source_rows(rel, q, normals, k, p, op, scale, "J")


def scaled_local_rows(rel, k, p, scale):
    """J_m(k|x - O|) e^{i m theta} e^{-s_m}: evaluates locals stored as L_m e^{s_m}."""
    r, th = polar(rel)
    m, l = signed_scaled(specfun.j_scaled_table, p, k * r)
    with np.errstate(under="ignore", invalid="ignore"):
        w = np.where(np.isneginf(l), 0.0, np.exp(l - scale))
    return m * w * np.exp(1j * np.outer(th, np.arange(-p, p + 1)))


def scaled_multipole_rows(rel, k, p, scale):
    """H_n(k|x - O|) e^{i n theta} e^{s_n}: evaluates moments stored as M_n e^{-s_n}."""
    r, th = polar(rel)
    m, l = signed_scaled(specfun.h_scaled_table, p, k * r)
    with np.errstate(over="ignore", under="ignore"):
        w = np.exp(l + scale)
    return m * w * np.exp(1j * np.outer(th, np.arange(-p, p + 1)))


@dataclass
class FmmState:
    """Everything computed by one FMM product, kept for error analysis.

    Coefficients are stored scaled per level (see ``level_scale``); use
    ``moment``/``local`` or ``moments``/``locals`` for true values.  Rows of
    cells without an expansion are zero.  ``m2l_scaled`` holds only the part
    translated from the cell's own interaction list.
    """

    disc: object
    tree: quadtree.Quadtree
    cfg: FmmConfig
    op: OperatorKind
    scales: np.ndarray
    moments_scaled: np.ndarray
    locals_scaled: np.ndarray
    m2l_scaled: np.ndarray
    near: np.ndarray
    far: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def values(self):
        return self.near + self.far

    def _cell_scale(self, cid):
        return self.scales[self.tree.cells[cid].level]

    def moment(self, cid):
        c = self.tree.cells[cid]
        return MomentVector(c.center.copy(), self.cfg.p,
                            self.moments_scaled[cid] * np.exp(self._cell_scale(cid)))

    def local(self, cid):
        c = self.tree.cells[cid]
        return LocalVector(c.center.copy(), self.cfg.p,
                           self.locals_scaled[cid] * np.exp(-self._cell_scale(cid)))

    def m2l_local(self, cid):
        c = self.tree.cells[cid]
        return LocalVector(c.center.copy(), self.cfg.p,
                           self.m2l_scaled[cid] * np.exp(-self._cell_scale(cid)))

    @property
    def moments(self):
        lev = np.array([c.level for c in self.tree.cells])
        with np.errstate(over="ignore"):
            return self.moments_scaled * np.exp(self.scales[lev])

    @property
    def locals(self):
        lev = np.array([c.level for c in self.tree.cells])
        with np.errstate(over="ignore"):
            return self.locals_scaled * np.exp(-self.scales[lev])


def _quadrant(c):
    return (c.ix & 1) + 2 * (c.iy & 1)


def _by_quadrant(cells, ids):
    groups = [[], [], [], []]
    for cid in ids:
        groups[_quadrant(cells[cid])].append(cid)
    for qd in range(4):
        if groups[qd]:
            ch = np.array(groups[qd])
            yield qd, ch, np.array([cells[c].parent for c in ch])


def build_tree(disc, cfg):
    return quadtree.build(disc, cfg.d, cfg.leaf_cap)


def run(disc, cfg, op=OperatorKind.S, tree=None, with_near=True):
    """Full FMM product; returns the retained FmmState."""
    op = _op(op)
    q = strengths(disc, op)
    t0 = time.perf_counter()
    if tree is None:
        tree = build_tree(disc, cfg)
    cells = tree.cells
    k, p = cfg.k, cfg.p
    width = 2 * p + 1
    ncell = len(cells)
    centers = np.array([c.center for c in cells])
    level = np.array([c.level for c in cells])
    scales = np.array([level_scale(k, cfg.d, L, p) for L in range(tree.L_max + 1)])
    t1 = time.perf_counter()

    # upward pass: leaf moments, then child-to-parent shifts
    M = np.zeros((ncell, width), dtype=complex)
    lop = tree.leaf_of_point
    pts = np.nonzero(level[lop] >= 1)[0]
    if pts.size:
        rows = scaled_moment_rows(disc.knots[pts] - centers[lop[pts]], q[pts], disc.normals[pts],
                                  k, p, op, scales[level[lop[pts]]])
        for c in range(width):
            M[:, c] = _accumulate(ncell, lop[pts], rows[:, c])
    for L in range(tree.L_max - 1, 1, -1):
        hw = cfg.d / 2.0 ** (L + 2)
        for qd, ch, par in _by_quadrant(cells, tree.levels[L + 1]):
            delta = np.array([(2 * (qd & 1) - 1) * hw, (2 * (qd >> 1) - 1) * hw])
            M[par] += M[ch] @ _scaled_matrix("m2m", delta, k, p, scales[L], scales[L + 1]).T
    t2 = time.perf_counter()

    # downward pass: parent-to-child shifts, then the level's M2L
    Lc = np.zeros((ncell, width), dtype=complex)
    LM = np.zeros((ncell, width), dtype=complex)
    for L in range(2, tree.L_max + 1):
        hw = cfg.d / 2.0 ** (L + 1)
        if L >= 3:
            for qd, ch, par in _by_quadrant(cells, tree.levels[L]):
                delta = np.array([(2 * (qd & 1) - 1) * hw, (2 * (qd >> 1) - 1) * hw])
                Lc[ch] += Lc[par] @ _scaled_matrix("l2l", delta, k, p, scales[L], scales[L - 1]).T
        tgt, src = [], []
        for cid in tree.levels[L]:
            for e in tree.lists[cid]:
                tgt.append(cid)
                src.append(e.source_cell)
        if not tgt:
            continue
        tgt, src = np.array(tgt), np.array(src)
        key = np.rint((centers[tgt] - centers[src]) / hw).astype(np.int64)
        skey = level[src]
        allkey = np.column_stack([key, skey])
        uniq, inv = np.unique(allkey, axis=0, return_inverse=True)
        inv = inv.ravel()
        for g in range(len(uniq)):
            sel = inv == g
            T = _scaled_matrix("m2l", uniq[g, :2] * hw, k, p, scales[L], scales[uniq[g, 2]])
            np.add.at(LM, tgt[sel], M[src[sel]] @ T.T)
        ut = np.unique(tgt)
        Lc[ut] += LM[ut]
    t3 = time.perf_counter()

    # evaluation: locals at each knot, direct near sums
    n = disc.count
    far = np.zeros(n, dtype=complex)
    pts = np.nonzero(level[lop] >= 2)[0]
    if pts.size:
        rows = scaled_local_rows(disc.knots[pts] - centers[lop[pts]], k, p, scales[level[lop[pts]]])
        far[pts] = np.einsum("ij,ij->i", rows, Lc[lop[pts]])
    if not np.all(np.isfinite(far)):
        raise FmmError("non-finite far-field values; use a smaller p")
    near = np.zeros(n, dtype=complex)
    if with_near:
        I, J = near_pairs(tree)
        if I.size:
            near = _accumulate(n, I, kernel_values(disc.knots[I], disc.knots[J], disc.normals[J], q[J], k, op))
    t4 = time.perf_counter()
    timings = {"tree": t1 - t0, "upward": t2 - t1, "downward": t3 - t2, "evaluate": t4 - t3, "total": t4 - t0}
    return FmmState(disc, tree, cfg, op, scales, M, Lc, LM, near, far, timings)


def apply(disc, cfg, op=OperatorKind.S, tree=None):
    """FMM approximation of the operator applied to the density (length 2N)."""
    return run(disc, cfg, op, tree).values
