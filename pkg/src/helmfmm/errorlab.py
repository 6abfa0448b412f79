"""Exact error decomposition of the FMM product and its a priori bounds.

For a source point x in leaf D_{L'} with ancestor chain D_2, ..., D_{L'} the
far-field error  E_S(x) = (direct far sum) - (FMM far value)  splits into

    e_s1   sum over list cells I of sum_{|n|>p} H_n(k|x - O_I|) e^{i n theta} M_n(I)
    e_s2   the same with |n| <= p and the moment errors EM_n(I)
    e_s31  sum over D_L of sum_{|m|>p} J_m(k|x - O_L|) e^{i m theta} LM^tail_m(D_L),
           where LM^tail is the M2L image of the exact moments M_n, |n| <= p
    e_s32  minus the same with EM_n in place of M_n
    e_s4   sum over D_L, L >= 3, of the |m| > p part of the L2L image of the
           parent's FMM locals

so that the five parts add up to E_S(x).  Because M~ = M - EM, the M2L
truncation error of the FMM moments is e_s31 + e_s32 (e_s32 carries the minus
sign).  Every remainder series is summed term by term up to order
n_max = max(1000, p + 200); grouping the point sums first turns each one into
a sum over exact high-order moments or locals of whole cells.  Those are
stored with the engine's per-level scaling (see ``fmm.level_scale``) so that
no intermediate over- or underflows.

Moment and local errors are computed twice: as differences between direct
(exact) expansions and the FMM ones, and by the child-to-parent and
parent-to-child error recursions with explicitly summed remainders.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import boundary, fmm, quadtree, specfun
from .fmm import OperatorKind, polar

N_TAIL = 1000
TOL_MOMENT = 1e-12
TOL_LOCAL = 1e-10
TOL_IDENTITY = 1e-12
C_THM8 = 1.2
_BLOCK = 1500
# ln(1e30): relative size below which exact local terms are dropped
LOCAL_CUT = 69.0


class ErrorLabError(RuntimeError):
    """An identity or dual-path check failed beyond its tolerance."""


class InapplicableBoundError(ValueError):
    """The truncation number is below a bound's applicability threshold."""


@dataclass(frozen=True)
class GeometryConstants:
    """Separation constants per level difference i = 0, 1, 2."""

    eps: tuple = (3.0, 4.0, 6.0)
    zeta: tuple = (4.0, math.sqrt(26.0), math.sqrt(50.0))
    eta: tuple = (2.0, 4.0, 8.0)

    @property
    def r(self):
        return tuple(h / (math.sqrt(2.0) * e) for h, e in zip(self.eta, self.eps))

    @property
    def gamma(self):
        return tuple(math.sqrt(2.0) / z for z in self.zeta)

    @property
    def lam(self):
        return tuple(g * math.exp(3.0 * h / (2.0 * math.sqrt(2.0) * z))
                     for g, h, z in zip(self.gamma, self.eta, self.zeta))


GEOMETRY = GeometryConstants()


@dataclass
class DualCheck:
    """An error vector computed two ways; values are level-scaled coefficients."""

    by_difference: np.ndarray
    by_recursion: np.ndarray
    gap: float
    tol: float

    @property
    def ok(self):
        return self.gap <= self.tol


@dataclass
class ErrorDecomposition:
    """The five error parts at one or more source points (arrays over x_index)."""

    x_index: np.ndarray
    p: int
    e_s1: np.ndarray
    e_s2: np.ndarray
    e_s31: np.ndarray
    e_s32: np.ndarray
    e_s4: np.ndarray
    total: np.ndarray
    direct_far: np.ndarray
    fmm_far: np.ndarray
    tail_tol: np.ndarray
    local_form: np.ndarray = None

    @property
    def parts_sum(self):
        return self.e_s1 + self.e_s2 + self.e_s31 + self.e_s32 + self.e_s4

    @property
    def identity_gap(self):
        return np.abs(self.total - self.parts_sum)

    @property
    def identity_tol(self):
        return TOL_IDENTITY * np.maximum(1.0, np.abs(self.direct_far)) + self.tail_tol

    @property
    def local_form_gap(self):
        return None if self.local_form is None else np.abs(self.local_form - self.parts_sum)

    def abs_parts(self):
        return {name: np.abs(getattr(self, name)) for name in ("e_s1", "e_s2", "e_s31", "e_s32", "e_s4")}

    def check(self):
        bad = self.identity_gap > self.identity_tol
        if np.any(bad):
            i = int(np.argmax(self.identity_gap - self.identity_tol))
            raise ErrorLabError(f"decomposition identity violated at x={self.x_index[i]} "
                                f"(gap {self.identity_gap[i]:.3e}, p={self.p})")
        if self.local_form is not None:
            gap = self.local_form_gap
            tol = TOL_IDENTITY * np.maximum(1.0, np.abs(self.direct_far)) + self.tail_tol
            if np.any(gap > tol):
                i = int(np.argmax(gap - tol))
                raise ErrorLabError(f"local-error form disagrees at x={self.x_index[i]} "
                                    f"(gap {gap[i]:.3e}, p={self.p})")


@dataclass
class BoundReport:
    """Bounds at one truncation number; None where a threshold is not met."""

    p: int
    bound_es1: float = None
    bound_es2: float = None
    bound_es31: float = None
    bound_es32: float = None
    bound_es4: float = None
    bound_norm2: float = None
    bound_norm2_empirical: float = None
    bound_k_norm2: float = None
    thresholds: dict = field(default_factory=dict)

    @property
    def applicable(self):
        return {name: getattr(self, name) is not None
                for name in ("bound_es1", "bound_es2", "bound_es31", "bound_es32", "bound_es4",
                             "bound_norm2", "bound_k_norm2")}


# ---------------------------------------------------------------------------
# engine


def _fold(rows, N):
    """Combine orders +-n of rows over -N..N into column n = 0..N."""
    out = rows[..., N:].copy()
    out[..., 1:] += rows[..., N - 1 :: -1]
    return out


def _csum(idx, vals, n):
    """Complex bincount."""
    return (np.bincount(idx, weights=vals.real, minlength=n)
            + 1j * np.bincount(idx, weights=vals.imag, minlength=n))


def _signed_row(mant, logs, P):
    """Signed (mant, logs) for orders -P..P from a non-negative-order row."""
    sign = (-1.0) ** np.arange(P, 0, -1)
    return (np.concatenate([mant[P:0:-1] * sign, mant[: P + 1]]),
            np.concatenate([logs[P:0:-1], logs[: P + 1]]))


class ErrorLab:
    """Error analysis of FMM runs on a fixed discretization and tree.

    p-independent data (exact high-order moments and locals) is cached and
    shared by every ``decompose`` call; FMM states are cached per p.
    """

    def __init__(self, disc, cfg, op=OperatorKind.S, tree=None, n_max=N_TAIL):
        self.disc = disc
        self.cfg = cfg
        self.op = fmm._op(op)
        self.k = float(cfg.k)
        self.tree = fmm.build_tree(disc, cfg) if tree is None else tree
        self.q = fmm.strengths(disc, self.op)
        cells = self.tree.cells
        self.centers = np.array([c.center for c in cells])
        self.level = np.array([c.level for c in cells])
        self.is_leaf = np.array([c.is_leaf for c in cells])
        self.n_max = int(n_max)
        self._N = None
        self._states = {}
        self._em = {}
        self._exact_m = None
        self._exact_l = {}
        self._s1 = {}

    # -- bookkeeping

    def n_tail(self, p):
        return max(self.n_max, p + 200)

    def _ensure_order(self, p):
        N = self.n_tail(p)
        if self._N is None or N > self._N:
            self._N = N
            self._exact_m = None
            self._exact_l = {}
            self._s1 = {}
        return self._N

    def scale(self, L, P):
        return fmm.level_scale(self.k, self.cfg.d, L, P)

    def state(self, p):
        if p not in self._states:
            cfg = fmm.FmmConfig(self.k, p, self.cfg.leaf_cap, self.cfg.d)
            self._states[p] = fmm.run(self.disc, cfg, self.op, tree=self.tree)
        return self._states[p]

    def chain(self, leaf):
        """Cells of the leaf's ancestor chain at levels >= 2, coarsest first."""
        return [c for c in reversed(self.tree.ancestors(leaf)) if self.level[c] >= 2]

    def far_indices(self, cid):
        """Points in the interaction lists of the cell and its ancestors."""
        parts = [self.tree.points(e.source_cell) for a in self.tree.ancestors(cid)
                 for e in self.tree.lists[a]]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    # -- exact expansions

    def exact_moment_table(self):
        """Scaled exact moments of every cell at level >= 1, orders -N..N."""
        N = self._N
        if self._exact_m is not None:
            return self._exact_m
        tree, knots = self.tree, self.disc.knots
        out = np.zeros((len(tree.cells), 2 * N + 1), dtype=complex)
        for L in range(1, tree.L_max + 1):
            ids = tree.levels[L]
            idx = np.concatenate([tree.points(c) for c in ids])
            owner = np.concatenate([np.full(tree.cells[c].n_points, c) for c in ids])
            s = self.scale(L, N)
            for b in range(0, idx.size, _BLOCK):
                sl = slice(b, b + _BLOCK)
                rows = fmm.scaled_source_rows(knots[idx[sl]] - self.centers[owner[sl]], self.q[idx[sl]],
                                              self.disc.normals[idx[sl]], self.k, N, self.op, s, "J")
                starts = np.r_[0, np.nonzero(np.diff(owner[sl]))[0] + 1]
                out[owner[sl][starts]] += np.add.reduceat(rows, starts, axis=0)
        self._exact_m = out
        return out

    def local_order(self, cid, far_idx):
        """Order beyond which the exact local series of a cell is negligible.

        Terms of any series built from these locals (evaluation inside the
        cell or a shift to a child center) are bounded by
        |H_m(k r_min)| |J_m(k R)| times the total strength, with r_min the
        nearest far source and R the cell's half-diagonal.  Orders where this
        envelope has dropped below 1e-30 of its maximum are left out.
        """
        N = self._N
        L = int(self.level[cid])
        rmin = float(np.hypot(*(self.disc.knots[far_idx] - self.centers[cid]).T).min())
        R = math.sqrt(2.0) * self.cfg.d / 2.0 ** (L + 1)
        hm, hl = specfun.h_scaled_table(N, self.k * rmin)
        jm, jl = specfun.j_scaled_table(N, self.k * R)
        with np.errstate(divide="ignore"):
            env = np.log(np.abs(hm)) + hl + np.log(np.abs(jm)) + jl
        keep = np.nonzero(env >= env.max() - LOCAL_CUT)[0]
        return int(min(N, keep[-1] + 10))

    def exact_local_row(self, cid):
        """Scaled exact local expansion of a cell (level >= 2), orders -N..N.

        Orders past ``local_order`` are set to zero.
        """
        N = self._N
        if cid not in self._exact_l:
            L = int(self.level[cid])
            idx = self.far_indices(cid)
            acc = np.zeros(2 * N + 1, dtype=complex)
            if idx.size:
                n = self.local_order(cid, idx)
                s = self.scale(L, n)
                for b in range(0, idx.size, _BLOCK):
                    j = idx[b : b + _BLOCK]
                    acc[N - n : N + n + 1] += fmm.scaled_source_rows(
                        self.disc.knots[j] - self.centers[cid], self.q[j], self.disc.normals[j],
                        self.k, n, self.op, s, "H").sum(axis=0)
            self._exact_l[cid] = acc
        return self._exact_l[cid]

    # -- moment errors

    def moment_errors(self, p):
        """Scaled EM_n for all cells by the child-to-parent error recursion.

        Returns (em, tol) with em of shape (ncell, 2p+1); leaves have EM = 0.
        """
        N = self._ensure_order(p)
        if p in self._em:
            return self._em[p]
        Mx = self.exact_moment_table()
        tree, cells = self.tree, self.tree.cells
        em = np.zeros((len(cells), 2 * p + 1), dtype=complex)
        tol = np.zeros(len(cells))
        rows, cols = np.arange(-p, p + 1), np.arange(-N, N + 1)
        for L in range(tree.L_max - 1, 1, -1):
            hw = self.cfg.d / 2.0 ** (L + 2)
            for qd, ch, par in fmm._by_quadrant(cells, tree.levels[L + 1]):
                delta = np.array([(2 * (qd & 1) - 1) * hw, (2 * (qd >> 1) - 1) * hw])
                T = fmm.translation("m2m", delta, self.k, rows, cols, self.scale(L, p), self.scale(L + 1, N))
                v = Mx[ch].copy()
                v[:, N - p : N + p + 1] = em[ch]
                em[par] += v @ T.T
                edge = np.abs(v[:, [0, -1]]) @ np.abs(T[:, [0, -1]]).T
                tol[par] += 10.0 * edge.max(axis=1) + tol[ch]
        self._em[p] = (em, tol)
        return em, tol

    def moment_check(self, p, cells=None):
        """Dual-path EM comparison over non-leaf cells at levels >= 2."""
        N = self._ensure_order(p)
        em, tol = self.moment_errors(p)
        st = self.state(p)
        Mx = self.exact_moment_table()[:, N - p : N + p + 1]
        if cells is None:
            cells = [c.id for c in self.tree.cells if c.level >= 2 and not c.is_leaf]
        cells = np.asarray(cells, dtype=np.int64)
        diff = Mx[cells] - st.moments_scaled[cells]
        gap = float(np.max(np.abs(diff - em[cells]), initial=0.0))
        scale = max(1.0, float(np.max(np.abs(Mx[cells]), initial=0.0)))
        return DualCheck(diff, em[cells], gap, TOL_MOMENT * scale + float(np.max(tol[cells], initial=0.0)))

    # -- M2L helpers

    def _m2l_entries(self, targets):
        tg, sr = [], []
        for t in targets:
            for e in self.tree.lists[t]:
                tg.append(t)
                sr.append(e.source_cell)
        tg = np.array(tg, dtype=np.int64)
        sr = np.array(sr, dtype=np.int64)
        if tg.size == 0:
            return tg, sr, np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64)
        L = self.level[tg]
        hw = self.cfg.d / 2.0 ** (L + 1)
        off = np.rint((self.centers[tg] - self.centers[sr]) / hw[:, None]).astype(np.int64)
        key = np.column_stack([L, self.level[sr], off])
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        return tg, sr, uniq, inv.ravel()

    def _hankel_tables(self, uniq, P):
        hw = self.cfg.d / 2.0 ** (uniq[:, 0] + 1)
        z = self.k * np.hypot(uniq[:, 2], uniq[:, 3]) * hw
        m, l = specfun.h_scaled_table(P, z)
        return m, l, uniq[:, 2:4] * hw[:, None]

    def _m2l_apply(self, targets, vectors, rows, cols, row_level_scale, col_level_scale):
        """Sum over each target's list of T(rows, cols) @ vectors[source].

        vectors maps source cell ids to stacked vectors (ncell, k, len(cols)).
        """
        tg, sr, uniq, inv = self._m2l_entries(targets)
        nv = vectors.shape[1]
        out = {int(t): np.zeros((nv, len(rows)), dtype=complex) for t in targets}
        if tg.size == 0:
            return out
        P = int(max(np.abs(rows).max(), 0) + np.abs(cols).max())
        m, l, deltas = self._hankel_tables(uniq, P)
        for g in range(len(uniq)):
            sel = np.nonzero(inv == g)[0]
            L, Ls = int(uniq[g, 0]), int(uniq[g, 1])
            T = fmm.translation("m2l", deltas[g], self.k, rows, cols, row_level_scale(L), col_level_scale(Ls),
                                table=_signed_row(m[g], l[g], P))
            for i in sel:
                out[int(tg[i])] += vectors[sr[i]] @ T.T
        return out

    # -- local errors

    def local_errors(self, p, targets):
        """Scaled EL_m (|m| <= p) by the parent-to-child error recursion.

        targets must be closed under taking parents at levels >= 2.
        Returns {cell: (el, tol)}.
        """
        N = self._ensure_order(p)
        em, emtol = self.moment_errors(p)
        Mx = self.exact_moment_table()
        targets = sorted(set(int(t) for t in targets), key=lambda c: self.level[c])
        rows, cols = np.arange(-p, p + 1), np.arange(-N, N + 1)
        v = Mx.copy()
        v[:, N - p : N + p + 1] = em
        elm = self._m2l_apply(targets, v[:, None, :], rows, cols,
                              lambda L: self.scale(L, p), lambda Ls: self.scale(Ls, N))
        out = {}
        for t in targets:
            el = elm[t][0].copy()
            tol = 0.0
            L = int(self.level[t])
            if L >= 3:
                par = self.tree.cells[t].parent
                pel, ptol = out[par]
                w = self.exact_local_row(par).copy()
                w[N - p : N + p + 1] = pel
                T = fmm.translation("l2l", self.centers[t] - self.centers[par], self.k, rows, cols,
                                    self.scale(L, p), self.scale(L - 1, N))
                el += T @ w
                tol += ptol + 10.0 * float(np.max(np.abs(T[:, [0, -1]]) * np.abs(w[[0, -1]])))
            out[t] = (el, tol)
        return out

    def local_check(self, p, targets):
        """Dual-path EL comparison on a parent-closed set of cells at levels >= 2."""
        N = self._ensure_order(p)
        st = self.state(p)
        rec = self.local_errors(p, targets)
        ids = sorted(rec)
        diff = np.array([self.exact_local_row(c)[N - p : N + p + 1] - st.locals_scaled[c] for c in ids])
        by_rec = np.array([rec[c][0] for c in ids])
        gap = float(np.max(np.abs(diff - by_rec), initial=0.0))
        scale = max(1.0, max(float(np.max(np.abs(self.exact_local_row(c)))) for c in ids))
        tol = TOL_LOCAL * scale + max(rec[c][1] for c in ids)
        return DualCheck(diff, by_rec, gap, tol)

    # -- per-point parts

    def _far_pairs(self, xs):
        """(point, source cell) pairs over the chain lists of each point."""
        P, C = [], []
        for x in xs:
            leaf = int(self.tree.leaf_of_point[x])
            for a in self.tree.ancestors(leaf):
                for e in self.tree.lists[a]:
                    P.append(x)
                    C.append(e.source_cell)
        return np.array(P, dtype=np.int64), np.array(C, dtype=np.int64)

    def _s1_rows(self, xs):
        """Folded per-order contributions to e_s1 (p-independent), shape (len(xs), N+1)."""
        N = self._N
        need = [x for x in xs if x not in self._s1]
        if need:
            Mx = self.exact_moment_table()
            px, pc = self._far_pairs(need)
            acc = np.zeros((len(need), N + 1), dtype=complex)
            pos = {x: i for i, x in enumerate(need)}
            rowid = np.array([pos[x] for x in px], dtype=np.int64)
            for lev in np.unique(self.level[pc]) if pc.size else []:
                sel = np.nonzero(self.level[pc] == lev)[0]
                s = self.scale(int(lev), N)
                for b in range(0, sel.size, _BLOCK):
                    j = sel[b : b + _BLOCK]
                    H = fmm.scaled_multipole_rows(self.disc.knots[px[j]] - self.centers[pc[j]], self.k, N, s)
                    starts = np.r_[0, np.nonzero(np.diff(rowid[j]))[0] + 1]
                    acc[rowid[j][starts]] += np.add.reduceat(_fold(H * Mx[pc[j]], N), starts, axis=0)
            for x, i in pos.items():
                self._s1[x] = acc[i]
        return np.array([self._s1[x] for x in xs])

    def direct_far(self, xs):
        """Direct sums over each point's far (interaction-list) sources."""
        out = np.zeros(len(xs), dtype=complex)
        for i, x in enumerate(xs):
            leaf = int(self.tree.leaf_of_point[x])
            j = self.far_indices(leaf)
            if j.size:
                X = np.broadcast_to(self.disc.knots[x], (j.size, 2))
                out[i] = fmm.kernel_values(X, self.disc.knots[j], self.disc.normals[j], self.q[j],
                                           self.k, self.op).sum()
        return out

    def decompose(self, xs, p, with_local_form=False, check=True):
        """ErrorDecomposition at the points xs (indices) for truncation p."""
        xs = np.atleast_1d(np.asarray(xs, dtype=np.int64))
        if np.any(xs < 0) or np.any(xs >= self.disc.count):
            raise IndexError("source index out of range")
        N = self._ensure_order(p)
        st = self.state(p)
        em, _ = self.moment_errors(p)
        n = len(xs)
        tol = np.zeros(n)

        # multipole-expansion and M2M parts
        s1 = self._s1_rows(list(xs))
        e1 = s1[:, p + 1 :].sum(axis=1)
        tol += 10.0 * np.abs(s1[:, -1])
        e2 = np.zeros(n, dtype=complex)
        px, pc = self._far_pairs(xs)
        pos = {int(x): i for i, x in enumerate(xs)}
        if px.size:
            rowid = np.array([pos[int(x)] for x in px])
            for lev in np.unique(self.level[pc]):
                j = np.nonzero(self.level[pc] == lev)[0]
                H = fmm.scaled_multipole_rows(self.disc.knots[px[j]] - self.centers[pc[j]], self.k, p,
                                              self.scale(int(lev), p))
                e2 += _csum(rowid[j], np.einsum("ij,ij->i", H, em[pc[j]]), n)

        # M2L and L2L parts through tail locals of the chain cells
        leaves = [int(self.tree.leaf_of_point[x]) for x in xs]
        targets = sorted({c for lf in leaves for c in self.chain(lf)})
        rowsN, colsp = np.arange(-N, N + 1), np.arange(-p, p + 1)
        Mp = self.exact_moment_table()[:, N - p : N + p + 1]
        tails = self._m2l_apply(targets, np.stack([Mp, em], axis=1), rowsN, colsp,
                                lambda L: self.scale(L, N), lambda Ls: self.scale(Ls, p))
        gam = {}
        for t in targets:
            L = int(self.level[t])
            if L >= 3:
                par = self.tree.cells[t].parent
                T = fmm.translation("l2l", self.centers[t] - self.centers[par], self.k, rowsN, colsp,
                                    self.scale(L, N), self.scale(L - 1, p))
                gam[t] = T @ st.locals_scaled[par]
        e31 = np.zeros(n, dtype=complex)
        e32 = np.zeros(n, dtype=complex)
        e4 = np.zeros(n, dtype=complex)
        elf = np.zeros(n, dtype=complex) if with_local_form else None
        if with_local_form:
            el = self.local_errors(p, targets)
        tpos = {c: i for i, c in enumerate(targets)}
        zero = np.zeros(2 * N + 1, dtype=complex)
        T31 = np.array([tails[c][0] for c in targets]) if targets else np.zeros((0, 2 * N + 1))
        T32 = np.array([tails[c][1] for c in targets]) if targets else np.zeros((0, 2 * N + 1))
        G4 = np.array([gam.get(c, zero) for c in targets]) if targets else np.zeros((0, 2 * N + 1))
        if with_local_form:
            LX = np.array([self.exact_local_row(c) if self.is_leaf[c] else zero for c in targets])
            ELp = np.array([np.pad(el[c][0], N - p) if self.is_leaf[c] else zero for c in targets])
            LX[:, N - p : N + p + 1] = ELp[:, N - p : N + p + 1]
            for i, lf in enumerate(leaves):
                if lf in el:
                    tol[i] += el[lf][1]
        cx, cc = [], []
        for i, lf in enumerate(leaves):
            for c in self.chain(lf):
                cx.append(i)
                cc.append(c)
        cx, cc = np.array(cx, dtype=np.int64), np.array(cc, dtype=np.int64)
        outer = (np.abs(np.arange(-N, N + 1)) > p).astype(float)
        edge = np.zeros(2 * N + 1)
        edge[[0, -1]] = 10.0
        for lev in np.unique(self.level[cc]) if cc.size else []:
            sel = np.nonzero(self.level[cc] == lev)[0]
            s = self.scale(int(lev), N)
            for b in range(0, sel.size, _BLOCK):
                j = sel[b : b + _BLOCK]
                J = fmm.scaled_local_rows(self.disc.knots[xs[cx[j]]] - self.centers[cc[j]], self.k, N, s)
                tp = np.array([tpos[c] for c in cc[j]])
                a = J * T31[tp]
                bb = J * T32[tp]
                g = J * G4[tp]
                e31 += _csum(cx[j], a @ outer, n)
                e32 -= _csum(cx[j], bb @ outer, n)
                e4 += _csum(cx[j], g @ outer, n)
                tol += np.bincount(cx[j], weights=(np.abs(a) + np.abs(bb) + np.abs(g)) @ edge, minlength=n)
                if with_local_form:
                    isleaf = self.is_leaf[cc[j]]
                    elf += _csum(cx[j][isleaf], np.einsum("ij,ij->i", J[isleaf], LX[tp[isleaf]]), n)

        direct = self.direct_far(xs)
        fmm_far = st.far[xs]
        dec = ErrorDecomposition(xs, p, e1, e2, e31, e32, e4, direct - fmm_far, direct, fmm_far, tol, elf)
        if check:
            dec.check()
        return dec


# ---------------------------------------------------------------------------
# module-level operations


def exact_moments(cell, disc, cfg, op=OperatorKind.S, tree=None):
    """Direct multipole moments of all points under a cell, orders -p..p."""
    op = fmm._op(op)
    if tree is None:
        tree = fmm.build_tree(disc, cfg)
    c = tree.cells[cell]
    idx = tree.points(cell)
    q = fmm.strengths(disc, op)
    coeffs = fmm.moment_rows(disc.knots[idx] - c.center, q[idx], disc.normals[idx], cfg.k, cfg.p, op).sum(axis=0)
    return fmm.MomentVector(c.center.copy(), cfg.p, coeffs)


def exact_locals(cell, disc, cfg, op=OperatorKind.S, tree=None):
    """Direct local moments from the interaction lists of the cell's ancestor chain."""
    op = fmm._op(op)
    if tree is None:
        tree = fmm.build_tree(disc, cfg)
    c = tree.cells[cell]
    parts = [tree.points(e.source_cell) for a in tree.ancestors(cell) for e in tree.lists[a]]
    coeffs = np.zeros(2 * cfg.p + 1, dtype=complex)
    if parts:
        idx = np.concatenate(parts)
        q = fmm.strengths(disc, op)
        s = fmm.level_scale(cfg.k, cfg.d, c.level, cfg.p)
        rows = fmm.scaled_source_rows(disc.knots[idx] - c.center, q[idx], disc.normals[idx], cfg.k, cfg.p,
                                      op, s, "H")
        with np.errstate(over="ignore"):
            coeffs = rows.sum(axis=0) * np.exp(-s)
    return fmm.LocalVector(c.center.copy(), cfg.p, coeffs)


def moment_error(cell, lab, p):
    """EM_n of a cell computed both ways (level-scaled coefficients)."""
    chk = lab.moment_check(p, [cell])
    if not chk.ok:
        raise ErrorLabError(f"moment error paths disagree at cell {cell} (gap {chk.gap:.3e})")
    return chk


def local_error(cell, lab, p):
    """EL_m of a cell (level >= 2) computed both ways (level-scaled coefficients)."""
    chain = [c for c in lab.tree.ancestors(cell) if lab.level[c] >= 2]
    chk = lab.local_check(p, chain)
    if not chk.ok:
        raise ErrorLabError(f"local error paths disagree on the chain of cell {cell} (gap {chk.gap:.3e})")
    return chk


def decompose(x_index, disc, tree, cfg, op=OperatorKind.S, lab=None, with_local_form=True):
    """Five-part error decomposition at one source point (checks enforced)."""
    if lab is None:
        lab = ErrorLab(disc, cfg, op, tree=tree)
    return lab.decompose([x_index], cfg.p, with_local_form=with_local_form)


def empirical_radius(tree, disc):
    """Largest |y - O_I| / |x - O_I| over well-separated (target, source) point pairs."""
    knots = disc.knots if hasattr(disc, "knots") else np.asarray(disc, dtype=float)
    best = 0.0
    for c in tree.cells:
        if not tree.lists[c.id]:
            continue
        xs = knots[tree.points(c.id)]
        for e in tree.lists[c.id]:
            o = tree.cells[e.source_cell].center
            num = np.hypot(*(knots[tree.points(e.source_cell)] - o).T).max()
            den = np.hypot(*(xs - o).T).min()
            best = max(best, num / den)
    return float(best)


# ---------------------------------------------------------------------------
# bounds


def _top_index(counts):
    nz = [i for i in range(3) if counts[i]]
    return max(nz) if nz else -1


def _require(p, threshold, name):
    if p < threshold:
        raise InapplicableBoundError(f"{name} needs p >= {threshold:.4g}, got p = {p}")


def _kd(cfg):
    return cfg.k * cfg.d


def threshold_lemma9(level, cfg):
    return math.e * cfg.k * quadtree.level_distance(cfg.d, level) / 2.0


def threshold_thm4(counts, cfg, geo=GEOMETRY):
    I = _top_index(counts)
    return 0.0 if I < 0 else geo.eps[I] * _kd(cfg) / 8.0


def threshold_thm5(cfg):
    return 3.0 * _kd(cfg) / 8.0 + 1.0


def threshold_thm6(counts, cfg, geo=GEOMETRY):
    I = _top_index(counts)
    return 0.0 if I < 0 else geo.zeta[I] * _kd(cfg) / 8.0


def threshold_thm7(cfg):
    return _kd(cfg) / 2.0


threshold_thm8 = threshold_thm5


def threshold_norm2(counts, cfg, geo=GEOMETRY):
    return max(threshold_thm5(cfg), threshold_thm6(counts, cfg, geo))


def bound_lemma9(level, cfg, A, M_C):
    """Bound on max_n |EM_n| for a non-leaf cell at the given level holding M_C points."""
    p = cfg.p
    _require(p, threshold_lemma9(level, cfg), "bound_lemma9")
    if M_C == 0 or A == 0:
        return 0.0
    s = math.e * cfg.k * quadtree.level_distance(cfg.d, level) / (2 * p + 2)
    lg = (math.log(4.0 * math.sqrt(2.0) * A * M_C) - 0.5 * math.log(math.pi * (p + 1))
          + (p + 1) * math.log(s) - math.log1p(-s))
    return math.exp(lg)


def thm4_coefficients(cfg, A, geo=GEOMETRY):
    """Per-point weights w_i with the M2L-tail bound bound_thm4 equal to sum_i N_i w_i."""
    p = cfg.p
    out = []
    for i in range(3):
        r = geo.r[i]
        c = specfun.cap_c(p + 1, geo.eps[i] * _kd(cfg) / 8.0)
        out.append(4.0 * A / (math.pi * (p + 1)) * c * math.exp((p + 1) * math.log(r)) / (1.0 - r))
    return np.array(out)


def bound_thm4(counts, cfg, A, geo=GEOMETRY):
    """Bound on |e_s1| for a source with far counts (N_0, N_1, N_2)."""
    _require(cfg.p, threshold_thm4(counts, cfg, geo), "bound_thm4")
    return float(np.dot(np.asarray(counts[:3], dtype=float), thm4_coefficients(cfg, A, geo)))


def bound_thm5(cfg, A, N):
    """Bound on |e_s2|; N is half the number of points."""
    p = cfg.p
    _require(p, threshold_thm5(cfg), "bound_thm5")
    if N == 0 or A == 0:
        return 0.0
    kd, d2 = _kd(cfg), quadtree.level_distance(cfg.d, 2)
    s2 = math.e * cfg.k * d2 / (2 * p + 2)
    c = specfun.cap_c(p, 3.0 * math.sqrt(2.0) * cfg.k * d2)
    lg = (math.log(4.0 * A * N * math.e ** 2 * kd * c) - math.log(math.pi)
          - 0.5 * math.log(math.pi * (p * p + p)) - math.log1p(-s2) + p * math.log(math.sqrt(2.0) / 6.0))
    return math.exp(lg)


def thm6_coefficients(cfg, A, geo=GEOMETRY):
    """Per-point weights w_i with bound_thm6 equal to sum_i N_i w_i."""
    p = cfg.p
    out = []
    for i in range(3):
        g, z, h, lam = geo.gamma[i], geo.zeta[i], geo.eta[i], geo.lam[i]
        c = specfun.cap_c(p + 1, z * _kd(cfg) / 8.0)
        out.append(8.0 * A / (math.pi * (p + 1)) * c * g
                   * math.exp(h / (math.sqrt(2.0) * z) + p * math.log(lam)) / (1.0 - 2.0 * g))
    return np.array(out)


def bound_thm6(counts, cfg, A, geo=GEOMETRY):
    """Bound on |e_s31| for a source with far counts (N_0, N_1, N_2)."""
    _require(cfg.p, threshold_thm6(counts, cfg, geo), "bound_thm6")
    return float(np.dot(np.asarray(counts[:3], dtype=float), thm6_coefficients(cfg, A, geo)))


def bound_thm7(cfg, A, N, geo=GEOMETRY):
    """Bound on |e_s32|."""
    p = cfg.p
    _require(p, threshold_thm7(cfg), "bound_thm7")
    if N == 0 or A == 0:
        return 0.0
    kd, d2 = _kd(cfg), quadtree.level_distance(cfg.d, 2)
    s2 = math.e * cfg.k * d2 / (2 * p + 2)
    g0 = geo.gamma[0]
    c = specfun.cap_c(p + 1, 4.0 * math.sqrt(2.0) * cfg.k * d2)
    lg = (math.log(3.0 * math.sqrt(2.0) * math.e * kd * A * N * c) - math.log(math.pi)
          - 0.5 * math.log(math.pi * (p + 1) ** 5) - math.log1p(-2.0 * g0) - math.log1p(-s2)
          + p * math.log(3.0 * math.e / 32.0))
    return math.exp(lg)


def bound_thm8(cfg, A, N, c=C_THM8):
    """Bound on |e_s4| with the empirical constant c."""
    p = cfg.p
    _require(p, threshold_thm8(cfg), "bound_thm8")
    if N == 0 or A == 0:
        return 0.0
    kd, d2 = _kd(cfg), quadtree.level_distance(cfg.d, 2)
    tau = math.e * cfg.k * quadtree.level_distance(cfg.d, 3) / (p + 1)
    cc = specfun.cap_c(p, 3.0 * math.sqrt(2.0) * cfg.k * d2)
    lg = (math.log(c * math.e ** 2 * kd * N * A * cc) - math.log(math.pi)
          - 0.5 * math.log(math.pi * (p * p + p)) - math.log1p(-tau) + p * math.log(math.sqrt(2.0) / 6.0))
    return math.exp(lg)


def bound_norm2(counts_max, cfg, A, N, op=OperatorKind.S, L_max=None, radius=None, geo=GEOMETRY):
    """Asymptotic 2-norm bound over all sources (single or double layer).

    counts_max are the component-wise maxima of (N_0, N_1, N_2).  ``radius``
    replaces r_I by a measured separation ratio (I >= 1 only).
    """
    op = fmm._op(op)
    p = cfg.p
    _require(p, threshold_norm2(counts_max, cfg, geo), "2-norm bound")
    I = _top_index(counts_max)
    if I < 0 or A == 0:
        return 0.0
    NI = counts_max[I]
    if op is OperatorKind.S:
        if I == 0:
            g, z, h, lam = geo.gamma[0], geo.zeta[0], geo.eta[0], geo.lam[0]
            lg = (math.log(8.0 * A * NI * math.sqrt(2.0 * N) * g) + h / (math.sqrt(2.0) * z) + p * math.log(lam)
                  - math.log(math.pi * (1.0 - 2.0 * g) * (p + 1)))
            return math.exp(lg)
        r = geo.r[I] if radius is None else radius
        lg = (math.log(4.0 * A * NI * math.sqrt(2.0 * N)) + (p + 1) * math.log(r)
              - math.log(math.pi * (1.0 - r) * (p + 1)))
        return math.exp(lg)
    if L_max is None:
        raise ValueError("the double-layer bound needs L_max")
    if I == 0:
        g, z, h, lam = geo.gamma[0], geo.zeta[0], geo.eta[0], geo.lam[0]
        lg = ((L_max + 5) * math.log(2.0) + math.log(A * NI * math.sqrt(N) * g) + h / (math.sqrt(2.0) * z)
              + p * math.log(lam) - math.log(math.pi * (1.0 - 2.0 * g) * cfg.d))
        return math.exp(lg)
    r = geo.r[I] if radius is None else radius
    lg = ((L_max + 4) * math.log(2.0) + math.log(A * NI * math.sqrt(2.0 * N)) + p * math.log(r)
          - math.log(math.pi * geo.eps[I] * (1.0 - r) * cfg.d))
    return math.exp(lg)


def _maybe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except InapplicableBoundError:
        return None


def bound_report(x_index, tree, disc, cfg, op=OperatorKind.S, c=C_THM8, radius=None):
    """All bounds at one source point (per-point bounds) plus the norm bounds."""
    A = boundary.sup_norm_a(disc)
    N = disc.N
    counts = quadtree.far_counts(tree, tree.lists, x_index)[:3]
    cmax = quadtree.max_far_counts(tree)
    rep = BoundReport(cfg.p)
    rep.thresholds = {
        "bound_es1": threshold_thm4(counts, cfg), "bound_es2": threshold_thm5(cfg),
        "bound_es31": threshold_thm6(counts, cfg), "bound_es32": threshold_thm7(cfg),
        "bound_es4": threshold_thm8(cfg), "bound_norm2": threshold_norm2(cmax, cfg),
    }
    if fmm._op(op) is OperatorKind.S:
        rep.bound_es1 = _maybe(bound_thm4, counts, cfg, A)
        rep.bound_es2 = _maybe(bound_thm5, cfg, A, N)
        rep.bound_es31 = _maybe(bound_thm6, counts, cfg, A)
        rep.bound_es32 = _maybe(bound_thm7, cfg, A, N)
        rep.bound_es4 = _maybe(bound_thm8, cfg, A, N, c)
        rep.bound_norm2 = _maybe(bound_norm2, cmax, cfg, A, N)
        if radius is not None and _top_index(cmax) >= 1:
            rep.bound_norm2_empirical = _maybe(bound_norm2, cmax, cfg, A, N, radius=radius)
    else:
        rep.bound_k_norm2 = _maybe(bound_norm2, cmax, cfg, A, N, OperatorKind.K, tree.L_max)
    return rep
