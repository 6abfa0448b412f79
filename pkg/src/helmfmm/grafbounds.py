"""Truncation tails of Graf's addition theorem and closed-form bounds on them.

For a cylinder function B in {J, Y, H} the tail

    B^B_{m,p}(x, y) = sum_{n=p+1}^inf |J_n(y)| (|B_{n+m}(x)| + |B_{n-m}(x)|)

controls the remainder of the truncated addition theorem.  ``tail_exact``
sums it by brute force (in log space, so high orders neither overflow nor
underflow prematurely) and the ``bound_*`` functions give the closed-form
estimates.  Every bound checks its applicability condition and raises
``InapplicableBoundError`` rather than returning an extrapolated number.
"""

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from . import specfun as sf

N_MAX_DEFAULT = 1000
KERNELS = ("J", "Y", "H")


class InapplicableBoundError(ValueError):
    """A bound was requested outside the region where it is proven."""

    def __init__(self, kind, reason):
        super().__init__(f"{kind}: {reason}")
        self.kind = kind
        self.reason = reason


class BoundKind(Enum):
    JJ_L6 = "JJ_L6"
    JY_L7 = "JY_L7"
    JY_L8 = "JY_L8"
    BH_FROM_L7 = "BH_FROM_L7"
    BH_FROM_L8 = "BH_FROM_L8"
    BJ_FROM_L6 = "BJ_FROM_L6"


@dataclass(frozen=True)
class TailQuery:
    """Arguments of a tail: shift m, truncation p, outer x = k|x|, inner y = k|y|."""

    m: int
    p: int
    x: float
    y: float

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 0:
            raise ValueError("p must be a non-negative integer")
        if int(self.m) != self.m:
            raise ValueError("m must be an integer")
        if not (math.isfinite(self.x) and math.isfinite(self.y)) or self.y < 0 or self.x < 0:
            raise ValueError("x and y must be finite and non-negative")

    @property
    def r(self):
        return self.y / self.x if self.x > 0 else math.inf


@lru_cache(maxsize=256)
def _log_abs_table(kernel, nmax, z):
    """ln|B_n(z)| for n = 0..nmax (read-only, cached)."""
    with np.errstate(divide="ignore"):
        if kernel == "J":
            m, l = sf.j_scaled_table(nmax, z)
            out = np.log(np.abs(m)) + l
        elif kernel == "Y":
            m, l = sf.y_scaled_table(nmax, z)
            out = np.log(np.abs(m)) + l
        elif kernel == "H":
            m, l = sf.h_scaled_table(nmax, z)
            out = np.log(np.abs(m)) + l
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
    out.setflags(write=False)
    return out


def _check_kernel_args(kernel, x):
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}")
    if kernel in ("Y", "H") and x <= 0:
        raise ValueError("Y and H kernels need x > 0")


def tail_terms(kernel, q, n_max=N_MAX_DEFAULT, both=True):
    """Individual tail terms for n = p+1..n_max.

    With ``both`` the term is |J_n(y)|(|B_{n+m}(x)| + |B_{n-m}(x)|), otherwise
    only the |J_n(y)||B_{n+m}(x)| branch.
    """
    _check_kernel_args(kernel, q.x)
    if n_max < q.p + 1:
        return np.zeros(0)
    am = abs(q.m)
    lj = _log_abs_table("J", int(n_max), float(q.y))
    lb = _log_abs_table(kernel, int(n_max) + am, float(q.x))
    n = np.arange(q.p + 1, n_max + 1)
    with np.errstate(under="ignore"):
        # |B_{n+m}| + |B_{n-m}| is symmetric in the sign of m
        up = np.exp(lj[n] + lb[n + am])
        if not both:
            if q.m < 0:
                up = np.exp(lj[n] + lb[np.abs(n - am)])
            return up
        return up + np.exp(lj[n] + lb[np.abs(n - am)])


def tail_exact(kernel, q, n_max=N_MAX_DEFAULT):
    """Brute-force B^B_{m,p}(x, y) summed from n = p+1 to n_max."""
    if n_max < q.p + 1:
        return 0.0
    return float(np.sum(tail_terms(kernel, q, n_max)))


def tail_denominator(m, x, y, n_max=N_MAX_DEFAULT):
    """s_m(x, y): sum of |J_n(y)||Y_{n+m}(x)| over n = 0..n_max."""
    if not x > y >= 0:
        raise ValueError("relative_tail needs x > y >= 0")
    den = float(np.sum(tail_terms("Y", TailQuery(m, 0, x, y), n_max, both=False)))
    den += math.exp(_log_abs_table("J", int(n_max), float(y))[0] + _log_abs_table("Y", int(n_max) + abs(m), float(x))[abs(m)])
    if not den > 0 or not math.isfinite(den):
        raise ValueError("degenerate denominator in relative_tail")
    return den


def relative_tail(m, p, x, y, n_max=N_MAX_DEFAULT):
    """Relative truncation error eps_{m,p}(x, y) of the Y-tail.

    Numerator sums |J_n(y)||Y_{n+m}(x)| over n = p+1..n_max, the denominator
    over n = 0..n_max.
    """
    den = tail_denominator(m, x, y, n_max)
    if p >= n_max:
        return 0.0
    num = float(np.sum(tail_terms("Y", TailQuery(m, p, x, y), n_max, both=False)))
    return num / den


def _finish(log_value):
    if log_value == -math.inf:
        return 0.0
    if log_value > 709.0:
        raise OverflowError("bound exceeds double range")
    return math.exp(log_value)


def log_bound_jj_l6(q):
    """ln of the J-J tail bound t^{p+1}/(sqrt(2 pi (p+1)) (1-t)), t = e y/(2p+2)."""
    if q.p < math.e * q.y / 2:
        raise InapplicableBoundError("JJ_L6", f"needs p >= e*y/2 = {math.e * q.y / 2:.4g}")
    if q.y == 0:
        return -math.inf
    t = math.e * q.y / (2 * q.p + 2)
    return (q.p + 1) * math.log(t) - 0.5 * math.log(2 * math.pi * (q.p + 1)) - math.log1p(-t)


def bound_jj_l6(q):
    """Upper bound on sum_{n>p} |J_n(y)||J_{n+-m}(x)| (one branch)."""
    return _finish(log_bound_jj_l6(q))


def _log_c(n, x):
    return math.log(sf.cap_c(n, x))


def _log_alpha(m, p, r):
    if m == 0:
        return -math.log(p + 1)
    b = 2 * p + 2 * m + 1
    c = (2 * m - 1) * r / (1 - r)
    if c == 0:
        return math.log(2) + (m - 1) * math.log(b)
    # (b^m - c^m)/(b - c) = sum_i b^i c^{m-1-i}, exact also when b == c
    i = np.arange(m)
    terms = i * math.log(b) + (m - 1 - i) * math.log(c)
    top = terms.max()
    return math.log(2) + top + math.log(np.exp(terms - top).sum())


def log_bound_jy_l7(q):
    m = abs(q.m)
    if not q.x > q.y:
        raise InapplicableBoundError("JY_L7", "needs x > y (r < 1)")
    if q.p + m < q.x:
        raise InapplicableBoundError("JY_L7", f"needs p + m >= x = {q.x:.4g}")
    if q.y == 0:
        return -math.inf
    r = q.y / q.x
    return (_log_alpha(m, q.p, r) + _log_c(q.p + m + 1, q.x) + (q.p + 1) * math.log(r)
            - math.log(math.pi) - m * math.log(q.x) - math.log1p(-r))


def bound_jy_l7(q):
    """Bound on sum_{n>p} |J_n(y)||Y_{n+m}(x)| valid for r = y/x < 1, p+m >= x."""
    return _finish(log_bound_jy_l7(q))


def log_bound_jy_l8(q):
    m = abs(q.m)
    if not q.x > 2 * q.y:
        raise InapplicableBoundError("JY_L8", "needs x > 2y (r < 1/2)")
    if q.p < max(m - 2, q.x):
        raise InapplicableBoundError("JY_L8", f"needs p >= max(m-2, x) = {max(m - 2, q.x):.4g}")
    if q.y == 0:
        return -math.inf
    r = q.y / q.x
    return (math.log(2) + (m - 1) * math.log(2 * q.p + m + 2) + _log_c(q.p + m + 1, q.x)
            + (q.p + 1) * math.log(r) - math.log(math.pi) - m * math.log(q.x) - math.log1p(-2 * r))


def bound_jy_l8(q):
    """Sharper bound for r < 1/2 and p >= max(m-2, x)."""
    return _finish(log_bound_jy_l8(q))


def bh_route(q):
    """Which inner bound ``bound_bh`` uses for this query."""
    if not q.x > q.y or q.p + abs(q.m) < q.x:
        raise InapplicableBoundError("BH", "needs x > y and p + m >= x")
    if q.y < 0.5 * q.x and q.p >= max(abs(q.m) - 2, q.x):
        return BoundKind.BH_FROM_L8
    return BoundKind.BH_FROM_L7


def bound_bh(q):
    """Bound on B^H_{m,p}(x, y): four times the bound_jy_l8 or bound_jy_l7 estimate."""
    route = bh_route(q)
    inner = log_bound_jy_l8(q) if route is BoundKind.BH_FROM_L8 else log_bound_jy_l7(q)
    return _finish(math.log(4) + inner) if inner > -math.inf else 0.0


def bound_bj(q):
    """Bound on B^J_{m,p}(x, y): both +-m branches of the J-J estimate."""
    lv = log_bound_jj_l6(q)
    return _finish(math.log(2) + lv) if lv > -math.inf else 0.0


# Graf's addition theorem and its remainder


def _as_complex(v):
    if np.iscomplexobj(v) or np.ndim(v) == 0:
        return complex(v)
    v = np.asarray(v, dtype=float)
    return complex(v[0], v[1])


def _scaled_b(kernel, nmax, z):
    if kernel == "J":
        return sf.j_scaled_table(nmax, z)
    if kernel == "Y":
        return sf.y_scaled_table(nmax, z)
    return sf.h_scaled_table(nmax, z)


def _graf_terms(kernel, m, orders, xv, yv, sign):
    """Terms B_{m+n}(|x|) e^{s i (m+n) th_x} J_n(|y|) e^{-s i n th_y} for given n."""
    xv, yv = _as_complex(xv), _as_complex(yv)
    ax, ay = abs(xv), abs(yv)
    tx, ty = np.angle(xv), np.angle(yv)
    orders = np.asarray(orders)
    q = m + orders
    nb = int(np.abs(q).max())
    nj = int(np.abs(orders).max())
    bm, bl = _scaled_b(kernel, nb, ax)
    jm, jl = sf.j_scaled_table(nj, ay)
    aq, an = np.abs(q), np.abs(orders)
    refl = np.where((q < 0) & (aq % 2 == 1), -1.0, 1.0) * np.where((orders < 0) & (an % 2 == 1), -1.0, 1.0)
    with np.errstate(under="ignore", over="ignore", invalid="ignore"):
        mag = np.exp(bl[aq] + jl[an])
        t = refl * bm[aq] * jm[an] * mag * np.exp(1j * sign * (q * tx - orders * ty))
    return np.where(mag == 0, 0.0, t)


def graf_partial(kernel, m, p, xv, yv, sign=1):
    """Truncated addition-theorem sum over n = -p..p."""
    return complex(np.sum(_graf_terms(kernel, m, np.arange(-p, p + 1), xv, yv, sign)))


def graf_remainder(kernel, m, p, xv, yv, sign=1, n_max=None):
    """Remainder R^B_{m,p}(x, y): the addition-theorem terms with |n| > p.

    ``sign`` = +1 gives e^{i(m+n)th_x} e^{-i n th_y}; -1 the conjugate phases.
    Summed to n_max = max(1000, p + 200) by default.
    """
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}")
    if n_max is None:
        n_max = max(N_MAX_DEFAULT, p + 200)
    if n_max <= p:
        return 0j
    n = np.arange(p + 1, n_max + 1)
    orders = np.concatenate([n, -n])
    return complex(np.sum(_graf_terms(kernel, m, orders, xv, yv, sign)))


def graf_target(kernel, m, xv, yv, sign=1):
    """B_m(|x - y|) e^{s i m th_{x-y}}, the value the full series reproduces."""
    d = _as_complex(xv) - _as_complex(yv)
    if kernel == "J":
        b = sf.bessel_j(m, abs(d))
    elif kernel == "Y":
        b = sf.bessel_y(m, abs(d))
    else:
        b = sf.hankel1(m, abs(d))
    return complex(b * np.exp(1j * sign * m * np.angle(d)))
