"""Integer-order Bessel, Neumann and Hankel functions of real argument.

J_n is computed by Miller's backward recurrence, carried out on the scaled
sequence  j_n = J_n(z) * n! * (2/z)^n,  which stays O(1) for n > z and so never
overflows.  Y_0 and Y_1 follow from Neumann series in the normalized J values,
and higher orders come from the stable upward recurrence written for

    C_n(z) = -Y_n(z) * (z/2)^n * pi / Gamma(n),

namely  C_{n+1} = C_n - z^2/(4n(n-1)) * C_{n-1}.

Both families are therefore available as (mantissa, log-scale) pairs, which is
what the tail sums of high-order products need.  The ``*_table`` functions
are vectorized over z and return all orders 0..nmax on the last axis.
"""

import math

import numpy as np

ORDER_CAP = 2048
Z_MAX = 1000.0
EULER_GAMMA = 0.57721566490153286061

# elements per Miller block (rows * recurrence length)
_BLOCK_ELEMS = 1 << 21

_LGAMMA_INT = np.array([math.inf] + [math.lgamma(n) for n in range(1, 2 * ORDER_CAP + 8)])


class SpecialFunctionError(ValueError):
    """Raised for arguments outside the supported domain."""


def _check_order(n, cap=ORDER_CAP):
    if isinstance(n, (bool, np.bool_)) or int(n) != n:
        raise SpecialFunctionError(f"order must be an integer, got {n!r}")
    n = int(n)
    if abs(n) > cap:
        raise SpecialFunctionError(f"|order| {abs(n)} exceeds order_cap {cap}")
    return n


def _check_z(z, allow_zero):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise SpecialFunctionError("argument must be finite")
    if allow_zero:
        if np.any(z < 0):
            raise SpecialFunctionError("argument must be non-negative")
    elif np.any(z <= 0):
        raise SpecialFunctionError("argument must be positive (Y_n and H_n are singular at 0)")
    if np.any(z > Z_MAX):
        raise SpecialFunctionError(f"argument exceeds supported range {Z_MAX}")
    return z


def lgamma_int(n):
    """ln Gamma(n) for integer array n >= 1 (table lookup)."""
    return _LGAMMA_INT[np.asarray(n)]


def ln_gamma(x):
    """Natural log of Gamma(x) for x > 0."""
    x = float(x)
    if not math.isfinite(x) or x <= 0:
        raise SpecialFunctionError("ln_gamma requires a finite x > 0")
    return math.lgamma(x)


def _start_order(nmax, zmax):
    base = max(nmax, math.ceil(zmax))
    return base + 30 + math.ceil(10.0 * math.sqrt(max(base, 1)))


def _miller_block(z, nmax, want_y):
    """Normalized scaled J mantissas for a 1-D block of positive z.

    Returns (jm, logw, y0, y1) with J_n = jm[:, n] * exp(logw[:, n]).
    """
    nstart = _start_order(nmax, float(z.max()))
    m = z.size
    # order-major layout keeps each recurrence step contiguous
    jt = np.empty((nstart + 2, m))
    jt[nstart + 1] = 0.0
    jt[nstart] = 1.0
    q = 0.25 * z * z
    inv = 1.0 / (np.arange(1, nstart + 1) * np.arange(2, nstart + 2.0))
    for n in range(nstart, 0, -1):
        jt[n - 1] = jt[n] - (q * inv[n - 1]) * jt[n + 1]
    jm = jt[: nmax + 1].copy()
    # J_n = jt_n * (z/2)^n / n!, with the weight built by upward products
    J = jt[: nstart + 1]
    h = 0.5 * z
    w = np.ones(m)
    for n in range(1, nstart + 1):
        w = w * (h / n)
        J[n] *= w
    norm = J[0] + 2.0 * J[2::2].sum(axis=0)
    orders = np.arange(nmax + 1)
    logw = orders[:, None] * np.log(h)[None, :] - _LGAMMA_INT[orders + 1][:, None]
    jm = (jm / norm).T
    y0 = y1 = None
    if want_y:
        J /= norm
        lz = np.log(0.5 * z) + EULER_GAMMA
        k = np.arange(1, J[2::2].shape[0] + 1)
        s0 = ((-1.0) ** k / k) @ J[2::2]
        y0 = (2.0 / np.pi) * lz * J[0] - (4.0 / np.pi) * s0
        ko = np.arange(1, J[3::2].shape[0] + 1)
        s1 = ((-1.0) ** ko * (2 * ko + 1) / (ko * (ko + 1.0))) @ J[3::2]
        y1 = -2.0 * J[0] / (np.pi * z) + (2.0 / np.pi) * (lz - 1.0) * J[1] - (2.0 / np.pi) * s1
    return jm, logw[: nmax + 1].T, y0, y1


def _blocks(z, nmax):
    """Index blocks over z sorted ascending, so each block gets its own start order."""
    order = np.argsort(z, kind="stable")
    rows = int(min(4096, max(64, _BLOCK_ELEMS // (_start_order(nmax, float(z.max())) + 2))))
    for i in range(0, z.size, rows):
        yield order[i : i + rows]


def j_scaled_table(nmax, z):
    """Scaled J table: returns (mant, logscale) with J_n(z) = mant * exp(logscale).

    logscale[..., n] = n*ln(z/2) - ln(n!), and mant -> 1 as n -> infinity.
    z = 0 is allowed.
    """
    nmax = _check_order(nmax)
    z = _check_z(z, allow_zero=True)
    shape = z.shape
    zf = z.ravel()
    mant = np.ones((zf.size, nmax + 1))
    logs = np.zeros((zf.size, nmax + 1))
    pos = zf > 0
    if np.any(~pos):
        logs[~pos, 1:] = -np.inf
    if np.any(pos):
        zp = zf[pos]
        mp = np.empty((zp.size, nmax + 1))
        lp = np.empty((zp.size, nmax + 1))
        for sl in _blocks(zp, nmax):
            mp[sl], lp[sl], _, _ = _miller_block(zp[sl], nmax, False)
        mant[pos] = mp
        logs[pos] = lp
    return mant.reshape(shape + (nmax + 1,)), logs.reshape(shape + (nmax + 1,))


def _jy_scaled(nmax, zf):
    """Scaled J and Y tables for a flat array of positive z."""
    jm = np.empty((zf.size, nmax + 1))
    jl = np.empty((zf.size, nmax + 1))
    y0 = np.empty(zf.size)
    y1 = np.empty(zf.size)
    for sl in _blocks(zf, max(nmax, 1)):
        a, b, c, d = _miller_block(zf[sl], max(nmax, 1), True)
        jm[sl], jl[sl] = a[:, : nmax + 1], b[:, : nmax + 1]
        y0[sl], y1[sl] = c, d
    # C_n recurrence, n >= 1
    ym = np.empty((zf.size, nmax + 1))
    ym[:, 0] = y0
    if nmax >= 1:
        c = np.empty((zf.size, nmax + 1))
        c[:, 0] = np.nan
        c[:, 1] = -0.5 * np.pi * zf * y1
        if nmax >= 2:
            y2 = (2.0 / zf) * y1 - y0
            c[:, 2] = -0.25 * np.pi * zf * zf * y2
            q = 0.25 * zf * zf
            for n in range(2, nmax):
                c[:, n + 1] = c[:, n] - (q / (n * (n - 1.0))) * c[:, n - 1]
        ym[:, 1:] = -c[:, 1:] / np.pi
    orders = np.arange(nmax + 1)
    yl = orders[None, :] * np.log(2.0 / zf)[:, None] + np.where(orders > 0, _LGAMMA_INT[np.maximum(orders, 1)], 0.0)[None, :]
    return jm, jl, ym, yl


def y_scaled_table(nmax, z):
    """Scaled Y table: (mant, logscale) with Y_n(z) = mant * exp(logscale).

    For n >= 1, logscale = n*ln(2/z) + ln Gamma(n) and mant = -C_n(z)/pi;
    for n = 0 the logscale is 0 and mant = Y_0(z).
    """
    nmax = _check_order(nmax)
    z = _check_z(z, allow_zero=False)
    shape = z.shape
    _, _, ym, yl = _jy_scaled(nmax, z.ravel())
    return ym.reshape(shape + (nmax + 1,)), yl.reshape(shape + (nmax + 1,))


def h_scaled_table(nmax, z):
    """Scaled Hankel table: (mant, logscale) with H_n(z) = mant * exp(logscale).

    The logscale is the Y logscale, so |mant| stays bounded for large n.
    """
    nmax = _check_order(nmax)
    z = _check_z(z, allow_zero=False)
    shape = z.shape
    jm, jl, ym, yl = _jy_scaled(nmax, z.ravel())
    mant = jm * np.exp(jl - yl) + 1j * ym
    return mant.reshape(shape + (nmax + 1,)), yl.reshape(shape + (nmax + 1,))


def j_table(nmax, z):
    """J_0..J_nmax at every z (last axis is the order)."""
    m, l = j_scaled_table(nmax, z)
    return m * np.exp(l)


def y_table(nmax, z):
    """Y_0..Y_nmax at every z; raises if a value overflows double precision."""
    m, l = y_scaled_table(nmax, z)
    with np.errstate(over="ignore"):
        out = m * np.exp(l)
    if not np.all(np.isfinite(out)):
        raise SpecialFunctionError("Y_n overflows double precision; reduce the order or increase z")
    return out


def h_table(nmax, z):
    """H^(1)_0..H^(1)_nmax at every z; raises on overflow."""
    nmax = _check_order(nmax)
    z = _check_z(z, allow_zero=False)
    shape = z.shape
    jm, jl, ym, yl = _jy_scaled(nmax, z.ravel())
    with np.errstate(over="ignore", invalid="ignore"):
        out = jm * np.exp(jl) + 1j * (ym * np.exp(yl))
    if not np.all(np.isfinite(out)):
        raise SpecialFunctionError("H_n overflows double precision; reduce the order or increase z")
    return out.reshape(shape + (nmax + 1,))


def c_table(nmax, z):
    """C_1..C_nmax at every z; index 0 of the last axis is NaN (C_0 undefined)."""
    m, _ = y_scaled_table(nmax, z)
    out = -np.pi * m
    out[..., 0] = np.nan
    return out


def _reflect(n, value):
    return -value if (n < 0 and n % 2) else value


def _scalar_or_array(z, value):
    return float(value) if np.ndim(z) == 0 else value


def bessel_j(n, z):
    """Bessel function of the first kind J_n(z), z >= 0."""
    n = _check_order(n)
    val = j_table(abs(n), z)[..., abs(n)]
    return _scalar_or_array(z, _reflect(n, val))


def bessel_y(n, z):
    """Bessel function of the second kind Y_n(z), z > 0."""
    n = _check_order(n)
    val = y_table(abs(n), z)[..., abs(n)]
    return _scalar_or_array(z, _reflect(n, val))


def hankel1(n, z):
    """Hankel function of the first kind H^(1)_n(z) = J_n(z) + i Y_n(z), z > 0."""
    n = _check_order(n)
    val = h_table(abs(n), z)[..., abs(n)]
    val = _reflect(n, val)
    return complex(val) if np.ndim(z) == 0 else val


def cap_c(n, z):
    """C_n(z) = -Y_n(z) (z/2)^n pi / Gamma(n) for n >= 1, z > 0."""
    n = _check_order(n)
    if n < 1:
        raise SpecialFunctionError("C_n is defined for n >= 1 only")
    val = c_table(n, z)[..., n]
    return _scalar_or_array(z, val)


def log_abs_j(n, z):
    """ln|J_n(z)| for n >= 0 (finite even when J_n underflows)."""
    n = _check_order(n)
    m, l = j_scaled_table(abs(n), z)
    with np.errstate(divide="ignore"):
        out = np.log(np.abs(m[..., abs(n)])) + l[..., abs(n)]
    return _scalar_or_array(z, out)


def log_abs_y(n, z):
    """ln|Y_n(z)| (finite even when Y_n overflows)."""
    n = _check_order(n)
    m, l = y_scaled_table(abs(n), z)
    with np.errstate(divide="ignore"):
        out = np.log(np.abs(m[..., abs(n)])) + l[..., abs(n)]
    return _scalar_or_array(z, out)
