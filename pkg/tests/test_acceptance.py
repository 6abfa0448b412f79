"""Acceptance suite on the kite problem: 2N = 1000, k = 5, d = 4, leaf_cap = 6."""

import math
import time

import numpy as np
import pytest

from helmfmm import boundary, errorlab, fmm, grafbounds, quadtree, specfun
from helmfmm.errorlab import GEOMETRY, ErrorLab
from helmfmm.fmm import FmmConfig
from helmfmm.grafbounds import InapplicableBoundError, TailQuery

REPS = (0, 31, 93)
PARTS = ("e_s1", "e_s2", "e_s31", "e_s32", "e_s4")
BOUNDS = ("bound_es1", "bound_es2", "bound_es31", "bound_es32", "bound_es4")


@pytest.fixture(scope="module")
def kite():
    return boundary.discretize(boundary.kite(), 500)


@pytest.fixture(scope="module")
def lab(kite):
    return ErrorLab(kite, FmmConfig(5.0, 10))


@pytest.fixture(scope="module")
def sweep(lab, kite):
    """Measured parts and bound reports at the representative points, p = 5..30."""
    radius = errorlab.empirical_radius(lab.tree, kite)
    out = {}
    for p in range(5, 31):
        dec = lab.decompose(list(REPS), p)
        reps = [errorlab.bound_report(x, lab.tree, kite, FmmConfig(5.0, p), radius=radius) for x in REPS]
        out[p] = (dec.abs_parts(), reps)
    return out


def test_c01_oracle_equivalence(kite, record):
    cfg = FmmConfig(5.0, 40)
    t0 = time.perf_counter()
    got = fmm.apply(kite, cfg)
    ref = fmm.direct_apply(kite, cfg)
    elapsed = time.perf_counter() - t0
    rel = float(np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    ok = rel <= 1e-9 and elapsed <= 60
    record(1, "oracle equivalence at p=40", ok, f"rel_inf={rel:.3e} (<= 1e-9), {elapsed:.1f} s (<= 60 s)")
    assert ok


def test_c02_constants(kite, record):
    A = boundary.sup_norm_a(kite)
    lam = np.array(GEOMETRY.lam)
    d2 = quadtree.level_distance(4.0, 2)
    checks = {
        "A": abs(A - 2.2718) <= 1e-3,
        "lambda": bool(np.all(np.abs(lam - [0.6009, 0.6374, 0.6640]) <= 5e-4)),
        "r2": abs(GEOMETRY.r[2] - 0.9428) <= 1e-4,
        "d2": d2 == math.sqrt(2) * 4.0 / 16,
    }
    ok = all(checks.values())
    record(2, "constants", ok, f"A={A:.5f} lambda={np.round(lam, 5).tolist()} r2={GEOMETRY.r[2]:.5f} "
                                f"d2={d2!r} failed={[k for k, v in checks.items() if not v]}")
    assert ok


def test_c03_far_counts(lab, kite, record):
    got = [quadtree.far_counts(lab.tree, lab.tree.lists, x)[:3] for x in REPS]
    want = [(980, 0, 0), (971, 8, 0), (979, 0, 4)]
    ok = got == want
    record(3, "far-count triples at sources 0, 31, 93", ok, f"{got}")
    assert ok


def test_c04_empirical_radius(lab, kite, record):
    rho = errorlab.empirical_radius(lab.tree, kite)
    ok = abs(rho - 0.89) <= 0.02
    record(4, "empirical radius", ok, f"{rho:.4f} (0.89 +- 0.02)")
    assert ok


def test_c05_bound_domination(sweep, record):
    checked, bad = 0, []
    for p, (parts, reps) in sweep.items():
        for i, x in enumerate(REPS):
            for part, bname in zip(PARTS, BOUNDS):
                b = getattr(reps[i], bname)
                if b is None:
                    continue
                checked += 1
                if not parts[part][i] <= b:
                    bad.append((x, p, part))
    ok = checked > 0 and not bad
    record(5, "bound domination up to p=30", ok, f"{checked} (point, p, part) cases, violations={bad[:5]}")
    assert ok


def fitted_ratio(ps, vals):
    slope = np.polyfit(np.asarray(ps, float), np.log(np.asarray(vals)), 1)[0]
    return float(np.exp(slope))


def test_c06_rates(sweep, lab, record):
    g = GEOMETRY
    rows, bad = [], []
    for i, x in enumerate(REPS):
        I = quadtree.far_counts(lab.tree, lab.tree.lists, x)[3]
        rates = {"e_s1": g.r[I], "e_s2": math.sqrt(2) / 6, "e_s31": g.lam[I],
                 "e_s32": 3 * math.e / 32, "e_s4": math.sqrt(2) / 6}
        for part, bname in zip(PARTS, BOUNDS):
            ps = [p for p, (_, reps) in sweep.items() if getattr(reps[i], bname) is not None]
            vals = [sweep[p][0][part][i] for p in ps]
            if len(ps) < 3 or min(vals) <= 0:
                bad.append((x, part, "too few points"))
                continue
            ratio = fitted_ratio(ps, vals)
            rows.append(f"x{x}:{part}={ratio:.3f}/{rates[part]:.4f}")
            if ratio > 1.05 * rates[part]:
                bad.append((x, part, ratio))
    ok = not bad
    record(6, "fitted rates <= 1.05 x stated", ok, " ".join(rows) + (f" violations={bad}" if bad else ""))
    assert ok


def test_c07_tail_sharpness(record):
    x, y = 3.0, 1.0
    n7 = n8 = 0
    bad = []
    worst_sharp = 0.0
    for m in range(0, 31):
        for p in range(3, 41):
            q = TailQuery(m, p, x, y)
            # both lemmas bound the one-branch sum of |J_n(y)||Y_{n+m}(x)|
            tail = float(grafbounds.tail_terms("Y", q, n_max=1000, both=False).sum())
            for name, fn in (("l7", grafbounds.bound_jy_l7), ("l8", grafbounds.bound_jy_l8)):
                try:
                    b = fn(q)
                except InapplicableBoundError:
                    continue
                if name == "l7":
                    n7 += 1
                else:
                    n8 += 1
                if not b >= tail:
                    bad.append((name, m, p))
                if name == "l8" and m == p:
                    worst_sharp = max(worst_sharp, b / tail)
    ok = not bad and n7 > 0 and n8 > 0 and worst_sharp <= 10
    record(7, "tail bounds dominate and L8 sharp at m=p", ok,
           f"{n7} L7 and {n8} L8 cases, violations={bad[:5]}, max L8/tail at m=p = {worst_sharp:.3f}")
    assert ok


def test_c08_identity_suite(lab, kite, record):
    notes, ok = [], True
    sample = np.arange(0, kite.count, 25)
    for p in (5, 10, 15, 20):
        dec = lab.decompose(np.arange(kite.count), p, check=False)
        s = float(np.max(dec.identity_gap / dec.identity_tol))
        alt = lab.decompose(sample, p, with_local_form=True, check=False)
        a = float(np.max(alt.local_form_gap / alt.identity_tol))
        mc = lab.moment_check(p)
        leaves = sorted({int(lab.tree.leaf_of_point[x]) for x in sample})
        targets = sorted({c for lf in leaves for c in lab.chain(lf)})
        lc = lab.local_check(p, targets)
        good = s <= 1 and a <= 1 and mc.ok and lc.ok
        ok = ok and good
        notes.append(f"p={p}: sum {s:.2g} alt {a:.2g} EM {mc.gap / mc.tol:.2g} EL {lc.gap / lc.tol:.2g}")
    record(8, "identity suite (gap/tol)", ok, "; ".join(notes))
    assert ok


def specfun_violations():
    v = {}
    z = np.geomspace(0.1, 50, 60)
    # Wronskian
    J, Y = specfun.j_table(61, z), specfun.y_table(61, z)
    n = np.arange(1, 61)
    w = J[:, n + 1] * Y[:, n] - J[:, n] * Y[:, n + 1]
    want = (2 / (np.pi * z))[:, None]
    v["wronskian"] = int(np.sum(np.abs(w - want) > 1e-10 * want))
    # recurrence, relative to the size of the terms
    bad = 0
    for B in (J, Y):
        a, b, c = B[:, n - 1], B[:, n + 1], (2 * n / z[:, None]) * B[:, n]
        bad += int(np.sum(np.abs(a + b - c) > 1e-10 * (np.abs(a) + np.abs(b) + np.abs(c))))
    v["recurrence"] = bad
    # J_n positive and increasing on (0, n]; Y_n negative there
    bad_j = bad_y = 0
    for order in range(1, 41):
        zz = np.linspace(order / 200, order, 200)
        jj = np.array([specfun.bessel_j(order, t) for t in zz])
        yy = np.array([specfun.bessel_y(order, t) for t in zz])
        bad_j += int(np.sum(jj <= 0) + np.sum(np.diff(jj) <= 0))
        bad_y += int(np.sum(yy >= 0))
    v["lemma1"], v["lemma4"] = bad_j, bad_y
    # |H_n| decreasing in z and increasing in |n|
    H = np.abs(specfun.h_table(40, z))
    v["lemma2"] = int(np.sum(np.diff(H, axis=0) >= 0) + np.sum(np.diff(H, axis=1) <= 0))
    Hn = np.abs(np.array([[specfun.hankel1(-k, t) for k in range(41)] for t in z[::6]]))
    v["lemma2"] += int(np.sum(np.abs(Hn - H[::6]) > 1e-12 * H[::6]))
    # C_n(z): > 1 for n >= z+1, increasing in z, decreasing in n, tends to 1
    zc = np.linspace(0.1, 20, 80)
    C = specfun.c_table(300, zc)
    bad = 0
    for order in range(1, 301):
        ok_z = zc <= order - 1
        col = C[ok_z, order]
        bad += int(np.sum(col <= 1) + np.sum(np.diff(col) <= 0))
        if order < 300:
            nxt = C[ok_z, order + 1]
            bad += int(np.sum(nxt >= col))
    bad += int(abs(C[0, 300] - 1) > 1e-3)
    v["lemma5"] = bad
    # upper bounds on |J_n|
    zj = np.geomspace(0.05, 50, 80)
    JJ = specfun.j_table(80, zj)
    bad = 0
    for order in range(1, 81):
        ln_a = order * np.log(zj / 2) - math.lgamma(order + 1)
        ln_b = -0.5 * math.log(2 * math.pi * order) + order * np.log(math.e * zj / (2 * order))
        bound = np.minimum(np.minimum(np.exp(ln_a), np.exp(ln_b)), 1 / math.sqrt(2))
        bad += int(np.sum(np.abs(JJ[:, order]) > bound * (1 + 1e-12)))
    v["j_bounds"] = bad
    # |H_n(z)| <= 2 C_n(z) (2/z)^n Gamma(n)/pi for n >= z+1, in logs
    bad = 0
    for order in range(2, 81):
        zz = zj[zj <= order - 1]
        if zz.size == 0:
            continue
        ln_h = np.log(np.abs(specfun.h_table(order, zz)[:, order]))
        ln_b = (np.log(2 * specfun.c_table(order, zz)[:, order]) + order * np.log(2 / zz)
                + math.lgamma(order) - math.log(math.pi))
        bad += int(np.sum(ln_h > ln_b + 1e-12))
    v["h_bound"] = bad
    return v


def test_c09_special_functions(record):
    v = specfun_violations()
    ok = sum(v.values()) == 0
    record(9, "special-function grids", ok, " ".join(f"{k}={n}" for k, n in v.items()))
    assert ok


def test_c10_complexity(record):
    sizes = [250, 500, 1000, 2000, 4000]
    times = []
    for N in sizes:
        disc = boundary.discretize(boundary.kite(), N // 2)
        cfg = FmmConfig(5.0, 20)
        best = math.inf
        for _ in range(2):
            t0 = time.perf_counter()
            fmm.apply(disc, cfg)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    ok = slope < 1.25
    record(10, "apply time exponent", ok,
           f"{slope:.3f} (< 1.25); seconds " + " ".join(f"{N}:{t:.2f}" for N, t in zip(sizes, times)))
    assert ok
