"""Command-line experiment runner.

Every command writes CSV preceded by ``#`` metadata lines (version, command,
effective configuration and its hash).  Settings come from defaults, then an
optional ``--config`` file of key=value lines, then explicit flags.

Exit codes: 0 ok, 1 configuration error, 2 tree structure error,
3 invariant violation.
"""

import argparse
import csv
import hashlib
import io
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, boundary, errorlab, fmm, grafbounds, quadtree, specfun

EXIT_OK, EXIT_CONFIG, EXIT_TREE, EXIT_INVARIANT = 0, 1, 2, 3

DEFAULTS = {
    "curve": "kite", "n": 500, "k": 5.0, "d": 4.0, "leaf_cap": 6, "p": 10,
    "p_min": None, "p_max": None, "op": "S", "c": errorlab.C_THM8, "x_index": None,
    "workers": 1, "x": 3.0, "y": 1.0, "m_min": 0, "m_max": 30, "eps": None, "norm2": False,
}
TYPES = {"curve": str, "n": int, "k": float, "d": float, "leaf_cap": int, "p": int, "p_min": int,
         "p_max": int, "op": str, "c": float, "x_index": str, "workers": int, "x": float, "y": float,
         "m_min": int, "m_max": int, "eps": float, "norm2": lambda v: str(v).lower() in ("1", "true", "yes")}

# settings echoed in each command's header
USED = {
    "tails": ("x", "y", "m_min", "m_max", "p_min", "p_max"),
    "fmm": ("curve", "n", "k", "d", "leaf_cap", "p", "op"),
    "decompose": ("curve", "n", "k", "d", "leaf_cap", "p_min", "p_max", "c", "x_index", "norm2"),
    "suggest-p": ("curve", "n", "k", "d", "leaf_cap", "eps", "x_index"),
    "tree-dump": ("curve", "n", "d", "leaf_cap"),
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def read_config_file(path):
    """Flat key=value file; '#' starts a comment, dashes in keys become underscores."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: bad entry {raw.strip()!r}")
            try:
                out[key] = TYPES[key](value.strip())
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}") from None
    return out


def resolve(args):
    """Merge defaults, config file and explicit flags into one settings dict."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            cfg[key] = v
    if cfg["op"] not in ("S", "K"):
        raise ConfigError("op must be S or K")
    for key in ("n", "k", "d", "leaf_cap", "p", "workers"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive")
    return cfg


def config_hash(cfg, keys):
    text = ";".join(f"{k}={cfg[k]!r}" for k in sorted(keys))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def header(command, cfg):
    keys = USED[command]
    lines = [f"# helmfmm {__version__} {command}",
             "# config: " + " ".join(f"{k}={cfg[k]}" for k in keys),
             f"# config_hash: {config_hash(cfg, keys)}"]
    return "\n".join(lines) + "\n"


def p_range(cfg, lo_default, hi_default):
    lo = cfg["p_min"] if cfg["p_min"] is not None else lo_default
    hi = cfg["p_max"] if cfg["p_max"] is not None else hi_default
    if lo < 1 or hi < lo:
        raise ConfigError("need 1 <= p_min <= p_max")
    return list(range(lo, hi + 1))


def problem(cfg):
    disc = boundary.discretize(boundary.parse_curve(cfg["curve"]), cfg["n"])
    fcfg = fmm.FmmConfig(cfg["k"], cfg["p"], cfg["leaf_cap"], cfg["d"])
    return disc, fcfg


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _rows_csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_tails(cfg):
    """Relative Y-tails at (x, y) and the two relative bounds on an (m, p) grid."""
    x, y = cfg["x"], cfg["y"]
    if not x > y >= 0:
        raise ConfigError("tails needs x > y >= 0")
    ps = p_range(cfg, 3, 40)
    if cfg["m_min"] < 0 or cfg["m_max"] < cfg["m_min"]:
        raise ConfigError("need 0 <= m_min <= m_max")
    rows = []
    for m in range(cfg["m_min"], cfg["m_max"] + 1):
        den = grafbounds.tail_denominator(m, x, y)
        for p in ps:
            q = grafbounds.TailQuery(m, p, x, y)
            eps = grafbounds.relative_tail(m, p, x, y)
            vals = []
            for fn in (grafbounds.bound_jy_l7, grafbounds.bound_jy_l8):
                try:
                    vals.append(fn(q) / den)
                except grafbounds.InapplicableBoundError:
                    vals.append(None)
            rows.append((m, p, eps, vals[0], vals[1], vals[0] is not None, vals[1] is not None))
    return _rows_csv(["m", "p", "eps_exact", "bound_l7", "bound_l8", "applicable_l7", "applicable_l8"], rows), ""


def cmd_fmm(cfg):
    """FMM and direct products side by side, with summary norms and timings."""
    disc, fcfg = problem(cfg)
    t0 = time.perf_counter()
    st = fmm.run(disc, fcfg, cfg["op"])
    t1 = time.perf_counter()
    ref = fmm.direct_apply(disc, fcfg, cfg["op"])
    t2 = time.perf_counter()
    diff = np.abs(st.values - ref)
    rows = [(j, disc.knots[j, 0], disc.knots[j, 1], st.values[j].real, st.values[j].imag,
             ref[j].real, ref[j].imag, diff[j]) for j in range(disc.count)]
    text = _rows_csv(["index", "x1", "x2", "fmm_re", "fmm_im", "direct_re", "direct_im", "abs_diff"], rows)
    rel_inf = float(diff.max() / np.abs(ref).max())
    rel_2 = float(np.linalg.norm(st.values - ref) / np.linalg.norm(ref))
    summary = (f"# summary: rel_inf={rel_inf!r} rel_2={rel_2!r} abs_inf={float(diff.max())!r} "
               f"fmm_seconds={t1 - t0:.3f} direct_seconds={t2 - t1:.3f}\n")
    return text, summary


def representative_points(tree, count):
    """One source per top level difference I = 0, 1, 2 present.

    Prefers the lowest index whose far counts are nonzero only for N_0 and
    N_I, so a single far-field class dominates; otherwise the lowest index
    with that I.
    """
    pure, first = {}, {}
    for j in range(count):
        n0, n1, n2, I = quadtree.far_counts(tree, tree.lists, j)
        if I < 0:
            continue
        first.setdefault(I, j)
        if all(n == 0 for i, n in ((1, n1), (2, n2)) if i != I):
            pure.setdefault(I, j)
    return [pure.get(I, first[I]) for I in sorted(first)]


def _parse_indices(spec, count):
    try:
        out = [int(s) for s in str(spec).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --x-index {spec!r}") from None
    for j in out:
        if not 0 <= j < count:
            raise IndexError(f"source index {j} out of range 0..{count - 1}")
    return out


def _decompose_job(job):
    cfg, p, xs = job
    disc, fcfg = problem(cfg)
    lab = errorlab.ErrorLab(disc, fcfg, cfg["op"])
    return _decompose_rows(lab, cfg, p, xs)


def _decompose_rows(lab, cfg, p, xs):
    disc, tree = lab.disc, lab.tree
    pc = fmm.FmmConfig(cfg["k"], p, cfg["leaf_cap"], cfg["d"])
    dec = lab.decompose(xs, p)
    parts = dec.abs_parts()
    radius = errorlab.empirical_radius(tree, disc)
    if cfg["norm2"]:
        allx = lab.decompose(np.arange(disc.count), p)
        norm2 = float(np.linalg.norm(allx.total))
    else:
        norm2 = None
    rows = []
    for i, x in enumerate(xs):
        rep = errorlab.bound_report(x, tree, disc, pc, c=cfg["c"], radius=radius)
        flags = "".join("1" if rep.applicable[b] else "0"
                        for b in ("bound_es1", "bound_es2", "bound_es31", "bound_es32", "bound_es4"))
        rows.append((x, p, parts["e_s1"][i], parts["e_s2"][i], parts["e_s31"][i], parts["e_s32"][i],
                     parts["e_s4"][i], rep.bound_es1, rep.bound_es2, rep.bound_es31, rep.bound_es32,
                     rep.bound_es4, flags, norm2, rep.bound_norm2, rep.bound_norm2_empirical, radius))
    return rows


DECOMPOSE_COLUMNS = ["x_index", "p", "abs_es1", "abs_es2", "abs_es31", "abs_es32", "abs_es4",
                     "bound1", "bound2", "bound31", "bound32", "bound4", "applicable_flags",
                     "norm2", "bound_norm2_theoretical", "bound_norm2_empirical", "empirical_radius"]


def cmd_decompose(cfg):
    """Measured error parts and their bounds at selected sources over a p range."""
    if cfg["op"] != "S":
        raise ConfigError("decompose supports the single-layer operator only")
    disc, fcfg = problem(cfg)
    ps = p_range(cfg, 5, 30)
    lab = errorlab.ErrorLab(disc, fcfg, cfg["op"])
    if cfg["x_index"] is None:
        xs = representative_points(lab.tree, disc.count)
    else:
        xs = _parse_indices(cfg["x_index"], disc.count)
    rows = []
    if cfg["workers"] > 1 and len(ps) > 1:
        with ProcessPoolExecutor(cfg["workers"]) as ex:
            for r in ex.map(_decompose_job, [(cfg, p, xs) for p in ps]):
                rows.extend(r)
    else:
        for p in ps:
            rows.extend(_decompose_rows(lab, cfg, p, xs))
    return _rows_csv(DECOMPOSE_COLUMNS, rows), ""


def suggest_p(tree, disc, fcfg, eps, xs=None, p_cap=200):
    """Smallest p past the thresholds with bound_thm4 + bound_thm6 <= eps.

    The bound sum is taken at the sources xs (default: all sources), worst
    case over them.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    A = boundary.sup_norm_a(disc)
    if xs is None:
        xs = range(disc.count)
    patterns = sorted({quadtree.far_counts(tree, tree.lists, j)[:3] for j in xs})
    start = 1
    for counts in patterns:
        start = max(start, math.ceil(errorlab.threshold_thm4(counts, fcfg)),
                    math.ceil(errorlab.threshold_thm6(counts, fcfg)))
    for p in range(start, p_cap + 1):
        c = fmm.FmmConfig(fcfg.k, p, fcfg.leaf_cap, fcfg.d)
        w = errorlab.thm4_coefficients(c, A) + errorlab.thm6_coefficients(c, A)
        worst = max(float(np.dot(n, w)) for n in patterns)
        if worst <= eps:
            return p
    raise ConfigError(f"eps={eps:g} is not reached for p <= {p_cap}")


def cmd_suggest_p(cfg):
    if cfg["eps"] is None:
        raise ConfigError("suggest-p needs --eps")
    disc, fcfg = problem(cfg)
    tree = fmm.build_tree(disc, fcfg)
    xs = None if cfg["x_index"] is None else _parse_indices(cfg["x_index"], disc.count)
    p = suggest_p(tree, disc, fcfg, cfg["eps"], xs)
    return _rows_csv(["eps", "p"], [(cfg["eps"], p)]), ""


def cmd_tree_dump(cfg):
    disc, fcfg = problem(cfg)
    return quadtree.dump_csv(fmm.build_tree(disc, fcfg)), ""


COMMANDS = {"tails": cmd_tails, "fmm": cmd_fmm, "decompose": cmd_decompose,
            "suggest-p": cmd_suggest_p, "tree-dump": cmd_tree_dump}


def build_parser():
    ap = _Parser(prog="helmfmm", description="2-D Helmholtz FMM and error laboratory")
    ap.add_argument("--version", action="version", version=f"helmfmm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value settings file")
        sp.add_argument("--curve", help="kite, circle:R or a CSV table t,x1,x2,dx1,dx2")
        sp.add_argument("--n", type=int, help="half the number of knots")
        sp.add_argument("--k", type=float, help="wave number")
        sp.add_argument("--d", type=float, help="root square side")
        sp.add_argument("--leaf-cap", dest="leaf_cap", type=int)
        sp.add_argument("--p", type=int, help="truncation number")
        sp.add_argument("--p-min", dest="p_min", type=int)
        sp.add_argument("--p-max", dest="p_max", type=int)
        sp.add_argument("--op", choices=("S", "K"))
        sp.add_argument("--c", type=float, help="constant of the L2L bound")
        sp.add_argument("--x-index", dest="x_index", help="comma-separated source indices (0-based)")
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--workers", type=int)
        if name == "tails":
            sp.add_argument("--x", type=float)
            sp.add_argument("--y", type=float)
            sp.add_argument("--m-min", dest="m_min", type=int)
            sp.add_argument("--m-max", dest="m_max", type=int)
        if name == "suggest-p":
            sp.add_argument("--eps", type=float, help="target error")
        if name == "decompose":
            sp.add_argument("--norm2", action="store_true", help="also decompose every source for the 2-norm")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        body, summary = COMMANDS[args.command](cfg)
    except (ConfigError, boundary.BoundaryError, specfun.SpecialFunctionError, fmm.FmmError,
            IndexError, OSError, ValueError) as exc:
        print(f"helmfmm: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except quadtree.TreeStructureError as exc:
        print(f"helmfmm: tree error: {exc}", file=sys.stderr)
        return EXIT_TREE
    except errorlab.ErrorLabError as exc:
        print(f"helmfmm: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    text = header(args.command, cfg) + body
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + summary)
    else:
        sys.stdout.write(text)
    if summary:
        sys.stderr.write(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
