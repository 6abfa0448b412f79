import csv
import io

import numpy as np
import pytest
from numpy.testing import assert_allclose

from helmfmm import boundary, cli, errorlab, fmm, grafbounds, quadtree


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def parse(text):
    meta = [l for l in text.splitlines() if l.startswith("#")]
    body = "\n".join(l for l in text.splitlines() if not l.startswith("#"))
    return meta, list(csv.DictReader(io.StringIO(body)))


def test_tails(capsys):
    code, out, _ = run(capsys, "tails", "--m-min", "0", "--m-max", "2", "--p-min", "3", "--p-max", "6")
    assert code == 0
    meta, rows = parse(out)
    assert len(meta) == 3 and meta[0].startswith("# helmfmm") and "tails" in meta[0]
    assert len(rows) == 12
    r = next(r for r in rows if r["m"] == "1" and r["p"] == "5")
    assert_allclose(float(r["eps_exact"]), grafbounds.relative_tail(1, 5, 3.0, 1.0), rtol=1e-15)
    for r in rows:
        if r["applicable_l8"] == "1":
            assert float(r["eps_exact"]) <= float(r["bound_l8"])
        else:
            assert r["bound_l8"] == ""


def test_tails_bad_point(capsys):
    code, _, err = run(capsys, "tails", "--x", "1", "--y", "2")
    assert code == 1 and "x > y" in err


def test_fmm_small(capsys, tmp_path):
    out_file = tmp_path / "f.csv"
    code, out, err = run(capsys, "fmm", "--curve", "circle:1", "--n", "40", "--p", "20", "--leaf-cap", "4",
                         "--out", str(out_file))
    assert code == 0 and out == ""
    assert "rel_inf=" in err
    meta, rows = parse(out_file.read_text())
    assert len(rows) == 80
    disc = boundary.discretize(boundary.circle(1.0), 40)
    ref = fmm.direct_apply(disc, fmm.FmmConfig(5.0, 20, 4))
    assert_allclose([float(r["direct_re"]) for r in rows], ref.real, rtol=1e-14, atol=1e-15)
    assert max(float(r["abs_diff"]) for r in rows) < 1e-3 * np.abs(ref).max()


def test_fmm_k_operator(capsys):
    code, out, err = run(capsys, "fmm", "--n", "40", "--op", "K", "--p", "15")
    assert code == 0
    meta, _ = parse(out)
    assert "op=K" in meta[1]


def test_decompose_rows(capsys):
    code, out, _ = run(capsys, "decompose", "--p-min", "10", "--p-max", "11", "--x-index", "0,31")
    assert code == 0
    meta, rows = parse(out)
    assert list(rows[0]) == cli.DECOMPOSE_COLUMNS
    assert [(r["x_index"], r["p"]) for r in rows] == [("0", "10"), ("31", "10"), ("0", "11"), ("31", "11")]
    r = rows[0]
    assert r["applicable_flags"] == "11111"
    assert float(r["abs_es1"]) <= float(r["bound1"])
    assert abs(float(r["empirical_radius"]) - 0.89) < 0.02
    assert r["norm2"] == ""


def test_decompose_default_points():
    disc = boundary.discretize(boundary.kite(), 500)
    tree = fmm.build_tree(disc, fmm.FmmConfig(5.0, 10))
    xs = cli.representative_points(tree, disc.count)
    pats = [quadtree.far_counts(tree, tree.lists, x) for x in xs]
    assert [c[3] for c in pats] == [0, 1, 2]
    # one far-field class beyond level difference zero at each pick
    assert pats[1][2] == 0 and pats[2][1] == 0
    assert xs[0] == 0


def test_decompose_rejects_k(capsys):
    code, _, err = run(capsys, "decompose", "--op", "K")
    assert code == 1


def test_suggest_p(capsys):
    disc = boundary.discretize(boundary.kite(), 500)
    fcfg = fmm.FmmConfig(5.0, 10)
    tree = fmm.build_tree(disc, fcfg)
    # a huge target is met at the applicability threshold
    p_floor = cli.suggest_p(tree, disc, fcfg, 1e6, xs=[0])
    assert p_floor == 10
    p = cli.suggest_p(tree, disc, fcfg, 1e-8, xs=[0])
    assert p > p_floor
    A = boundary.sup_norm_a(disc)
    for q, ok in ((p, True), (p - 1, False)):
        c = fmm.FmmConfig(5.0, q)
        worst = max(errorlab.bound_thm4(quadtree.far_counts(tree, tree.lists, x)[:3], c, A)
                    + errorlab.bound_thm6(quadtree.far_counts(tree, tree.lists, x)[:3], c, A)
                    for x in (0,))
        assert (worst <= 1e-8) == ok
    code, out, _ = run(capsys, "suggest-p", "--eps", "1e-8", "--x-index", "0")
    assert code == 0 and parse(out)[1][0]["p"] == str(p)


def test_suggest_p_errors(capsys):
    assert run(capsys, "suggest-p")[0] == 1
    assert run(capsys, "suggest-p", "--eps", "-1")[0] == 1
    # the level-jump bounds are too loose to reach tiny targets by p = 200
    code, _, err = run(capsys, "suggest-p", "--eps", "1e-8", "--x-index", "93")
    assert code == 1 and "not reached" in err


def test_tree_dump(capsys):
    code, out, _ = run(capsys, "tree-dump", "--n", "50", "--leaf-cap", "3")
    assert code == 0
    meta, rows = parse(out)
    assert rows[0]["level"] == "0" and rows[0]["n_points"] == "100"
    leaves = [r for r in rows if r["is_leaf"] == "1"]
    assert sum(int(r["n_points"]) for r in leaves) == 100
    assert all(int(r["n_points"]) <= 3 for r in leaves)


def test_config_file_and_precedence(capsys, tmp_path):
    cf = tmp_path / "run.cfg"
    cf.write_text("# comment\nn = 50\nleaf-cap=3\n")
    a = run(capsys, "tree-dump", "--config", str(cf))[1]
    b = run(capsys, "tree-dump", "--n", "50", "--leaf-cap", "3")[1]
    assert a == b
    c = run(capsys, "tree-dump", "--config", str(cf), "--n", "60")[1]
    assert "n=60" in c.splitlines()[1]
    cf.write_text("bogus = 1\n")
    assert run(capsys, "tree-dump", "--config", str(cf))[0] == 1
    assert run(capsys, "tree-dump", "--config", str(tmp_path / "missing.cfg"))[0] == 1


def test_header_hash():
    cfg = dict(cli.DEFAULTS)
    h1 = cli.header("fmm", cfg)
    assert h1.count("\n") == 3
    cfg2 = dict(cfg, p=11)
    assert cli.config_hash(cfg, cli.USED["fmm"]) != cli.config_hash(cfg2, cli.USED["fmm"])
    # settings a command ignores do not change its hash
    cfg3 = dict(cfg, eps=0.5)
    assert cli.header("fmm", cfg3) == h1


def test_deterministic_output(capsys):
    argv = ("tails", "--m-max", "3", "--p-max", "10")
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_exit_codes(capsys, monkeypatch):
    assert run(capsys, "fmm", "--n", "0")[0] == 1
    assert run(capsys, "fmm", "--curve", "circle:3")[0] == 1
    assert run(capsys, "fmm", "--curve", "nosuch.csv")[0] == 1
    assert run(capsys, "decompose", "--x-index", "5000", "--p-min", "5", "--p-max", "5")[0] == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["fmm", "--p", "ten"])
    assert exc.value.code == 1

    def tree_fail(cfg):
        raise quadtree.TreeStructureError("too deep")

    def lab_fail(cfg):
        raise errorlab.ErrorLabError("gap")

    monkeypatch.setitem(cli.COMMANDS, "tree-dump", tree_fail)
    assert run(capsys, "tree-dump")[0] == 2
    monkeypatch.setitem(cli.COMMANDS, "tree-dump", lab_fail)
    code, _, err = run(capsys, "tree-dump")
    assert code == 3 and "invariant" in err
