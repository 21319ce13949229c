import csv
import io
import json
import time

import numpy as np
import pytest

from conftest import make_data
from rrt.cli import main

EIGHT_ROWS = "x1,x2,y\n1,5,0.1\n2,3,0.3\n3,8,-0.2\n4,1,0.0\n5,2,4.1\n6,7,3.9\n7,4,4.2\n8,6,3.8\n"


def write_csv(path, ds, name="y"):
    cols = [f"x{j + 1}" for j in range(ds.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [name])
        for row, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(y))])
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def eight(tmp_path):
    p = tmp_path / "eight.csv"
    p.write_text(EIGHT_ROWS)
    cfg = tmp_path / "depth1.yaml"
    cfg.write_text("grow:\n  max_depth: 1\n  min_split_size: 2\n  min_leaf_size: 1\n")
    return str(p), str(cfg)


def test_fit_tiny_csv_depth_one(tmp_path, eight):
    data, cfg = eight
    out = tmp_path / "t.json"
    assert main(["fit", "--data", data, "--response", "y", "--config", cfg, "--seed", "1", "--sigma", "0.2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    internal = [n for n in doc["nodes"] if n["left"] is not None]
    terminal = [n for n in doc["nodes"] if n["left"] is None]
    assert (len(internal), len(terminal)) == (1, 2)
    assert (tmp_path / "t.txt").exists()
    man = json.loads((tmp_path / "t.json.manifest.json").read_text())
    assert man["command"] == "fit" and man["seed"] == 1


def test_fit_is_byte_identical(tmp_path, eight):
    data, cfg = eight
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        main(["fit", "--data", data, "--response", "y", "--config", cfg, "--seed", "3", "--sigma", "1", "--out", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_non_numeric_response_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n1,0.5\n2,abc\n")
    assert main(["fit", "--data", str(p), "--response", "y", "--sigma", "1"]) == 2
    assert "row" in capsys.readouterr().err


def test_bad_flags_exit_2(eight):
    data, _ = eight
    assert main(["fit", "--data", data, "--response", "nope", "--sigma", "1"]) == 2
    assert main(["infer"]) == 2
    assert main(["fit", "--data", "/no/such.csv", "--response", "y"]) == 2


@pytest.fixture
def fitted(tmp_path):
    ds, _ = make_data(n=90, p=2, sigma=1.0, seed=11)
    data = write_csv(tmp_path / "d.csv", ds)
    cfg = tmp_path / "g.yaml"
    cfg.write_text("max_depth: 2\nmin_split_size: 20\nmin_leaf_size: 8\n")
    tree = tmp_path / "tree.json"
    assert main(["fit", "--data", data, "--response", "y", "--config", str(cfg), "--seed", "4", "--sigma", "1", "--out", str(tree)]) == 0
    return data, str(tree), ds


def test_infer_needs_sigma(tmp_path, fitted):
    data, tree, _ = fitted
    assert main(["infer", "--data", data, "--response", "y", "--tree", tree]) == 2


def test_infer_rejects_other_data(tmp_path, fitted):
    _, tree, ds = fitted
    other = write_csv(tmp_path / "o.csv", ds.with_response(ds.y + 1e-9))
    assert main(["infer", "--data", other, "--response", "y", "--tree", tree, "--sigma", "1"]) == 3


def test_full_matches_conditioned_all_free(tmp_path, fitted):
    data, tree, _ = fitted
    a, b = tmp_path / "full.csv", tmp_path / "cond.csv"
    common = ["infer", "--data", data, "--response", "y", "--tree", tree, "--sigma", "1"]
    assert main(common + ["--variant", "full", "--out", str(a)]) == 0
    assert main(common + ["--variant", "conditioned", "--r", "10000", "--out", str(b)]) == 0
    for ra, rb in zip(read_rows(a), read_rows(b)):
        assert abs(float(ra["lower"]) - float(rb["lower"])) < 1e-3
        assert abs(float(ra["upper"]) - float(rb["upper"])) < 1e-3
    assert json.loads((tmp_path / "full.csv.manifest.json").read_text())["command"] == "infer"


def test_root_only_tree_gives_wald(tmp_path, eight, capsys):
    data, _ = eight
    cfg = tmp_path / "root.yaml"
    cfg.write_text("max_depth: 0\nmin_split_size: 2\nmin_leaf_size: 1\n")
    tree = tmp_path / "r.json"
    main(["fit", "--data", data, "--response", "y", "--config", str(cfg), "--sigma", "2", "--out", str(tree)])
    capsys.readouterr()
    assert main(["infer", "--data", data, "--response", "y", "--tree", str(tree), "--sigma", "2", "--variant", "full"]) == 0
    sel = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert main(["infer", "--data", data, "--response", "y", "--tree", str(tree), "--sigma", "2", "--variant", "naive"]) == 0
    nv = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(sel[0]["lower"]) == pytest.approx(float(nv[0]["lower"]), abs=1e-5)
    assert float(sel[0]["upper"]) == pytest.approx(float(nv[0]["upper"]), abs=1e-5)


def test_pipeline_is_byte_stable(tmp_path, fitted):
    data, tree, _ = fitted
    outs = []
    for tag in ("1", "2"):
        run = tmp_path / f"run{tag}"
        run.mkdir()
        res = run / "res.csv"
        main(["infer", "--data", data, "--response", "y", "--tree", tree, "--sigma", "1", "--out", str(res)])
        cmp = run / "cmp.csv"
        main(["compare", str(res), "--out", str(cmp)])
        outs.append((res.read_bytes(), cmp.read_bytes()))
    assert outs[0] == outs[1]


def _table(path, methods, value):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "method", "coverage"])
        for m in methods:
            w.writerow([0, m, value])
    return str(path)


def test_compare_identical_inputs(tmp_path, capsys):
    a = _table(tmp_path / "run.csv", ["naive", "uv(0.1)"], 0.9)
    assert main(["compare", a, a]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert all(r["coverage@run"] == r["coverage@run#2"] for r in rows)


def test_compare_disjoint_methods(tmp_path, capsys):
    a = _table(tmp_path / "a.csv", ["naive"], 0.8)
    b = _table(tmp_path / "b.csv", ["cart"], 1.0)
    assert main(["compare", a, b]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [(r["method"], r["coverage@a"], r["coverage@b"]) for r in rows] == [("naive", "0.8", ""), ("cart", "", "1.0")]


def test_compare_three_runs(tmp_path, capsys):
    ins = [_table(tmp_path / f"{m}.csv", [m], v) for m, v in (("naive", 0.7), ("rrt", 0.9), ("uv", 0.9))]
    assert main(["compare", *ins]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 3
    for r in rows:
        filled = [k for k, v in r.items() if k.startswith("coverage@") and v]
        assert filled == [f"coverage@{r['method']}"]


def test_compare_schema_mismatch(tmp_path):
    p = tmp_path / "odd.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["compare", str(p)]) == 2


def test_simulate_deterministic(tmp_path):
    cfg = tmp_path / "e.yaml"
    cfg.write_text(
        "name: tiny\nbase: {n: 60, p: 3, sigma: 1.0}\nmethods: [naive, 'rrt:1', 'uv:0.2']\n"
        "grow_preset: first_example\nn_reps: 2\n"
    )
    for tag in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / tag)]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    summ = json.loads((tmp_path / "a.summary.json").read_text())
    assert summ["schema"] == "rrt.sim_summary/1"
    assert all(rec["coverage"] is not None for rec in summ["cells"])
    assert (tmp_path / "a.csv.manifest.json").exists()


@pytest.mark.slow
def test_smoke_preset_budget(tmp_path):
    t0 = time.perf_counter()
    assert main(["simulate", "--preset", "smoke", "--out", str(tmp_path / "smoke")]) == 0
    assert time.perf_counter() - t0 < 300
