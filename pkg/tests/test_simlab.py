import math

import numpy as np
import pytest

from rrt.core import Region
from rrt.grow import GrowConfig, grow
from rrt.inference import LeafInterval
from rrt.simlab import (
    DGPConfig,
    ExperimentConfig,
    MethodSpec,
    PRESETS,
    evaluate,
    generate,
    mean_function,
    run_experiment,
    true_leaf_mean,
)


def test_mean_function_cells():
    X = np.array(
        [
            [1.0, 1.0, 1.0],  # x1 > 0
            [-1.0, 1.0, 1.0],  # x2 > 0, x2 x3 > 0
            [-1.0, -1.0, 1.0],  # x2 <= 0, x2 x3 <= 0
            [-1.0, 1.0, -1.0],  # x2 > 0, x2 x3 <= 0
            [-1.0, -1.0, -1.0],  # x2 <= 0, x2 x3 > 0
        ]
    )
    np.testing.assert_array_equal(mean_function(X, 1.0, 2.0), [0, 6, 2, 4, 4])
    np.testing.assert_array_equal(mean_function(X, 1.0, 0.0), 0)


@pytest.mark.parametrize("noise", ["gaussian", "laplace"])
def test_noise_sd(noise):
    ds, mu = generate(DGPConfig(n=100_000, p=3, sigma=2.0, noise=noise), np.random.default_rng(0))
    eps = ds.y - mu
    se = 2.0 / math.sqrt(2 * 100_000) * (1 if noise == "gaussian" else math.sqrt(2.5))
    assert abs(eps.std() - 2.0) < 3 * se


def test_dgp_validation():
    with pytest.raises(ValueError):
        DGPConfig(noise="cauchy")
    with pytest.raises(ValueError):
        DGPConfig(sigma=0.0)


def test_true_leaf_mean():
    mu = np.array([2.0, 6.0, 2.0, 6.0, 0.0])
    assert true_leaf_mean(mu, Region((), np.array([0, 1, 2, 3]))) == 4.0
    assert true_leaf_mean(mu, Region((), np.array([4]))) == 0.0
    with pytest.raises(ValueError):
        true_leaf_mean(mu, Region((), np.array([], dtype=int)))


def _tree_and_cis(lower, upper):
    ds, mu = generate(DGPConfig(n=120, p=3, sigma=1.0), np.random.default_rng(1))
    tree = grow(ds, GrowConfig(max_depth=2, min_split_size=30, min_leaf_size=10, tau=0.0))
    cis = [
        LeafInterval(i, nid, tree.nodes[nid].region.size, 0.0, lower(nid), upper(nid), 1.0, "x")
        for i, nid in enumerate(tree.terminal_ids)
    ]
    return ds, mu, tree, cis


def test_evaluate_infinite_intervals_cover():
    ds, mu, tree, cis = _tree_and_cis(lambda _: -math.inf, lambda _: math.inf)
    row = evaluate(tree, cis, mu, ds.X, ds.y)
    assert row["coverage"] == 1.0 and row["miscovered_count"] == 0


def test_evaluate_wrong_points_miss():
    ds, mu, tree, cis = _tree_and_cis(lambda _: 1e6, lambda _: 1e6)
    row = evaluate(tree, cis, mu, ds.X, ds.y)
    assert row["coverage"] == 0.0 and row["avg_ci_length"] == 0.0
    assert row["miscovered_count"] == row["n_terminals"]


def test_evaluate_needs_one_interval_per_leaf():
    ds, mu, tree, cis = _tree_and_cis(lambda _: 0.0, lambda _: 1.0)
    with pytest.raises(ValueError):
        evaluate(tree, cis[:-1], mu, ds.X, ds.y)


def test_mse_noise_floor():
    n, sigma = 20_000, 1.5
    ds, mu = generate(DGPConfig(n=n, p=3, sigma=sigma), np.random.default_rng(2))
    tree = grow(ds, GrowConfig(max_depth=0, min_split_size=2, min_leaf_size=1, tau=0.0))
    y_test = mu + np.random.default_rng(3).normal(0, sigma, n)
    # oracle predictor: replace the single leaf mean with mu itself
    resid = y_test - mu
    mse = resid @ resid / n
    assert abs(mse - sigma**2) < 3 * sigma**2 * math.sqrt(2 / n)
    cis = [LeafInterval(0, 0, n, 0.0, 0.0, 1.0, 1.0, "x")]
    row = evaluate(tree, cis, mu, ds.X, y_test)
    assert row["test_mse"] > mse


def test_method_labels_and_parsing():
    assert MethodSpec.parse("rrt:1:full").label == "rrt(1,full)"
    assert MethodSpec.parse("rrt:2").label == "rrt(2,conditioned-r1)"
    assert MethodSpec.parse("uv:0.3").label == "uv(0.3)"
    assert MethodSpec.parse({"kind": "naive"}).label == "naive"
    with pytest.raises(ValueError):
        MethodSpec.parse("forest")


def tiny(**kw):
    opts = dict(
        base={"n": 80, "p": 3, "sigma": 1.0},
        methods=("naive", "rrt:1", "uv:0.2", "cart"),
        grow_preset="first_example",
        n_reps=3,
        master_seed=5,
    )
    opts.update(kw)
    return ExperimentConfig(**opts)


def test_run_experiment_is_deterministic():
    a, b = run_experiment(tiny()), run_experiment(tiny())
    assert a.to_csv() == b.to_csv()
    assert run_experiment(tiny(master_seed=6)).to_csv() != a.to_csv()


def test_parallel_matches_serial():
    assert run_experiment(tiny(n_jobs=2)).to_csv() == run_experiment(tiny()).to_csv()


def test_methods_share_the_replicate_data():
    rep = run_experiment(tiny())
    naive = [r for r in rep.rows if r["method"] == "naive"]
    cart = [r for r in rep.rows if r["method"] == "cart"]
    assert [r["test_mse"] for r in naive] == [r["test_mse"] for r in cart]


def test_summary_fields():
    rep = run_experiment(tiny())
    summ = rep.summary()
    assert {s["method"] for s in summ} == {"naive", "rrt(1,conditioned-r1)", "uv(0.2)", "cart"}
    for s in summ:
        assert s["n_reps"] == 3 and s["n_failed"] == 0
        assert 0 <= s["coverage"] <= 1 and 0 <= s["fcr"] <= 1
        rows = [r for r in rep.rows if r["method"] == s["method"]]
        assert s["fcr"] == pytest.approx(sum(r["miscovered_count"] for r in rows) / sum(r["n_terminals"] for r in rows))
    assert '"schema": "rrt.sim_summary/1"' in rep.summary_json()
    assert rep.panel_csv().splitlines()[0].startswith("cell,")


def test_failures_are_recorded_not_raised(monkeypatch):
    import rrt.simlab as sl

    def boom(*a, **k):
        raise RuntimeError("synthetic")

    monkeypatch.setattr(sl, "infer_tree", boom)
    rep = run_experiment(tiny())
    bad = [r for r in rep.rows if r["method"].startswith("rrt")]
    assert all(r["status"].startswith("error") for r in bad)
    assert next(s for s in rep.summary() if s["method"].startswith("rrt"))["n_failed"] == 3


def test_presets_build():
    for name, make in PRESETS.items():
        cfg = make(n_reps=2)
        assert cfg.n_reps == 2 and len(cfg.cells) >= 1
    assert [c["sigma"] for c in PRESETS["sigma_sweep"]().cells] == [1.0, 2.0, 5.0, 10.0]
    assert PRESETS["laplace"]().dgp(0).noise == "laplace"


def test_config_from_mapping_with_preset():
    cfg = ExperimentConfig.from_mapping({"preset": "smoke", "n_reps": 4, "master_seed": 9})
    assert cfg.n_reps == 4 and cfg.master_seed == 9 and cfg.name == "smoke"
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"grow_preset": "nope"})
