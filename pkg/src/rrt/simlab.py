"""Simulation harness: data-generating process, metrics and a replicated runner.

Every replicate derives its own RNG streams from ``(master_seed, cell, rep)``
so results do not depend on worker count or scheduling order. All methods in
a replicate see the same (X, y); only method-private randomization differs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import naive_intervals, uv_pipeline
from .core import Dataset, FittedTree, Region
from .grow import GrowConfig, grow, predict_many
from .inference import CONDITIONED, LeafInterval, infer_tree

GAUSSIAN = "gaussian"
LAPLACE = "laplace"


@dataclass(frozen=True)
class DGPConfig:
    """Step-function surface plus noise; ``sigma`` is the noise sd for both families."""

    n: int = 200
    p: int = 5
    a: float = 1.0
    b: float = 2.0
    noise: str = GAUSSIAN
    sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be >= 1")
        if self.noise not in (GAUSSIAN, LAPLACE):
            raise ValueError(f"unknown noise family {self.noise!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def mean_function(X: np.ndarray, a: float, b: float) -> np.ndarray:
    """b * 1(x1 <= 0) * (1 + a 1(x2 > 0) + 1(x2 x3 > 0)); needs p >= 1."""
    X = np.asarray(X, dtype=float)
    x1 = X[:, 0]
    x2 = X[:, 1] if X.shape[1] > 1 else np.zeros(len(X))
    x3 = X[:, 2] if X.shape[1] > 2 else np.zeros(len(X))
    return b * (x1 <= 0) * (1 + a * (x2 > 0) + (x2 * x3 > 0))


def draw_noise(kind: str, sigma: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if kind == GAUSSIAN:
        return rng.normal(0.0, sigma, size)
    if kind == LAPLACE:
        return rng.laplace(0.0, sigma / math.sqrt(2), size)
    raise ValueError(f"unknown noise family {kind!r}")


def generate(config: DGPConfig, rng=None) -> tuple[Dataset, np.ndarray]:
    """Draw (X, y) and return the dataset with the true mean vector."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    X = rng.standard_normal((config.n, config.p))
    mu = mean_function(X, config.a, config.b)
    y = mu + draw_noise(config.noise, config.sigma, config.n, rng)
    return Dataset(X, y), mu


def true_leaf_mean(mu: np.ndarray, region: Region) -> float:
    if region.size == 0:
        raise ValueError("empty region")
    return float(np.asarray(mu)[region.members].mean())


@dataclass(frozen=True)
class MethodSpec:
    """``kind`` is one of rrt, naive, uv, cart (prediction only)."""

    kind: str
    tau_mult: float = 1.0
    variant: str = CONDITIONED
    r: int = 1
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("rrt", "naive", "uv", "cart"):
            raise ValueError(f"unknown method kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "rrt":
            v = f"conditioned-r{self.r}" if self.variant == CONDITIONED else self.variant
            return f"rrt({self.tau_mult:g},{v})"
        if self.kind == "uv":
            return f"uv({self.gamma:g})"
        return self.kind

    @classmethod
    def parse(cls, spec) -> "MethodSpec":
        """From a mapping or a compact string like ``rrt:1:full``, ``uv:0.1``, ``naive``."""
        if isinstance(spec, MethodSpec):
            return spec
        if isinstance(spec, dict):
            return cls(**spec)
        parts = str(spec).split(":")
        kind = parts[0]
        if kind == "rrt":
            c = float(parts[1]) if len(parts) > 1 else 1.0
            variant = parts[2] if len(parts) > 2 else CONDITIONED
            r = int(parts[3]) if len(parts) > 3 else 1
            return cls("rrt", tau_mult=c, variant=variant, r=r)
        if kind == "uv":
            return cls("uv", gamma=float(parts[1]) if len(parts) > 1 else 0.1)
        return cls(kind)


def evaluate(tree: FittedTree, cis: list[LeafInterval], mu: np.ndarray, X: np.ndarray, y_test: np.ndarray) -> dict:
    """Coverage, mean CI length and test MSE for one fitted tree."""
    leaves = tree.terminal_ids
    if len(cis) != len(leaves):
        raise ValueError(f"expected {len(leaves)} intervals, got {len(cis)}")
    covered = 0
    lengths = []
    for ci in cis:
        target = true_leaf_mean(mu, tree.nodes[ci.node_id].region)
        if ci.covers(target):
            covered += 1
        lengths.append(ci.length)
    k = len(leaves)
    resid = np.asarray(y_test) - predict_many(tree, X)
    return {
        "coverage": covered / k,
        "avg_ci_length": float(np.mean(lengths)) if lengths else float("nan"),
        "test_mse": float(resid @ resid / len(resid)),
        "n_terminals": k,
        "miscovered_count": k - covered,
    }


ROW_FIELDS = (
    "cell", "rep", "method", "coverage", "avg_ci_length", "test_mse", "n_terminals", "miscovered_count", "status",
)


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    cells: list[dict] = field(default_factory=list)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in ROW_FIELDS})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path, cells=()) -> "MetricsReport":
        """Inverse of :meth:`to_csv` (cell descriptors are not stored in the CSV)."""
        ints = ("cell", "rep", "n_terminals", "miscovered_count")
        floats = ("coverage", "avg_ci_length", "test_mse")
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rec = dict(r)
                for k in ints:
                    rec[k] = int(rec[k])
                for k in floats:
                    rec[k] = float(rec[k])
                rows.append(rec)
        return cls(rows=rows, cells=list(cells))

    def summary(self) -> list[dict]:
        """One record per (cell, method): replicate means and the aggregate FCR."""
        out = []
        keys = sorted({(r["cell"], r["method"]) for r in self.rows}, key=lambda k: (k[0], k[1]))
        for cell, method in keys:
            rs = [r for r in self.rows if r["cell"] == cell and r["method"] == method]
            ok = [r for r in rs if r["status"] in ("ok", "unbounded")]
            terms = sum(r["n_terminals"] for r in ok)
            rec = {
                "cell": cell,
                **(self.cells[cell] if cell < len(self.cells) else {}),
                "method": method,
                "n_reps": len(rs),
                "n_failed": len(rs) - len(ok),
                "coverage": _mean(r["coverage"] for r in ok),
                "avg_ci_length": _mean(r["avg_ci_length"] for r in ok),
                "n_unbounded": sum(r["status"] == "unbounded" for r in ok),
                "test_mse": _mean(r["test_mse"] for r in ok),
                "fcr": sum(r["miscovered_count"] for r in ok) / terms if terms else float("nan"),
            }
            out.append(rec)
        return out

    def summary_json(self, path=None, **extra) -> str:
        text = json.dumps({"schema": "rrt.sim_summary/1", **extra, "cells": self.summary()}, indent=2, default=_jsonable)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def panel_csv(self, path=None) -> str:
        """Flat per-(cell, method) table for external plotting."""
        summ = self.summary()
        if not summ:
            return ""
        fields = list(summ[0].keys())
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in summ:
            w.writerow({k: _fmt(r.get(k)) for k in fields})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _mean(it) -> float:
    v = [x for x in it if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(v)) if v else float("nan")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(type(v))


GROW_PRESETS = {"first_example": GrowConfig.first_example_preset, "simulation": GrowConfig.simulation_preset}


@dataclass(frozen=True)
class ExperimentConfig:
    """Methods x DGP cells x replicates.

    ``cells`` holds DGPConfig overrides; the seed field of each DGPConfig is
    ignored in favour of streams derived from ``master_seed``.
    """

    name: str = "experiment"
    cells: tuple = ({},)
    methods: tuple = ("naive", "rrt:1")
    n_reps: int = 500
    grow_preset: str = "simulation"
    alpha: float = 0.1
    master_seed: int = 2024
    n_jobs: int = 1
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.grow_preset not in GROW_PRESETS:
            raise ValueError(f"unknown grow preset {self.grow_preset!r}")
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "cells", tuple(dict(c) for c in self.cells))
        object.__setattr__(self, "methods", tuple(MethodSpec.parse(m) for m in self.methods))
        for c in self.cells:
            DGPConfig(**{**self.base, **c})

    def dgp(self, cell: int) -> DGPConfig:
        return DGPConfig(**{**self.base, **self.cells[cell]})

    def grow_config(self) -> GrowConfig:
        return GROW_PRESETS[self.grow_preset]()

    @classmethod
    def from_mapping(cls, m: dict) -> "ExperimentConfig":
        m = dict(m)
        preset = m.pop("preset", None)
        if preset is not None:
            return replace(PRESETS[preset](), **m)
        return cls(**m)

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["methods"] = [asdict(mm) for mm in self.methods]
        d["cells"] = [dict(c) for c in self.cells]
        return d


def replicate_streams(master_seed: int, cell: int, rep: int):
    """(data, test-noise, method) seed sequences for one replicate."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(cell, rep))
    return ss.spawn(3)


def run_replicate(cfg: ExperimentConfig, cell: int, rep: int) -> list[dict]:
    dgp = cfg.dgp(cell)
    s_data, s_test, s_method = replicate_streams(cfg.master_seed, cell, rep)
    data, mu = generate(dgp, np.random.default_rng(s_data))
    y_test = mu + draw_noise(dgp.noise, dgp.sigma, dgp.n, np.random.default_rng(s_test))
    gc = cfg.grow_config()
    method_seeds = s_method.spawn(len(cfg.methods))
    rows = []
    for spec, ms in zip(cfg.methods, method_seeds):
        row = {"cell": cell, "rep": rep, "method": spec.label, "status": "ok"}
        try:
            tree, cis = _run_method(spec, data, dgp.sigma, gc, cfg.alpha, np.random.default_rng(ms))
            row.update(evaluate(tree, cis, mu, data.X, y_test))
            bad = [c.status for c in cis if c.status not in ("ok", "small_leaf")]
            if any(s.startswith("error") for s in bad):
                row["status"] = "error"
            elif bad:
                row["status"] = "unbounded"
        except Exception as e:  # recorded, not fatal
            row.update(
                coverage=float("nan"), avg_ci_length=float("nan"), test_mse=float("nan"),
                n_terminals=0, miscovered_count=0, status=f"error: {type(e).__name__}: {e}",
            )
        rows.append(row)
    return rows


def _run_method(spec: MethodSpec, data: Dataset, sigma: float, gc: GrowConfig, alpha: float, rng):
    if spec.kind == "rrt":
        tree = grow(data, replace(gc, tau=spec.tau_mult * sigma), rng)
        return tree, infer_tree(tree, data, sigma, alpha, variant=spec.variant, r=spec.r)
    if spec.kind == "uv":
        return uv_pipeline(data, spec.gamma, gc, sigma, alpha, rng)
    tree = grow(data, gc.deterministic(), rng)
    cis = naive_intervals(tree, data, sigma, alpha)
    if spec.kind == "cart":
        inf = float("inf")
        cis = [replace(c, lower=-inf, upper=inf, method="cart") for c in cis]
    return tree, cis


def _run_chunk(args):
    cfg, jobs = args
    return [row for cell, rep in jobs for row in run_replicate(cfg, cell, rep)]


def run_experiment(cfg: ExperimentConfig, progress=None) -> MetricsReport:
    """Run every (cell, replicate); rows are ordered by (cell, rep, method)."""
    jobs = [(c, r) for c in range(len(cfg.cells)) for r in range(cfg.n_reps)]
    rows: list[dict] = []
    total = len(jobs)
    if cfg.n_jobs <= 1:
        for i, (c, r) in enumerate(jobs, 1):
            rows.extend(run_replicate(cfg, c, r))
            if progress:
                progress(i, total)
    else:
        size = max(1, math.ceil(total / (cfg.n_jobs * 8)))
        chunks = [jobs[i : i + size] for i in range(0, total, size)]
        done = 0
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            for chunk, res in zip(chunks, ex.map(_run_chunk, [(cfg, ch) for ch in chunks])):
                rows.extend(res)
                done += len(chunk)
                if progress:
                    progress(done, total)
    order = {m.label: i for i, m in enumerate(cfg.methods)}
    rows.sort(key=lambda r: (r["cell"], r["rep"], order[r["method"]]))
    cells = [asdict(cfg.dgp(c)) | {"cell": c} for c in range(len(cfg.cells))]
    for c in cells:
        c.pop("seed", None)
    return MetricsReport(rows=rows, cells=cells)


def stderr_progress(done: int, total: int):
    step = max(1, total // 20)
    if done == total or done % step == 0:
        print(f"  {done}/{total} replicates", file=sys.stderr, flush=True)


# presets --------------------------------------------------------------------


def first_example_preset(**kw) -> ExperimentConfig:
    """n=200, p=5, sigma=2; naive vs RRT(c) for c = 1..5 and deterministic CART."""
    return ExperimentConfig(
        name="first_example",
        base={"n": 200, "p": 5, "sigma": 2.0},
        methods=("naive", "cart") + tuple(f"rrt:{c}" for c in range(1, 6)),
        grow_preset="first_example",
        **kw,
    )


def uv_comparison_preset(**kw) -> ExperimentConfig:
    """Same data as the first example; RRT(1) against UV(gamma)."""
    return ExperimentConfig(
        name="uv_comparison",
        base={"n": 200, "p": 5, "sigma": 2.0},
        methods=("rrt:1:full", "rrt:1") + tuple(f"uv:{g}" for g in (0.1, 0.2, 0.3, 0.4, 0.5)),
        grow_preset="first_example",
        **kw,
    )


def sigma_sweep_preset(noise: str = GAUSSIAN, **kw) -> ExperimentConfig:
    return ExperimentConfig(
        name=f"sigma_sweep_{noise}",
        base={"n": 200, "p": 10, "noise": noise},
        cells=tuple({"sigma": s} for s in (1.0, 2.0, 5.0, 10.0)),
        methods=("rrt:1", "uv:0.1", "naive", "cart"),
        grow_preset="simulation",
        **kw,
    )


def p_sweep_preset(**kw) -> ExperimentConfig:
    return ExperimentConfig(
        name="p_sweep",
        base={"n": 200, "sigma": 2.0},
        cells=tuple({"p": p} for p in (5, 10, 20)),
        methods=("rrt:1", "uv:0.1", "naive", "cart"),
        grow_preset="simulation",
        **kw,
    )


def laplace_preset(**kw) -> ExperimentConfig:
    return sigma_sweep_preset(LAPLACE, **kw)


def smoke_preset(**kw) -> ExperimentConfig:
    return ExperimentConfig(
        name="smoke",
        base={"n": 200, "p": 5, "sigma": 2.0},
        methods=("naive", "rrt:1", "uv:0.1"),
        grow_preset="first_example",
        **{"n_reps": 50, **kw},
    )


PRESETS = {
    "first_example": first_example_preset,
    "uv_comparison": uv_comparison_preset,
    "sigma_sweep": sigma_sweep_preset,
    "p_sweep": p_sweep_preset,
    "laplace": laplace_preset,
    "smoke": smoke_preset,
}
