"""Randomized CART: gains, candidate splits and the three growing rules.

At every examined region each candidate split gets an independent
N(0, tau^2) perturbation of its gain and the randomized argmax wins. The
stopping rule is one of

* ``fixed_depth``: split until ``max_depth`` / size limits,
* ``threshold``: split only if the winning randomized gain reaches ``lam``,
* ``cost_complexity``: split only if GM (average SSE gain of a
  deterministic probe tree) plus an extra draw reaches ``lam``.

Random draws come from a per-node stream derived from ``(seed, path)``, so
changing what happens in one subtree never shifts the draws elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .core import Dataset, FittedTree, Node, NodeTrace, Region

FIXED_DEPTH = "fixed_depth"
THRESHOLD = "threshold"
COST_COMPLEXITY = "cost_complexity"
STOPPING_KINDS = (FIXED_DEPTH, THRESHOLD, COST_COMPLEXITY)


@dataclass(frozen=True)
class Stopping:
    kind: str = FIXED_DEPTH
    lam: float = -math.inf
    probe_depth: int | None = None  # cost_complexity only; None -> max_depth

    def __post_init__(self):
        if self.kind not in STOPPING_KINDS:
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        object.__setattr__(self, "lam", float(self.lam))


@dataclass(frozen=True)
class GrowConfig:
    """Tree growing hyperparameters.

    ``tau`` is either a constant randomization sd or a callable mapping a
    Region to its sd. ``tau == 0`` is deterministic CART (draws are still
    consumed so random streams line up with the randomized runs) and is
    not valid input for selective inference.
    """

    max_depth: int = 3
    min_split_size: int = 50
    min_leaf_size: int = 20
    tau: float | Callable[[Region], float] = 1.0
    stopping: Stopping = field(default_factory=Stopping)
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if self.min_split_size < 2 * self.min_leaf_size:
            raise ValueError("min_split_size must be >= 2 * min_leaf_size")
        if not callable(self.tau) and not self.tau >= 0:
            raise ValueError("tau must be >= 0")

    @classmethod
    def simulation_preset(cls, **kw) -> "GrowConfig":
        """Depth 3, min split 50, min leaf 20 (the simulation-study setting)."""
        return cls(**{"max_depth": 3, "min_split_size": 50, "min_leaf_size": 20, **kw})

    @classmethod
    def first_example_preset(cls, **kw) -> "GrowConfig":
        """Depth 3, min split 25, min leaf 10 (the introductory example)."""
        return cls(**{"max_depth": 3, "min_split_size": 25, "min_leaf_size": 10, **kw})

    def tau_for(self, region: Region) -> float:
        tau = float(self.tau(region)) if callable(self.tau) else float(self.tau)
        if not tau >= 0:
            raise ValueError(f"tau rule returned {tau}")
        return tau

    def deterministic(self) -> "GrowConfig":
        return replace(self, tau=0.0)

    def hyperparams(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_split_size": self.min_split_size,
            "min_leaf_size": self.min_leaf_size,
            "tau": "per-region" if callable(self.tau) else float(self.tau),
        }

    @classmethod
    def from_mapping(cls, m: dict) -> "GrowConfig":
        m = dict(m)
        stop = m.pop("stopping", None) or {}
        if isinstance(stop, str):
            stop = {"kind": stop}
        lam = stop.get("lam", -math.inf)
        stop = {**stop, "lam": float(lam) if lam is not None else -math.inf}
        known = {"max_depth", "min_split_size", "min_leaf_size", "tau", "seed"}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown grow config keys: {sorted(unknown)}")
        return cls(stopping=Stopping(**stop), **m)


class SplitTable(NamedTuple):
    """Column-wise candidate splits of one region plus per-feature sort order."""

    features: np.ndarray
    orders: np.ndarray
    thresholds: np.ndarray
    order_idx: np.ndarray  # (n_P, p): member positions sorted by each feature

    @property
    def d(self) -> int:
        return len(self.features)

    def left_sums(self, v: np.ndarray) -> np.ndarray:
        """Sum of member-aligned ``v`` over the left child of every candidate.

        ``v`` has shape (n_P,) or (n_P, m); result has shape (d,) or (d, m).
        """
        cs = np.cumsum(v[self.order_idx], axis=0)
        return cs[self.orders - 1, self.features]


def split_table(X: np.ndarray, members: np.ndarray, min_leaf: int) -> SplitTable:
    Xm = X[members]
    n_P, p = Xm.shape
    order_idx = np.argsort(Xm, axis=0, kind="stable")
    xs = np.take_along_axis(Xm, order_idx, axis=0)
    feats, ords, thr = [], [], []
    k = np.arange(1, n_P)  # left child size
    ok_size = (k >= min_leaf) & (n_P - k >= min_leaf)
    for j in range(p):
        ok = ok_size & (xs[:-1, j] < xs[1:, j])
        kk = k[ok]
        feats.append(np.full(len(kk), j, dtype=np.int64))
        ords.append(kk)
        thr.append(xs[kk - 1, j])
    return SplitTable(
        np.concatenate(feats) if feats else np.zeros(0, np.int64),
        np.concatenate(ords).astype(np.int64) if ords else np.zeros(0, np.int64),
        np.concatenate(thr) if thr else np.zeros(0),
        order_idx,
    )


def enumerate_candidates(dataset: Dataset, region: Region, min_leaf: int = 1):
    """All admissible splits of ``region``, ordered by (feature, order_index).

    Thresholds sit at distinct observed values only, and each child keeps at
    least ``min_leaf`` members. May be empty.
    """
    from .core import SplitCandidate

    if region.size < 2:
        return []
    tab = split_table(dataset.X, region.members, min_leaf)
    return [SplitCandidate(int(j), int(o), float(c)) for j, o, c in zip(tab.features, tab.orders, tab.thresholds)]


def sse(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=float)
    return float(((v - v.mean()) ** 2).sum()) if len(v) else 0.0


def gain(y, X, region: Region, split) -> float:
    """SSE reduction of ``split`` on ``region``, scaled by 1/sqrt(n_P)."""
    yP = np.asarray(y, dtype=float)[region.members]
    go_left = X[region.members, split.feature] <= split.threshold
    if go_left.all() or not go_left.any():
        raise ValueError("split leaves an empty child")
    return (sse(yP) - sse(yP[go_left]) - sse(yP[~go_left])) / math.sqrt(len(yP))


def table_gains(tab: SplitTable, yP: np.ndarray) -> np.ndarray:
    """Vectorized SSE-form gains for every candidate in ``tab``."""
    n_P = len(yP)
    yc = yP - yP.mean()
    S_l = tab.left_sums(yc)
    Q_l = tab.left_sums(yc * yc)
    S_tot, Q_tot = yc.sum(), (yc * yc).sum()
    n_l = tab.orders.astype(float)
    n_r = n_P - n_l
    sse_P = Q_tot - S_tot**2 / n_P
    sse_l = Q_l - S_l**2 / n_l
    sse_r = (Q_tot - Q_l) - (S_tot - S_l) ** 2 / n_r
    return (sse_P - sse_l - sse_r) / math.sqrt(n_P)


def _probe_terminals(X, y, members, depth, min_split, min_leaf) -> list[np.ndarray]:
    if depth <= 0 or len(members) < min_split:
        return [members]
    tab = split_table(X, members, min_leaf)
    if tab.d == 0:
        return [members]
    k = int(np.argmax(table_gains(tab, y[members])))
    go_left = X[members, tab.features[k]] <= tab.thresholds[k]
    return _probe_terminals(X, y, members[go_left], depth - 1, min_split, min_leaf) + _probe_terminals(
        X, y, members[~go_left], depth - 1, min_split, min_leaf
    )


class GMResult(NamedTuple):
    value: float
    n_terminals: int

    @property
    def degenerate(self) -> bool:
        return self.n_terminals < 2


def gm(dataset: Dataset, y, region: Region, probe_depth: int, min_split_size: int = 2, min_leaf_size: int = 1) -> GMResult:
    """Average SSE gain per added terminal of a deterministic CART probe tree."""
    y = np.asarray(y, dtype=float)
    terms = _probe_terminals(dataset.X, y, region.members, probe_depth, min_split_size, min_leaf_size)
    if len(terms) < 2:
        return GMResult(0.0, len(terms))
    val = (sse(y[region.members]) - sum(sse(y[t]) for t in terms)) / (len(terms) - 1)
    return GMResult(val, len(terms))


def node_rng(seed: int, path: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(len(path), *path)))


def _grow(dataset: Dataset, config: GrowConfig, seed: int, streams=node_rng) -> FittedTree:
    if dataset.n == 0:
        raise ValueError("cannot grow a tree on an empty dataset")
    X, y = dataset.X, dataset.y
    stop = config.stopping
    probe_depth = config.max_depth if stop.probe_depth is None else stop.probe_depth
    nodes: list[dict] = []

    def visit(region: Region, depth: int, path: tuple[int, ...], parent: int | None) -> int:
        nid = len(nodes)
        rec = {"id": nid, "depth": depth, "region": region, "mean": float(y[region.members].mean()), "parent": parent}
        nodes.append(rec)
        if depth >= config.max_depth:
            rec["stop_reason"] = "depth"
            return nid
        if region.size < config.min_split_size:
            rec["stop_reason"] = "size"
            return nid
        tab = split_table(X, region.members, config.min_leaf_size)
        if tab.d == 0:
            rec["stop_reason"] = "no_split"
            return nid
        tau = config.tau_for(region)
        rng = streams(seed, path)
        w = tau * rng.standard_normal(tab.d)
        w_tilde = tau * rng.standard_normal() if stop.kind == COST_COMPLEXITY else None
        gains = table_gains(tab, y[region.members])
        rg = gains + w
        k = int(np.argmax(rg))
        d_vec = rg[k] - np.delete(rg, k)
        gm_val = None
        if stop.kind == THRESHOLD:
            do_split = rg[k] >= stop.lam
        elif stop.kind == COST_COMPLEXITY:
            gm_val = gm(dataset, y, region, probe_depth, config.min_split_size, config.min_leaf_size).value
            do_split = gm_val + w_tilde >= stop.lam
        else:
            do_split = True
        rec["trace"] = NodeTrace(
            region, tab.features, tab.orders, tab.thresholds, gains, w, k, d_vec, tau,
            threshold_draw=w_tilde, gm_value=gm_val,
        )
        if not do_split:
            rec["stop_reason"] = stop.kind
            return nid
        left, right = region.split(X, int(tab.features[k]), float(tab.thresholds[k]))
        rec["left"] = visit(left, depth + 1, path + (0,), nid)
        rec["right"] = visit(right, depth + 1, path + (1,), nid)
        return nid

    visit(Region((), np.arange(dataset.n)), 0, (), None)
    return FittedTree(
        nodes=tuple(Node(**rec) for rec in nodes),
        stopping={k: v for k, v in asdict(stop).items()},
        hyperparams=config.hyperparams(),
        seed=int(seed),
        n=dataset.n,
        dataset_hash=dataset.content_hash(),
        feature_names=dataset.feature_names,
    )


def _seed(config: GrowConfig, rng) -> int:
    if rng is None:
        return int(config.seed)
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    # derive a seed from a generator; consumes one draw
    return int(rng.integers(2**63 - 1))


def grow(dataset: Dataset, config: GrowConfig, rng=None, streams=node_rng) -> FittedTree:
    """Grow with whatever stopping rule ``config`` names.

    ``streams(seed, path)`` supplies the generator for the node at ``path``
    (a tuple of 0/1 child steps); override only to perturb randomization
    in chosen subtrees.
    """
    return _grow(dataset, config, _seed(config, rng), streams)


def grow_fixed_depth(dataset: Dataset, config: GrowConfig, rng=None) -> FittedTree:
    if config.stopping.kind != FIXED_DEPTH:
        raise ValueError("grow_fixed_depth needs stopping kind fixed_depth")
    return grow(dataset, config, rng)


def grow_threshold(dataset: Dataset, config: GrowConfig, rng=None) -> FittedTree:
    if config.stopping.kind != THRESHOLD:
        raise ValueError("grow_threshold needs stopping kind threshold")
    return grow(dataset, config, rng)


def grow_cost_complexity(dataset: Dataset, config: GrowConfig, rng=None) -> FittedTree:
    if config.stopping.kind != COST_COMPLEXITY:
        raise ValueError("grow_cost_complexity needs stopping kind cost_complexity")
    return grow(dataset, config, rng)


def predict(tree: FittedTree, x) -> float:
    """Terminal mean of the leaf containing ``x``; ties at a threshold go left."""
    return tree.leaf_of(np.asarray(x, dtype=float)).mean


def predict_many(tree: FittedTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = np.empty(X.shape[0])
    for nd in tree.nodes:
        if nd.is_terminal:
            out[nd.region.mask(X)] = nd.mean
    return out
