"""Shared domain types: datasets, regions, split candidates, traces and trees.

Everything here is immutable after construction. Arrays are stored with the
write flag cleared so a tree or dataset can be handed to worker processes or
reused across inference calls without defensive copies.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

TREE_SCHEMA = "rrt.fitted_tree/1"

LEFT = "<="
RIGHT = ">"


class DataError(ValueError):
    """Malformed input data (shape mismatch, non-finite values, bad CSV)."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or y.ndim != 1:
            raise DataError("X must be 2-d and y 1-d")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has length {y.shape[0]}")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DataError("X and y must be finite")
        if self.feature_names is not None and len(self.feature_names) != X.shape[1]:
            raise DataError("feature_names length does not match X columns")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_response(self, y) -> "Dataset":
        return Dataset(self.X, y, self.feature_names)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.X.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()

    @classmethod
    def from_csv(cls, path, response: str) -> "Dataset":
        """Read a headered, comma separated file; every column must be numeric."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            if response not in header:
                raise DataError(f"{path}: response column {response!r} not in header")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
                vals = []
                for col, cell in zip(header, row):
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}: row {lineno}, column {col!r}: non-numeric value {cell!r}"
                        ) from None
                rows.append(vals)
        if not rows:
            raise DataError(f"{path}: no data rows")
        data = np.array(rows, dtype=float)
        j = header.index(response)
        features = [h for h in header if h != response]
        X = np.delete(data, j, axis=1)
        try:
            return cls(X, data[:, j], tuple(features))
        except DataError as e:
            raise DataError(f"{path}: {e}") from None


@dataclass(frozen=True)
class SplitCandidate:
    """Split `x[feature] <= threshold`; `order_index` is the left child size.

    With local re-indexing the threshold is the `order_index`-th smallest
    value of the feature among the region's members.
    """

    feature: int
    order_index: int
    threshold: float


@dataclass(frozen=True, eq=False)
class Region:
    constraints: tuple[tuple[int, float, str], ...]
    members: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple((int(j), float(c), s) for j, c, s in self.constraints))
        object.__setattr__(self, "members", _frozen(np.sort(np.asarray(self.members)), dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.members)

    def contains(self, x) -> bool:
        for j, c, side in self.constraints:
            if (x[j] <= c) != (side == LEFT):
                return False
        return True

    def mask(self, X: np.ndarray) -> np.ndarray:
        m = np.ones(X.shape[0], dtype=bool)
        for j, c, side in self.constraints:
            m &= (X[:, j] <= c) if side == LEFT else (X[:, j] > c)
        return m

    def split(self, X: np.ndarray, feature: int, threshold: float) -> tuple["Region", "Region"]:
        go_left = X[self.members, feature] <= threshold
        left = Region(self.constraints + ((feature, threshold, LEFT),), self.members[go_left])
        right = Region(self.constraints + ((feature, threshold, RIGHT),), self.members[~go_left])
        return left, right

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        return self.constraints == other.constraints and np.array_equal(self.members, other.members)

    def describe(self, names: Sequence[str] | None = None) -> str:
        if not self.constraints:
            return "root"
        parts = []
        for j, c, side in self.constraints:
            name = names[j] if names else f"x{j}"
            parts.append(f"{name} {side} {c:.4g}")
        return " & ".join(parts)


@dataclass(frozen=True, eq=False)
class NodeTrace:
    """Full selection record at one examined region.

    Candidates are stored column-wise (features, orders, thresholds) in
    enumeration order, i.e. ascending (feature, order_index). Losers in
    `d_vector` keep that order with the winner removed.
    """

    region: Region
    features: np.ndarray
    orders: np.ndarray
    thresholds: np.ndarray
    gains: np.ndarray
    rand_draws: np.ndarray
    chosen_index: int
    d_vector: np.ndarray
    tau: float
    threshold_draw: float | None = None
    gm_value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.int64))
        object.__setattr__(self, "orders", _frozen(self.orders, np.int64))
        for name in ("thresholds", "gains", "rand_draws", "d_vector"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "chosen_index", int(self.chosen_index))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def d(self) -> int:
        return len(self.gains)

    @property
    def candidates(self) -> list[SplitCandidate]:
        return [
            SplitCandidate(int(j), int(o), float(c))
            for j, o, c in zip(self.features, self.orders, self.thresholds)
        ]

    @property
    def chosen(self) -> SplitCandidate:
        k = self.chosen_index
        return SplitCandidate(int(self.features[k]), int(self.orders[k]), float(self.thresholds[k]))

    @property
    def loser_index(self) -> np.ndarray:
        return np.delete(np.arange(self.d), self.chosen_index)

    def replay(self) -> int:
        return int(np.argmax(self.gains + self.rand_draws))

    def to_dict(self) -> dict:
        return {
            "features": self.features.tolist(),
            "orders": self.orders.tolist(),
            "thresholds": self.thresholds.tolist(),
            "gains": self.gains.tolist(),
            "rand_draws": self.rand_draws.tolist(),
            "chosen_index": self.chosen_index,
            "d_vector": self.d_vector.tolist(),
            "tau": self.tau,
            "threshold_draw": self.threshold_draw,
            "gm_value": self.gm_value,
        }

    @classmethod
    def from_dict(cls, d: dict, region: Region) -> "NodeTrace":
        return cls(region=region, **d)

    def __eq__(self, other):
        if not isinstance(other, NodeTrace):
            return NotImplemented
        return self.to_dict() == other.to_dict() and self.region == other.region


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    depth: int
    region: Region
    mean: float
    trace: NodeTrace | None = None
    left: int | None = None
    right: int | None = None
    parent: int | None = None
    stop_reason: str | None = None  # set on terminals: depth, size, no_split, threshold, cost_complexity

    @property
    def is_terminal(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "depth": self.depth,
            "constraints": [list(c) for c in self.region.constraints],
            "members": self.region.members.tolist(),
            "mean": self.mean,
            "left": self.left,
            "right": self.right,
            "parent": self.parent,
            "stop_reason": self.stop_reason,
            "trace": None if self.trace is None else self.trace.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        region = Region(tuple(tuple(c) for c in d["constraints"]), d["members"])
        trace = None if d["trace"] is None else NodeTrace.from_dict(d["trace"], region)
        return cls(d["id"], d["depth"], region, d["mean"], trace, d["left"], d["right"], d["parent"], d["stop_reason"])

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True, eq=False)
class FittedTree:
    nodes: tuple[Node, ...]
    stopping: dict
    hyperparams: dict
    seed: int
    n: int
    dataset_hash: str | None = None
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @property
    def root(self) -> Node:
        return self.nodes[0]

    @property
    def terminal_ids(self) -> list[int]:
        return [nd.id for nd in self.nodes if nd.is_terminal]

    @property
    def terminals(self) -> list[tuple[Region, float]]:
        return [(nd.region, nd.mean) for nd in self.nodes if nd.is_terminal]

    @property
    def internal(self) -> list[Node]:
        return [nd for nd in self.nodes if not nd.is_terminal]

    def terminal_node(self, terminal_index: int) -> Node:
        ids = self.terminal_ids
        if not 0 <= terminal_index < len(ids):
            raise IndexError(f"terminal index {terminal_index} out of range [0, {len(ids)})")
        return self.nodes[ids[terminal_index]]

    def path(self, node_id: int) -> list[Node]:
        """Internal ancestors of `node_id`, root first."""
        out = []
        nd = self.nodes[node_id]
        while nd.parent is not None:
            nd = self.nodes[nd.parent]
            out.append(nd)
        return out[::-1]

    def walk(self) -> Iterator[Node]:
        stack = [0]
        while stack:
            nd = self.nodes[stack.pop()]
            yield nd
            if not nd.is_terminal:
                stack.extend([nd.right, nd.left])

    def leaf_of(self, x) -> Node:
        nd = self.root
        while not nd.is_terminal:
            c = nd.trace.chosen
            nd = self.nodes[nd.left] if x[c.feature] <= c.threshold else self.nodes[nd.right]
        return nd

    def to_dict(self) -> dict:
        return {
            "schema": TREE_SCHEMA,
            "seed": self.seed,
            "n": self.n,
            "dataset_hash": self.dataset_hash,
            "feature_names": None if self.feature_names is None else list(self.feature_names),
            "stopping": self.stopping,
            "hyperparams": self.hyperparams,
            "nodes": [nd.to_dict() for nd in self.nodes],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "FittedTree":
        if d.get("schema") != TREE_SCHEMA:
            raise DataError(f"unsupported tree schema {d.get('schema')!r}")
        names = d.get("feature_names")
        return cls(
            nodes=tuple(Node.from_dict(nd) for nd in d["nodes"]),
            stopping=d["stopping"],
            hyperparams=d["hyperparams"],
            seed=d["seed"],
            n=d["n"],
            dataset_hash=d.get("dataset_hash"),
            feature_names=None if names is None else tuple(names),
        )

    @classmethod
    def from_json(cls, s: str) -> "FittedTree":
        return cls.from_dict(json.loads(s))

    def __eq__(self, other):
        if not isinstance(other, FittedTree):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def render(self) -> str:
        """Indented text view: split rule, size and mean of every node."""
        lines = []
        names = self.feature_names

        def label(j):
            return names[j] if names else f"x{j}"

        def rec(nid, indent, prefix):
            nd = self.nodes[nid]
            head = f"{'  ' * indent}{prefix}[node {nd.id}] n={nd.region.size} mean={nd.mean:.4g}"
            if nd.is_terminal:
                lines.append(f"{head} (leaf: {nd.stop_reason})")
                return
            c = nd.trace.chosen
            lines.append(f"{head} split {label(c.feature)} <= {c.threshold:.4g}")
            rec(nd.left, indent + 1, "L ")
            rec(nd.right, indent + 1, "R ")

        rec(0, 0, "")
        return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class TargetSpec:
    terminal_index: int
    node_id: int
    nu: np.ndarray
    nu_sq_norm: float
    n_R: int
    observed_stat: float
    residual: np.ndarray
    mean: float = field(default=0.0)

    def y_at(self, t) -> np.ndarray:
        """Counterfactual response y(t) = t nu / |nu|^2 + P_perp y."""
        return np.multiply.outer(np.asarray(t, dtype=float), self.nu / self.nu_sq_norm) + self.residual


def build_target(tree: FittedTree, dataset: Dataset, terminal_index: int) -> TargetSpec:
    node = tree.terminal_node(terminal_index)
    members = node.region.members
    if len(members) == 0:
        raise ValueError("empty terminal region")
    n_R = len(members)
    nu = np.zeros(dataset.n)
    nu[members] = 1.0 / np.sqrt(n_R)
    nu_sq = float(nu @ nu)
    y = dataset.y
    stat = float(nu @ y)
    residual = y - stat * nu / nu_sq
    return TargetSpec(
        terminal_index=terminal_index,
        node_id=node.id,
        nu=_frozen(nu),
        nu_sq_norm=nu_sq,
        n_R=n_R,
        observed_stat=stat,
        residual=_frozen(residual),
        mean=float(y[members].mean()),
    )
