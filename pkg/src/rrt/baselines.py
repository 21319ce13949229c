"""Comparison methods: naive Wald intervals and UV (data fission) intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .core import Dataset, FittedTree
from .grow import GrowConfig, grow
from .inference import LeafInterval


def _wald(mean: float, n: int, sd: float, alpha: float) -> tuple[float, float, float]:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    se = sd / math.sqrt(n)
    half = float(ndtri(1 - alpha / 2)) * se if alpha < 1 else 0.0
    pval = float(2 * ndtr(-abs(mean) / se))
    return mean - half, mean + half, pval


def naive_ci(tree: FittedTree, dataset: Dataset, terminal: int, sigma: float, alpha: float = 0.1) -> tuple[float, float]:
    """Wald interval ignoring selection: ybar_R +- z sigma / sqrt(n_R)."""
    nd = tree.terminal_node(terminal)
    members = nd.region.members
    if len(members) == 0:
        raise ValueError("empty terminal region")
    lo, hi, _ = _wald(float(dataset.y[members].mean()), len(members), sigma, alpha)
    return lo, hi


def naive_intervals(tree: FittedTree, dataset: Dataset, sigma: float, alpha: float = 0.1) -> list[LeafInterval]:
    out = []
    for i, nid in enumerate(tree.terminal_ids):
        members = tree.nodes[nid].region.members
        m = float(dataset.y[members].mean())
        lo, hi, pv = _wald(m, len(members), sigma, alpha)
        out.append(LeafInterval(i, nid, len(members), m, lo, hi, pv, "naive", sigma=float(sigma)))
    return out


@dataclass(frozen=True)
class UVPair:
    u: np.ndarray
    v: np.ndarray
    gamma: float

    def reconstruct(self) -> np.ndarray:
        """(u + gamma v) / (1 + gamma), which equals y."""
        return (self.u + self.gamma * self.v) / (1 + self.gamma)


def uv_decompose(y, sigma: float, gamma: float, rng) -> UVPair:
    """U = y + W, V = y - W / gamma with W ~ N(0, sigma^2 gamma I)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(rng)
    w = rng.normal(0.0, sigma * math.sqrt(gamma), size=y.shape)
    return UVPair(u=y + w, v=y - w / gamma, gamma=float(gamma))


def uv_pipeline(
    dataset: Dataset,
    gamma: float,
    grow_config: GrowConfig,
    sigma: float,
    alpha: float = 0.1,
    rng=None,
) -> tuple[FittedTree, list[LeafInterval]]:
    """Grow deterministic CART on U, then Wald intervals from V.

    The returned tree's terminal means are U-means, so predictions come from
    the fitting copy only.
    """
    pair = uv_decompose(dataset.y, sigma, gamma, rng)
    tree = grow(dataset.with_response(pair.u), grow_config.deterministic())
    sd = sigma * math.sqrt(1 + 1 / gamma)
    out = []
    for i, nid in enumerate(tree.terminal_ids):
        members = tree.nodes[nid].region.members
        m = float(pair.v[members].mean())
        lo, hi, pv = _wald(m, len(members), sd, alpha)
        status = "ok" if len(members) >= 2 else "small_leaf"
        out.append(LeafInterval(i, nid, len(members), m, lo, hi, pv, f"uv({gamma:g})", sigma=float(sigma), status=status))
    return tree, out
