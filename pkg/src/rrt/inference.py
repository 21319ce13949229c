"""Exact selective inference for terminal-region means of a randomized tree.

Target: ``theta = nu' mu = sqrt(n_R) mu_R`` with ``nu = 1_R / sqrt(n_R)``.
Conditionally on the selected splits along the leaf's path and on
``P_perp y``, the statistic ``t = nu' y`` has density proportional to
``phi(t; theta, sigma^2) F(t)`` where ``F`` multiplies one selection factor
per path level. Inference integrates that density on a fixed t-grid.

Every level factor is a Gaussian orthant or box probability with covariance
of the form ``tau^2 (I + rho 11')``. Writing such a vector as independent
coordinates plus one shared N(0, rho tau^2) term turns each factor into a
one-dimensional integral over the shared term; no generic multivariate
normal CDF is needed.

Sign convention: ``beta_k = G(s_k) - G(s*)`` (loser minus winner), so the
observed gap vector ``D = (G* + W*) - (G_k + W_k)`` has mean ``-beta`` and
covariance ``tau^2 (I + 11')``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import interpolate, optimize
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri

from .core import Dataset, FittedTree, TargetSpec, build_target
from .grow import COST_COMPLEXITY, FIXED_DEPTH, THRESHOLD, SplitTable, split_table, table_gains

FULL = "full"
CONDITIONED = "conditioned"
THRESHOLD_VARIANT = "threshold"
CC_VARIANT = "cc"
VARIANTS = (FULL, CONDITIONED, THRESHOLD_VARIANT, CC_VARIANT)

# columns whose Phi argument stays above this for every node are dropped (log Phi(8.5) ~ -1e-17)
_NEGLIGIBLE_Z = 8.5
_Z_RANGE = 10.0


class NumericalError(RuntimeError):
    pass


class UnboundedIntervalError(NumericalError):
    def __init__(self, side: str, limit: float):
        super().__init__(f"{side} confidence limit not found within {limit:g} sigma of the estimate")
        self.side = side


@lru_cache(maxsize=8)
def _gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _log_diff_ndtr(a, b):
    """log(Phi(b) - Phi(a)) for a <= b, stable in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty(a.shape)
    upper = a > 0  # both in the upper tail: use survival functions
    la, lb = log_ndtr(-b[upper]), log_ndtr(-a[upper])
    out[upper] = lb + np.log1p(-np.exp(la - lb))
    lo = ~upper
    la, lb = log_ndtr(a[lo]), log_ndtr(b[lo])
    with np.errstate(divide="ignore"):
        out[lo] = lb + np.log1p(-np.exp(la - lb))
    return out


def _log_box(mean, tau, rho=1.0, upper=math.inf, z_lo=None, n_nodes=257, chunk=4_000_000):
    """log P(0 < U_j < upper for all j), U ~ N(mean, tau^2 (I + rho 11')).

    ``mean`` is (m, r); rows are independent problems. ``z_lo`` optionally
    restricts the shared standardized term to ``z >= z_lo`` (one per row);
    the result is then the joint probability with that event.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    m, r = mean.shape
    sr = math.sqrt(rho)
    if z_lo is None and r == 1:
        s = tau * math.sqrt(1.0 + rho)
        if math.isinf(upper):
            return log_ndtr(mean[:, 0] / s)
        return _log_diff_ndtr(-mean[:, 0] / s, (upper - mean[:, 0]) / s)
    if z_lo is None and r == 0:
        return np.zeros(m)

    x, w = _gauss_legendre(n_nodes)
    dead = np.zeros(m, dtype=bool)
    if z_lo is None:
        lo = np.full(m, -_Z_RANGE)
    else:
        zl = np.broadcast_to(np.asarray(z_lo, float), (m,))
        dead = zl == np.inf
        lo = np.maximum(np.where(dead, 0.0, zl), -_Z_RANGE)
    hi = np.maximum(lo, 0.0) + _Z_RANGE
    half = 0.5 * (hi - lo)
    Z = (lo + half)[:, None] + half[:, None] * x[None, :]  # (m, K)
    base = np.log(half)[:, None] + np.log(w)[None, :] - 0.5 * Z**2 - 0.5 * math.log(2 * math.pi)
    base[dead] = -np.inf

    a = mean / tau  # standardized lower-limit margins
    total = base.copy()
    if r:
        K = len(x)
        step = max(1, chunk // max(1, K * r))
        for s0 in range(0, m, step):
            sl = slice(s0, min(m, s0 + step))
            A = a[sl]
            zmin = Z[sl].min(axis=1)
            if math.isinf(upper):
                keep = (A + sr * zmin[:, None]).min(axis=0) <= _NEGLIGIBLE_Z
                A = A[:, keep]
                if A.shape[1] == 0:
                    continue
                arg = A[:, None, :] + sr * Z[sl][:, :, None]
                total[sl] += log_ndtr(arg).sum(axis=2)
            else:
                B = (upper - mean[sl]) / tau
                lo_arg = -A[:, None, :] - sr * Z[sl][:, :, None]
                hi_arg = B[:, None, :] - sr * Z[sl][:, :, None]
                total[sl] += _log_diff_ndtr(lo_arg, hi_arg).sum(axis=2)
    return logsumexp(total, axis=1)


# ---------------------------------------------------------------------------
# level factors (public, probability scale)


def level_prob_full(beta, tau: float, n_nodes: int = 257):
    """P(W* - W_k >= beta_k for every loser k), W i.i.d. N(0, tau^2).

    ``beta`` holds loser-minus-winner gain differences, shape (..., d-1).
    Equivalently the N(-beta, tau^2 (I + 11')) mass of the positive orthant.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1] == 0:
        return np.ones(beta.shape[:-1]) if beta.ndim > 1 else 1.0
    flat = beta.reshape(-1, beta.shape[-1])
    out = np.exp(_log_box(-flat, tau, 1.0, n_nodes=n_nodes)).reshape(beta.shape[:-1])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Conditioning:
    """Split of the loser indices at one level into free and conditioned sets."""

    free: np.ndarray  # L: indices of the r smallest gaps
    fixed: np.ndarray  # I: indices of the remaining (largest) gaps
    fixed_values: np.ndarray  # observed D on I
    bound: float  # [D]_(r+1), or +inf when I is empty

    @property
    def r(self) -> int:
        return len(self.free)


def choose_conditioning(d_vector, r: int) -> Conditioning:
    if r < 1:
        raise ValueError("r must be >= 1")
    D = np.asarray(d_vector, dtype=float)
    order = np.argsort(D, kind="stable")
    k = min(r, len(D))
    free, fixed = np.sort(order[:k]), np.sort(order[k:])
    bound = float(D[order[k]]) if k < len(D) else math.inf
    return Conditioning(free, fixed, D[fixed], bound)


def _log_gamma_from_x(x_fixed_sum, q, m_free, k, tau, bound, n_nodes=257):
    """Combine density and box parts given sum(x), x' inv-ish quadratic q and free means."""
    if k == 0:
        log_dens = np.zeros(len(m_free))
    else:
        log_dens = -q / (2 * tau**2) - 0.5 * (k * math.log(2 * math.pi * tau**2) + math.log1p(k))
    cm = m_free + (x_fixed_sum / (1.0 + k))[:, None]
    return log_dens + _log_box(cm, tau, 1.0 / (1.0 + k), bound, n_nodes=n_nodes)


def level_prob_conditioned(beta, tau: float, cond: Conditioning, n_nodes: int = 257):
    """Density of the conditioned gaps times the box probability of the free ones.

    Not a probability. With ``cond.fixed`` empty this is ``level_prob_full``.
    """
    beta = np.asarray(beta, dtype=float)
    flat = beta.reshape(-1, beta.shape[-1])
    x = cond.fixed_values[None, :] + flat[:, cond.fixed]  # D_I - mean_I
    k = x.shape[1]
    xs = x.sum(axis=1)
    if k:
        q = ((x - x.mean(axis=1, keepdims=True)) ** 2).sum(axis=1) + (k / (1.0 + k)) * (xs / k) ** 2
    else:
        q = np.zeros(len(x))
    out = np.exp(_log_gamma_from_x(xs, q, -flat[:, cond.free], k, tau, cond.bound, n_nodes)).reshape(beta.shape[:-1])
    return float(out) if out.ndim == 0 else out


def level_prob_threshold(beta, gain_star, lam: float, tau: float, n_nodes: int = 257):
    """P(argmax is s* and G* + W* >= lam)."""
    beta = np.asarray(beta, dtype=float)
    flat = beta.reshape(-1, beta.shape[-1])
    gs = np.broadcast_to(np.asarray(gain_star, float).reshape(-1), (flat.shape[0],))
    out = np.exp(_log_threshold(flat, gs, lam, tau, n_nodes)).reshape(beta.shape[:-1])
    return float(out) if out.ndim == 0 else out


def _log_threshold(beta2d, gain_star, lam, tau, n_nodes=257):
    z_lo = (lam - gain_star) / tau
    if beta2d.shape[1] == 0:
        return log_ndtr(-z_lo)
    return _log_box(-beta2d, tau, 1.0, z_lo=z_lo, n_nodes=n_nodes)


def level_prob_cc(beta, gm, lam: float, tau: float, n_nodes: int = 257):
    """Block-diagonal case: Phi((gm - lam)/tau) times the plain orthant factor."""
    return ndtr((np.asarray(gm, float) - lam) / tau) * level_prob_full(beta, tau, n_nodes)


# ---------------------------------------------------------------------------
# gains along the path as quadratics in t


def _gain_coefs(tab: SplitTable, yP: np.ndarray, nuP: np.ndarray) -> np.ndarray:
    """Coefficients (d, 3) of G(y + delta nu; P, s) = c0 + c1 delta + c2 delta^2."""
    n_P = len(yP)
    yc = yP - yP.mean()
    S_l = tab.left_sums(yc)
    A_l = tab.left_sums(nuP)
    S_P, A_P = yc.sum(), nuP.sum()
    S_r, A_r = S_P - S_l, A_P - A_l
    n_l = tab.orders.astype(float)
    n_r = n_P - n_l
    rt = math.sqrt(n_P)
    c0 = (S_l**2 / n_l + S_r**2 / n_r - S_P**2 / n_P) / rt
    c1 = 2 * (S_l * A_l / n_l + S_r * A_r / n_r - S_P * A_P / n_P) / rt
    c2 = (A_l**2 / n_l + A_r**2 / n_r - A_P**2 / n_P) / rt
    return np.stack([c0, c1, c2], axis=1)


def _poly(coef, deltas):
    deltas = np.asarray(deltas, float)
    return coef[..., 0, None] + coef[..., 1, None] * deltas + coef[..., 2, None] * deltas**2


def _table_from_trace(X, trace) -> SplitTable:
    Xm = X[trace.region.members]
    return SplitTable(trace.features, trace.orders, trace.thresholds, np.argsort(Xm, axis=0, kind="stable"))


@dataclass(frozen=True, eq=False)
class LevelData:
    """One examined region on the leaf's path (or the leaf itself when its
    stop decision was random)."""

    node_id: int
    depth: int
    members: np.ndarray
    tau: float
    chosen_index: int
    d_vector: np.ndarray
    rand_draws: np.ndarray
    gain_coefs: np.ndarray  # (d, 3), all candidates
    split: bool = True  # False: terminal whose stop event is part of the selection
    lam: float = -math.inf
    gm_value: float | None = None
    threshold_draw: float | None = None
    conditioning: Conditioning | None = None
    table: SplitTable | None = None

    @property
    def d(self) -> int:
        return len(self.gain_coefs)

    @property
    def losers(self) -> np.ndarray:
        return np.delete(np.arange(self.d), self.chosen_index)

    @property
    def beta_coefs(self) -> np.ndarray:
        """(d-1, 3) coefficients of beta_k(delta) = G_k - G* over losers."""
        return self.gain_coefs[self.losers] - self.gain_coefs[self.chosen_index]

    def beta(self, deltas) -> np.ndarray:
        """(len(deltas), d-1) loser-minus-winner gain differences."""
        return _poly(self.beta_coefs, deltas).T

    def gain_star(self, deltas) -> np.ndarray:
        return _poly(self.gain_coefs[self.chosen_index], deltas)


def path_levels(tree: FittedTree, dataset: Dataset, target: TargetSpec, r: int | None = None) -> list[LevelData]:
    """Level data for every selection event that involves the target leaf."""
    X, y = dataset.X, dataset.y
    lam = float(tree.stopping.get("lam", -math.inf))
    leaf = tree.nodes[target.node_id]
    nodes = [(nd, True) for nd in tree.path(leaf.id)]
    if leaf.trace is not None and leaf.stop_reason in (THRESHOLD, COST_COMPLEXITY):
        nodes.append((leaf, False))
    out = []
    for nd, split in nodes:
        tr = nd.trace
        m = nd.region.members
        tab = _table_from_trace(X, tr)
        coefs = _gain_coefs(tab, y[m], target.nu[m] / target.nu_sq_norm)
        cond = choose_conditioning(tr.d_vector, r) if (r is not None and split) else None
        out.append(
            LevelData(
                nd.id, nd.depth, m, tr.tau, tr.chosen_index, tr.d_vector, tr.rand_draws, coefs,
                split=split, lam=lam, gm_value=tr.gm_value, threshold_draw=tr.threshold_draw,
                conditioning=cond, table=tab,
            )
        )
    return out


def gains_along_path(levels: list[LevelData], target: TargetSpec, t, dataset: Dataset) -> list[np.ndarray]:
    """Loser-minus-winner gain differences at y(t), recomputed from scratch."""
    yt = target.y_at(t)
    out = []
    for lv in levels:
        g = table_gains(lv.table, yt[lv.members])
        out.append(g[lv.losers] - g[lv.chosen_index])
    return out


def _gm_on_grid(X, y, nu, members, deltas, depth, min_split, min_leaf):
    """GM(y + delta nu; P) for every delta, re-growing the probe tree per delta."""
    m = len(deltas)
    red = np.zeros(m)
    terms = np.ones(m)

    def rec(mem, idx, dep):
        if dep <= 0 or len(mem) < min_split:
            return
        tab = split_table(X, mem, min_leaf)
        if tab.d == 0:
            return
        coefs = _gain_coefs(tab, y[mem], nu[mem])
        G = _poly(coefs, deltas[idx])  # (d, len(idx))
        k = np.argmax(G, axis=0)
        red[idx] += G[k, np.arange(len(idx))] * math.sqrt(len(mem))
        terms[idx] += 1
        for kk in np.unique(k):
            sub = idx[k == kk]
            go_left = X[mem, tab.features[kk]] <= tab.thresholds[kk]
            rec(mem[go_left], sub, dep - 1)
            rec(mem[~go_left], sub, dep - 1)

    rec(members, np.arange(m), depth)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(terms > 1, red / (terms - 1), 0.0)


# ---------------------------------------------------------------------------
# per-level log factors on the grid


def _log_conditioned_grid(lv: LevelData, deltas, n_nodes, verify=False):
    cond = lv.conditioning
    bc = lv.beta_coefs
    k = len(cond.fixed)
    m_free = -_poly(bc[cond.free], deltas).T  # (m, r)
    if k == 0:
        return _log_gamma_from_x(np.zeros(len(deltas)), np.zeros(len(deltas)), m_free, 0, lv.tau, cond.bound, n_nodes)
    e = bc[cond.fixed].copy()
    e[:, 0] += cond.fixed_values  # x_j(delta) = D_j + beta_j(delta)
    if verify:
        x = _poly(e, deltas).T
        xs = x.sum(axis=1)
        q = ((x - x.mean(axis=1, keepdims=True)) ** 2).sum(axis=1) + (k / (1.0 + k)) * (xs / k) ** 2
    else:
        ebar = e.mean(axis=0)
        ec = e - ebar
        M = ec.T @ ec + (k / (1.0 + k)) * np.outer(ebar, ebar)
        V = np.stack([np.ones_like(deltas), deltas, deltas**2])  # (3, m)
        q = np.einsum("im,ij,jm->m", V, M, V)
        q = np.maximum(q, 0.0)
        xs = k * (ebar @ V)
    return _log_gamma_from_x(xs, q, m_free, k, lv.tau, cond.bound, n_nodes)


def _on_knots(fn, deltas, step):
    """Evaluate ``fn`` on every ``step``-th delta and spline onto the rest.

    The orthant integrals are smooth in delta, so this trades a negligible
    interpolation error for a ``step``-fold saving. Falls back to direct
    evaluation when any knot value is non-finite.
    """
    m = len(deltas)
    if step <= 1 or m < 4 * step:
        return fn(deltas)
    idx = np.unique(np.r_[np.arange(0, m, step), m - 1])
    vals = fn(deltas[idx])
    if not np.isfinite(vals).all():
        return fn(deltas)
    return interpolate.CubicSpline(deltas[idx], vals)(deltas)


def _level_log_factor(lv: LevelData, deltas, variant, n_nodes, gm_grid=None, verify=False, step=1):
    if not lv.split:
        if variant == THRESHOLD_VARIANT:
            # leaf stopped: every randomized gain stayed below lam
            G = _poly(lv.gain_coefs, deltas)
            return log_ndtr((lv.lam - G) / lv.tau).sum(axis=0)
        return log_ndtr((lv.lam - gm_grid) / lv.tau)
    if verify:
        step = 1
    if variant == CONDITIONED:
        if len(lv.conditioning.free) <= 1:
            return _log_conditioned_grid(lv, deltas, n_nodes, verify)
        return _on_knots(lambda d: _log_conditioned_grid(lv, d, n_nodes), deltas, step)
    if variant == THRESHOLD_VARIANT:
        return _on_knots(
            lambda d: _log_threshold(lv.beta(d), lv.gain_star(d), lv.lam, lv.tau, n_nodes), deltas, step
        )
    if lv.d > 1:
        out = _on_knots(lambda d: _log_box(-lv.beta(d), lv.tau, 1.0, n_nodes=n_nodes), deltas, step)
    else:
        out = np.zeros(len(deltas))
    if variant == CC_VARIANT and lv.lam > -math.inf:
        out = out + log_ndtr((gm_grid - lv.lam) / lv.tau)
    return out


# ---------------------------------------------------------------------------


def _default_variant(stopping: dict) -> str:
    kind = stopping.get("kind", FIXED_DEPTH)
    return {THRESHOLD: THRESHOLD_VARIANT, COST_COMPLEXITY: CC_VARIANT}.get(kind, CONDITIONED)


class PivotEvaluator:
    """Frozen conditioning data for one leaf; maps a hypothesized mean to a pivot.

    Internal math is on the ``nu' mu`` scale; :meth:`invert_ci` reports on the
    leaf-mean scale.
    """

    def __init__(
        self,
        tree: FittedTree,
        dataset: Dataset,
        terminal_index: int,
        sigma: float,
        variant: str | None = None,
        r: int = 1,
        halfwidth: float = 15.0,
        grid_size: int = 4001,
        gl_nodes: int = 257,
        knot_step: int = 32,
        verify: bool = False,
    ):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        variant = variant or _default_variant(tree.stopping)
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        kind = tree.stopping.get("kind", FIXED_DEPTH)
        lam = float(tree.stopping.get("lam", -math.inf))
        if variant in (FULL, CONDITIONED) and kind != FIXED_DEPTH and lam > -math.inf:
            raise ValueError(f"variant {variant!r} does not account for the {kind} stopping rule")
        if variant == THRESHOLD_VARIANT and kind != THRESHOLD:
            raise ValueError("threshold variant needs a tree grown with the threshold rule")
        if variant == CC_VARIANT and kind != COST_COMPLEXITY:
            raise ValueError("cc variant needs a tree grown with the cost-complexity rule")
        if grid_size % 2 == 0:
            grid_size += 1

        self.tree = tree
        self.dataset = dataset
        self.sigma = float(sigma)
        self.variant = variant
        self.r = int(r)
        self.gl_nodes = gl_nodes
        self.knot_step = int(knot_step)
        self.target = build_target(tree, dataset, terminal_index)
        self.levels = path_levels(tree, dataset, self.target, r=self.r if variant == CONDITIONED else None)
        self.scale = self.sigma * math.sqrt(self.target.nu_sq_norm)
        self._verify = verify

        for attempt in range(2):
            self.halfwidth, self.grid_size = halfwidth, grid_size
            self.deltas = np.linspace(-halfwidth * self.scale, halfwidth * self.scale, grid_size)
            self.grid = self.target.observed_stat + self.deltas
            self.log_selection = self._log_selection()
            if np.isfinite(self.log_selection).any():
                break
            halfwidth, grid_size = 2 * halfwidth, 2 * grid_size - 1
        else:
            raise NumericalError("selection factor underflows on the whole grid")
        self.center = grid_size // 2
        if not np.isfinite(self.log_selection[self.center]):
            raise NumericalError("selection factor vanishes at the observed statistic")

    @property
    def observed_stat(self) -> float:
        return self.target.observed_stat

    @property
    def n_R(self) -> int:
        return self.target.n_R

    def _log_selection(self) -> np.ndarray:
        total = np.zeros(len(self.deltas))
        hp = self.tree.hyperparams
        for lv in self.levels:
            gm_grid = None
            if self.variant == CC_VARIANT and lv.lam > -math.inf:
                probe = self.tree.stopping.get("probe_depth") or hp["max_depth"]
                nu = self.target.nu / self.target.nu_sq_norm
                gm_grid = _gm_on_grid(
                    self.dataset.X, self.dataset.y, nu, lv.members, self.deltas, probe,
                    hp["min_split_size"], hp["min_leaf_size"],
                )
            total += _level_log_factor(
                lv, self.deltas, self.variant, self.gl_nodes, gm_grid, self._verify, self.knot_step
            )
        return total

    def selection_factor(self, t) -> np.ndarray:
        """F(t) evaluated directly (off-grid); used by tests and diagnostics."""
        deltas = np.atleast_1d(np.asarray(t, float)) - self.observed_stat
        total = np.zeros(len(deltas))
        for lv in self.levels:
            if self.variant == CC_VARIANT and lv.lam > -math.inf:
                raise NotImplementedError("off-grid evaluation is not available for the cc variant")
            total += _level_log_factor(lv, deltas, self.variant, self.gl_nodes)
        return np.exp(total)

    def _log_weights(self, theta: float) -> np.ndarray:
        return self.log_selection - (self.grid - theta) ** 2 / (2 * self.scale**2)

    def tails(self, theta: float) -> tuple[float, float]:
        """(lower, upper) conditional tail masses at the observed statistic."""
        lw = self._log_weights(theta)
        c = self.center
        lo = lw[: c + 1].copy()
        hi = lw[c:].copy()
        lo[[0, -1]] += math.log(0.5)
        hi[[0, -1]] += math.log(0.5)
        shift = max(lo.max(), hi.max())
        if not np.isfinite(shift):
            raise NumericalError("conditional density vanishes on the grid")
        a = math.fsum(np.exp(lo - shift))
        b = math.fsum(np.exp(hi - shift))
        return a / (a + b), b / (a + b)

    def pivot(self, theta: float) -> float:
        return pivot(self, theta)

    def p_value(self) -> float:
        return p_value(self)

    def invert_ci(self, alpha: float = 0.1, allow_unbounded: bool = False) -> tuple[float, float]:
        return invert_ci(self, alpha, allow_unbounded=allow_unbounded)

    def diagnostics(self) -> dict:
        return {
            "grid_halfwidth": self.halfwidth,
            "grid_size": self.grid_size,
            "gl_nodes": self.gl_nodes,
            "levels": len(self.levels),
            "log_selection_at_obs": float(self.log_selection[self.center]),
        }


def pivot(evaluator: PivotEvaluator, mu0: float) -> float:
    """Selection-adjusted CDF of the observed statistic at ``nu' mu = mu0``."""
    lo, _ = evaluator.tails(mu0)
    return min(1.0, max(0.0, lo))


def p_value(evaluator: PivotEvaluator) -> float:
    """Two-sided: 2 min(P, 1 - P) at ``nu' mu = 0``."""
    lo, hi = evaluator.tails(0.0)
    return min(1.0, 2 * min(lo, hi))


def invert_ci(
    evaluator: PivotEvaluator,
    alpha: float = 0.1,
    max_sigmas: float = 50.0,
    xtol: float = 1e-6,
    allow_unbounded: bool = False,
):
    """Equal-tailed interval for the leaf mean, by root finding on the pivot.

    Raises UnboundedIntervalError when a limit is not bracketed within
    ``max_sigmas`` standard errors of the observed statistic, unless
    ``allow_unbounded`` is set, in which case that side is reported as inf.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s = evaluator.scale
    t0 = evaluator.observed_stat
    z = float(ndtri(1 - alpha / 2))
    limit = max_sigmas * s

    def find(target, start, side):
        # f decreasing in theta: f(a) > 0 > f(b)
        def f(th):
            lo, hi = evaluator.tails(th)
            return lo - target if target < 0.5 else (1 - target) - hi

        step = max(z, 0.5) * s
        a = b = start
        fa = fb = f(start)
        while fa < 0:
            a -= step
            step *= 2
            if a < t0 - limit:
                raise UnboundedIntervalError(side, max_sigmas)
            fa = f(a)
        step = max(z, 0.5) * s
        while fb > 0:
            b += step
            step *= 2
            if b > t0 + limit:
                raise UnboundedIntervalError(side, max_sigmas)
            fb = f(b)
        if fa == 0:
            return a
        if fb == 0:
            return b
        return optimize.brentq(f, a, b, xtol=xtol * s, rtol=1e-12)

    def side(target, start, name, inf):
        try:
            return find(target, start, name)
        except UnboundedIntervalError:
            if allow_unbounded:
                return inf
            raise

    L = side(1 - alpha / 2, t0 - z * s, "lower", -math.inf)
    U = side(alpha / 2, t0 + z * s, "upper", math.inf)
    k = math.sqrt(evaluator.n_R)
    return L / k, U / k


@dataclass
class LeafInterval:
    """One inference result row; shared by the selective and baseline methods."""

    leaf: int
    node_id: int
    n_R: int
    mean: float
    lower: float
    upper: float
    p_value: float
    method: str
    variant: str = ""
    r: int | None = None
    tau: float | None = None
    sigma: float = float("nan")
    status: str = "ok"

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_row(self) -> dict:
        return asdict(self)


def infer_leaf(
    tree: FittedTree,
    dataset: Dataset,
    terminal_index: int,
    sigma: float,
    alpha: float = 0.1,
    variant: str | None = None,
    r: int = 1,
    **kw,
) -> LeafInterval:
    ev = PivotEvaluator(tree, dataset, terminal_index, sigma, variant=variant, r=r, **kw)
    L, U = ev.invert_ci(alpha, allow_unbounded=True)
    status = "ok" if math.isfinite(L) and math.isfinite(U) else "unbounded"
    nd = tree.terminal_node(terminal_index)
    taus = {lv.tau for lv in ev.levels}
    return LeafInterval(
        leaf=terminal_index,
        node_id=nd.id,
        n_R=ev.n_R,
        mean=ev.target.mean,
        lower=L,
        upper=U,
        p_value=ev.p_value(),
        method="rrt",
        variant=ev.variant,
        r=ev.r if ev.variant == CONDITIONED else None,
        tau=taus.pop() if len(taus) == 1 else None,
        sigma=float(sigma),
        status=status,
    )


def infer_tree(tree: FittedTree, dataset: Dataset, sigma: float, alpha: float = 0.1, **kw) -> list[LeafInterval]:
    """Selective intervals for every terminal region, in terminal order.

    A leaf whose computation fails numerically yields a row with NaN limits
    and the error in ``status`` rather than aborting the whole tree.
    """
    out = []
    for i, nid in enumerate(tree.terminal_ids):
        try:
            out.append(infer_leaf(tree, dataset, i, sigma, alpha, **kw))
        except NumericalError as e:
            nd = tree.nodes[nid]
            nan = float("nan")
            out.append(
                LeafInterval(i, nid, nd.region.size, nd.mean, nan, nan, nan, "rrt", sigma=float(sigma), status=f"error: {e}")
            )
    return out


def estimate_sigma(dataset: Dataset, max_depth: int = 4, min_leaf_size: int = 10, folds: int = 5, seed: int = 0) -> float:
    """Root mean squared out-of-fold residual of deterministic CART.

    A plug-in only: the exact guarantees assume the noise sd is known.
    Cross-fitting keeps the estimate from shrinking with tree size; it errs
    on the large side when the fit misses signal.
    """
    from .grow import GrowConfig, grow, predict_many

    n = dataset.n
    if n < 2 * folds:
        raise ValueError("not enough observations to estimate sigma")
    cfg = GrowConfig(max_depth=max_depth, min_split_size=2 * min_leaf_size, min_leaf_size=min_leaf_size, tau=0.0)
    fold = np.random.default_rng(seed).permutation(n) % folds
    resid = np.empty(n)
    for f in range(folds):
        test = fold == f
        train = Dataset(dataset.X[~test], dataset.y[~test])
        tree = grow(train, cfg)
        resid[test] = dataset.y[test] - predict_many(tree, dataset.X[test])
    return float(math.sqrt(resid @ resid / n))
