"""Shared split-search machinery for causal and regression trees.

Candidate thresholds per feature sit at weighted-quantile bucket
boundaries (at most `max_buckets` buckets). For every node the scan sorts
the selected feature columns once, forms prefix sums of the weighted
moments, and evaluates all candidates of all features in one vectorized
pass. Candidates are ordered by (feature index, threshold), so taking the
first maximum implements the deterministic tie-break.

Variance terms use the weighted sample variance with a Bessel correction
on the effective sample size (sum w)^2 / (sum w^2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


# =============================================================================
# Per-arm and per-leaf statistics
# =============================================================================

@dataclass(frozen=True)
class ArmStats:
    """Weighted outcome moments of one treatment arm inside a leaf."""

    n: int
    sum_w: float
    sum_wy: float
    sum_wyy: float
    sum_ww: float

    @staticmethod
    def from_data(y: np.ndarray, w: np.ndarray) -> "ArmStats":
        return ArmStats(
            n=len(y),
            sum_w=float(np.sum(w)),
            sum_wy=float(np.sum(w * y)),
            sum_wyy=float(np.sum(w * y * y)),
            sum_ww=float(np.sum(w * w)),
        )

    @property
    def mean(self) -> float:
        return self.sum_wy / self.sum_w

    @property
    def effective_n(self) -> float:
        return self.sum_w * self.sum_w / self.sum_ww if self.sum_ww > 0 else 0.0

    @property
    def variance(self) -> float:
        """Weighted sample variance, Bessel-corrected on the effective sample size."""
        if self.sum_w <= 0:
            return 0.0
        raw = max(self.sum_wyy / self.sum_w - self.mean ** 2, 0.0)
        n_eff = self.effective_n
        if n_eff <= 1.0:
            return 0.0
        return raw * n_eff / (n_eff - 1.0)


@dataclass(frozen=True)
class LeafStats:
    """Treated and control arm statistics of one (candidate) leaf."""

    treated: ArmStats
    control: ArmStats

    @staticmethod
    def from_data(y: np.ndarray, a: np.ndarray, w: np.ndarray) -> "LeafStats":
        y = np.asarray(y, dtype=float)
        a = np.asarray(a)
        w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
        t = a == 1
        return LeafStats(ArmStats.from_data(y[t], w[t]), ArmStats.from_data(y[~t], w[~t]))

    @property
    def n(self) -> int:
        return self.treated.n + self.control.n

    @property
    def total_weight(self) -> float:
        return self.treated.sum_w + self.control.sum_w

    @property
    def treated_fraction(self) -> float:
        return self.treated.n / self.n

    @property
    def tau_hat(self) -> float:
        return self.treated.mean - self.control.mean

    def variance_penalty(self) -> float:
        """S2_treated / p_hat + S2_control / (1 - p_hat)."""
        p = self.treated_fraction
        return self.treated.variance / p + self.control.variance / (1.0 - p)


def penalty_coefficient(n_tr: int, n_est: int) -> float:
    return 1.0 / n_tr + 1.0 / n_est


# =============================================================================
# Candidate thresholds
# =============================================================================

def bucket_cut_positions(x_sorted: np.ndarray, w_sorted: np.ndarray,
                         max_buckets: int) -> np.ndarray:
    """Candidate cut positions at weighted-quantile bucket boundaries.

    A cut position k means the first k sorted rows go left; the split
    threshold is x_sorted[k - 1] and ties always travel together.

    Returns:
        Sorted unique positions in (0, n).
    """
    n = len(x_sorted)
    if n < 2:
        return np.empty(0, dtype=np.intp)
    cw = np.cumsum(w_sorted)
    targets = np.arange(1, max_buckets) / max_buckets * cw[-1]
    idx = np.clip(np.searchsorted(cw, targets, side="left"), 0, n - 1)
    pos = np.searchsorted(x_sorted, x_sorted[idx], side="right")
    pos = np.unique(pos)
    return pos[(pos > 0) & (pos < n)]


# =============================================================================
# Vectorized node scans
# =============================================================================

class SplitCandidate(NamedTuple):
    gain: float
    feature: int
    threshold: float


def _sorted_prefixes(X: np.ndarray, feats: np.ndarray, *arrays: np.ndarray):
    """Sort each selected column and return (sorted x, list of sorted arrays)."""
    Xf = X[:, feats]
    order = np.argsort(Xf, axis=0, kind="stable")
    xs = np.take_along_axis(Xf, order, axis=0)
    return xs, [arr[order] for arr in arrays]


def _candidate_table(xs: np.ndarray, ws: np.ndarray, max_buckets: int):
    """Flat (column, cut position, threshold) table over all scanned features."""
    cols, cuts = [], []
    for j in range(xs.shape[1]):
        pos = bucket_cut_positions(xs[:, j], ws[:, j], max_buckets)
        if len(pos):
            cols.append(np.full(len(pos), j, dtype=np.intp))
            cuts.append(pos)
    if not cols:
        return None
    col = np.concatenate(cols)
    cut = np.concatenate(cuts)
    return col, cut, xs[cut - 1, col]


def best_causal_split(X: np.ndarray, y: np.ndarray, a: np.ndarray, w: np.ndarray,
                      feats: np.ndarray, *, min_treated: int, min_control: int,
                      max_buckets: int, penalty_coef: float) -> SplitCandidate | None:
    """Scan all candidate splits of a node and return the best by EMSE gain.

    The returned gain is the children's criterion contribution minus the
    parent's, with the squared-effect term normalized by the node weight.
    Candidates whose children violate the per-arm leaf minima are skipped.
    Returns None when no candidate satisfies the minima.
    """
    feats = np.sort(np.asarray(feats, dtype=np.intp))
    af = a.astype(float)
    xs, (ys, as_, ws) = _sorted_prefixes(X, feats, y, af, w)

    table = _candidate_table(xs, ws, max_buckets)
    if table is None:
        return None
    col, cut, thr = table

    wa = ws * as_
    prefix = {
        "w1": np.cumsum(wa, axis=0),
        "wy1": np.cumsum(wa * ys, axis=0),
        "wyy1": np.cumsum(wa * ys * ys, axis=0),
        "ww1": np.cumsum(wa * wa, axis=0),  # a is 0/1, so (wa)^2 == w^2 * a
        "n1": np.cumsum(as_, axis=0),
        "w": np.cumsum(ws, axis=0),
        "wy": np.cumsum(ws * ys, axis=0),
        "wyy": np.cumsum(ws * ys * ys, axis=0),
        "ww": np.cumsum(ws * ws, axis=0),
    }
    totals = {k: v[-1, :] for k, v in prefix.items()}

    left = {k: v[cut - 1, col] for k, v in prefix.items()}
    n = X.shape[0]
    l_n1 = left["n1"]
    l_n0 = cut - l_n1
    r_n1 = totals["n1"][col] - l_n1
    r_n0 = (n - cut) - r_n1
    valid = ((l_n1 >= min_treated) & (r_n1 >= min_treated)
             & (l_n0 >= min_control) & (r_n0 >= min_control))
    if not np.any(valid):
        return None

    def side_stats(s1_w, s1_wy, s1_wyy, s1_ww, n1, s_w, s_wy, s_wyy, s_ww, n_tot):
        # arm 1 then arm 0 (= all minus treated)
        return ((n1, s1_w, s1_wy, s1_wyy, s1_ww),
                (n_tot - n1, s_w - s1_w, s_wy - s1_wy, s_wyy - s1_wyy, s_ww - s1_ww))

    def arm_var(n_arm, sw, swy, swyy, sww):
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = swy / sw
            raw = np.maximum(swyy / sw - mean * mean, 0.0)
            n_eff = sw * sw / sww
            var = np.where(n_eff > 1.0, raw * n_eff / np.maximum(n_eff - 1.0, 1e-300), 0.0)
        return np.where(sw > 0, var, 0.0), np.where(sw > 0, mean, 0.0)

    def contribution(t_stats, c_stats, node_weight):
        (n1, w1, wy1, wyy1, ww1), (n0, w0, wy0, wyy0, ww0) = t_stats, c_stats
        var1, mean1 = arm_var(n1, w1, wy1, wyy1, ww1)
        var0, mean0 = arm_var(n0, w0, wy0, wyy0, ww0)
        tau = mean1 - mean0
        with np.errstate(divide="ignore", invalid="ignore"):
            p = n1 / (n1 + n0)
            penalty = penalty_coef * (var1 / p + var0 / (1.0 - p))
        return (w1 + w0) / node_weight * tau * tau - penalty

    node_weight = float(totals["w"][0])
    t_left, c_left = side_stats(left["w1"], left["wy1"], left["wyy1"], left["ww1"], l_n1,
                                left["w"], left["wy"], left["wyy"], left["ww"], cut)
    right = {k: totals[k][col] - left[k] for k in left}
    t_right, c_right = side_stats(right["w1"], right["wy1"], right["wyy1"], right["ww1"],
                                  r_n1, right["w"], right["wy"], right["wyy"], right["ww"],
                                  n - cut)

    with np.errstate(divide="ignore", invalid="ignore"):
        child_sum = contribution(t_left, c_left, node_weight) + contribution(
            t_right, c_right, node_weight)

    parent = LeafStats.from_data(y, a, w)
    parent_contrib = parent.tau_hat ** 2 - penalty_coef * parent.variance_penalty()

    gains = np.where(valid, child_sum - parent_contrib, -np.inf)
    best = int(np.argmax(gains))
    if not np.isfinite(gains[best]):
        return None
    return SplitCandidate(gain=float(gains[best]),
                          feature=int(feats[col[best]]),
                          threshold=float(thr[best]))


def best_regression_split(X: np.ndarray, y: np.ndarray, w: np.ndarray,
                          feats: np.ndarray, *, min_leaf: int,
                          max_buckets: int) -> SplitCandidate | None:
    """Best split by weighted squared-error reduction; None if no valid candidate."""
    feats = np.sort(np.asarray(feats, dtype=np.intp))
    xs, (ys, ws) = _sorted_prefixes(X, feats, y, w)
    table = _candidate_table(xs, ws, max_buckets)
    if table is None:
        return None
    col, cut, thr = table

    cw = np.cumsum(ws, axis=0)
    cwy = np.cumsum(ws * ys, axis=0)
    cwyy = np.cumsum(ws * ys * ys, axis=0)
    tw, twy, twyy = cw[-1, :], cwy[-1, :], cwyy[-1, :]

    n = X.shape[0]
    lw, lwy, lwyy = cw[cut - 1, col], cwy[cut - 1, col], cwyy[cut - 1, col]
    rw, rwy, rwyy = tw[col] - lw, twy[col] - lwy, twyy[col] - lwyy
    valid = (cut >= min_leaf) & ((n - cut) >= min_leaf) & (lw > 0) & (rw > 0)
    if not np.any(valid):
        return None

    def sse(sw, swy, swyy):
        return swyy - swy * swy / sw

    with np.errstate(divide="ignore", invalid="ignore"):
        gains = sse(tw[col], twy[col], twyy[col]) - sse(lw, lwy, lwyy) - sse(rw, rwy, rwyy)
    gains = np.where(valid, gains, -np.inf)
    best = int(np.argmax(gains))
    if not np.isfinite(gains[best]):
        return None
    return SplitCandidate(gain=float(gains[best]),
                          feature=int(feats[col[best]]),
                          threshold=float(thr[best]))
