"""Honest causal tree.

Structure is chosen on a training half, per-leaf effects are estimated on
a disjoint estimation half. Splits maximize the estimated EMSE criterion:
homogeneous effects within leaves are rewarded through the squared leaf
effect, estimator variance is charged per leaf. The grown tree is pruned
by cost-complexity with the criterion cross-validated over folds of the
training half, and leaves too thin on the estimation half are collapsed
into their parents so every leaf holds the per-arm minima on both halves.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass, field

from .core import HistoryMatrix
from .errors import DegenerateFitError
from .seeding import derive_seed, rng_from
from .splitting import (LeafStats, SplitCandidate, best_causal_split,
                        penalty_coefficient)


# =============================================================================
# Parameters and records
# =============================================================================

@dataclass(frozen=True)
class TreeParams:
    """Causal tree hyperparameters.

    Defaults: at least 10 treated and 10 control patients per leaf, at
    most 20 split buckets per feature, 5 pruning folds, and a 50/50
    train/estimation split.
    """

    min_treated_per_leaf: int = 10
    min_control_per_leaf: int = 10
    max_split_buckets: int = 20
    cv_folds: int = 5
    honest_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.min_treated_per_leaf < 1 or self.min_control_per_leaf < 1:
            raise ValueError("leaf minima must be >= 1")
        if self.max_split_buckets < 2:
            raise ValueError("max_split_buckets must be >= 2")
        if not 0.0 < self.honest_fraction < 1.0:
            raise ValueError("honest_fraction must be in (0, 1)")
        if self.cv_folds < 1:
            raise ValueError("cv_folds must be >= 1")

    def to_dict(self) -> dict:
        return {
            "min_treated_per_leaf": self.min_treated_per_leaf,
            "min_control_per_leaf": self.min_control_per_leaf,
            "max_split_buckets": self.max_split_buckets,
            "cv_folds": self.cv_folds,
            "honest_fraction": self.honest_fraction,
            "rng_seed": self.rng_seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TreeParams":
        return TreeParams(**d)


@dataclass(frozen=True)
class SplitRule:
    """Numeric split: rows with value <= threshold go left. One-hot columns
    split the same way, so categorical levels route as 0/1 thresholds."""

    feature: int
    threshold: float


@dataclass
class LeafRecord:
    """Estimation-half statistics of one leaf."""

    tau_hat: float
    n_treated: int
    n_control: int
    var_treated: float
    var_control: float
    sum_weights_treated: float
    sum_weights_control: float


# =============================================================================
# Standalone operations
# =============================================================================

def honest_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split indices 0..n-1 into disjoint (train, estimation) index sets.

    The training set holds round(fraction * n) indices, rounding halves to
    even (so n=5001 at 0.5 gives 2500 train / 2501 estimation), clamped so
    both halves are non-empty. Deterministic given the seed.
    """
    if n < 2:
        raise ValueError("need at least two rows to honest-split")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def emse_split_gain(parent_stats: LeafStats, left_stats: LeafStats,
                    right_stats: LeafStats, n_tr: int, n_est: int) -> float:
    """Criterion improvement from splitting a node into two children.

    Children's contribution minus the parent's, where a leaf contributes
    its weight-share times tau_hat squared minus
    (1/n_tr + 1/n_est) * (S2_treated / p_hat + S2_control / (1 - p_hat)).
    A split is worth keeping only when this is positive.
    """
    for stats in (left_stats, right_stats, parent_stats):
        if stats.treated.n == 0 or stats.control.n == 0:
            raise ValueError("every candidate leaf needs both treatment arms")
    c = penalty_coefficient(n_tr, n_est)
    w_parent = parent_stats.total_weight

    def contribution(stats: LeafStats) -> float:
        return (stats.total_weight / w_parent * stats.tau_hat ** 2
                - c * stats.variance_penalty())

    return contribution(left_stats) + contribution(right_stats) - contribution(parent_stats)


def leaf_hte(outcomes: np.ndarray, treatments: np.ndarray, weights: np.ndarray,
             members: np.ndarray) -> float:
    """Weighted mean outcome difference, treated minus control, within a leaf."""
    y = np.asarray(outcomes, dtype=float)[members]
    a = np.asarray(treatments)[members]
    w = np.asarray(weights, dtype=float)[members]
    treated = a == 1
    if not treated.any() or treated.all():
        raise ValueError("leaf effect needs at least one treated and one control member")
    wt, wc = w[treated], w[~treated]
    return float((wt @ y[treated]) / wt.sum() - (wc @ y[~treated]) / wc.sum())


def predict_tree(tree: "CausalTree", h: np.ndarray) -> float:
    """Leaf effect of the unique leaf containing history row h."""
    return float(tree.predict(np.asarray(h, dtype=float).reshape(1, -1))[0])


# =============================================================================
# Tree object
# =============================================================================

class CausalTree:
    """Fitted honest causal tree over flat node arrays.

    Node i is internal when node_feature[i] >= 0; leaves carry a
    LeafRecord estimated on the estimation half.
    """

    def __init__(self, *, node_feature, node_threshold, node_left, node_right,
                 leaf_records, train_indices, est_indices, params, n_features,
                 leaf_est_members=None, growth_touched_indices=None, fit_refs=None):
        self.node_feature = np.asarray(node_feature, dtype=np.int32)
        self.node_threshold = np.asarray(node_threshold, dtype=float)
        self.node_left = np.asarray(node_left, dtype=np.int32)
        self.node_right = np.asarray(node_right, dtype=np.int32)
        self.leaf_records: list[LeafRecord | None] = leaf_records
        self.train_indices = np.asarray(train_indices, dtype=np.intp)
        self.est_indices = np.asarray(est_indices, dtype=np.intp)
        self.params = params
        self.n_features = n_features
        # Global row ids of estimation-half members per leaf node (kernel weights).
        self.leaf_est_members: list[np.ndarray | None] = (
            leaf_est_members if leaf_est_members is not None
            else [None] * len(self.node_feature))
        # Every row index examined while searching for splits.
        self.growth_touched_indices = (
            np.asarray(growth_touched_indices, dtype=np.intp)
            if growth_touched_indices is not None else self.train_indices.copy())
        self._fit_refs = fit_refs  # (X, y, a, w) used at fit time; not serialized

    # -- structure ----------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.node_feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.node_feature < 0))

    def leaf_node_ids(self) -> np.ndarray:
        return np.nonzero(self.node_feature < 0)[0]

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            for child in (self.node_left[i], self.node_right[i]):
                if child >= 0:
                    depth[child] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    # -- routing and prediction ---------------------------------------------

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of X."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"expected (n, {self.n_features}) inputs, got {X.shape}")
        cur = np.zeros(len(X), dtype=np.intp)
        while True:
            feat = self.node_feature[cur]
            active = np.nonzero(feat >= 0)[0]
            if len(active) == 0:
                return cur
            node = cur[active]
            go_left = X[active, feat[active]] <= self.node_threshold[node]
            cur[active] = np.where(go_left, self.node_left[node], self.node_right[node])

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Leaf tau_hat for every row of X."""
        leaf_tau = np.full(self.n_nodes, np.nan)
        for i, rec in enumerate(self.leaf_records):
            if rec is not None:
                leaf_tau[i] = rec.tau_hat
        return leaf_tau[self.apply(X)]

    # -- serialization -------------------------------------------------------

    def to_dict(self, include_members: bool = False) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.node_feature[i] >= 0:
                nodes.append({
                    "id": i, "kind": "split",
                    "feature": int(self.node_feature[i]),
                    "threshold": float(self.node_threshold[i]),
                    "left": int(self.node_left[i]),
                    "right": int(self.node_right[i]),
                })
            else:
                rec = self.leaf_records[i]
                node = {
                    "id": i, "kind": "leaf",
                    "tau_hat": rec.tau_hat,
                    "n_treated": rec.n_treated, "n_control": rec.n_control,
                    "var_treated": rec.var_treated, "var_control": rec.var_control,
                    "sum_weights_treated": rec.sum_weights_treated,
                    "sum_weights_control": rec.sum_weights_control,
                }
                if include_members:
                    node["est_members"] = [int(v) for v in self.leaf_est_members[i]]
                nodes.append(node)
        return {
            "type": "causal_tree",
            "n_features": self.n_features,
            "params": self.params.to_dict(),
            "nodes": nodes,
            "train_indices": [int(v) for v in self.train_indices],
            "est_indices": [int(v) for v in self.est_indices],
        }

    @staticmethod
    def from_dict(d: dict) -> "CausalTree":
        n = len(d["nodes"])
        feature = np.full(n, -1, dtype=np.int32)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int32)
        right = np.full(n, -1, dtype=np.int32)
        records: list[LeafRecord | None] = [None] * n
        members: list[np.ndarray | None] = [None] * n
        for node in d["nodes"]:
            i = node["id"]
            if node["kind"] == "split":
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
            else:
                records[i] = LeafRecord(
                    tau_hat=node["tau_hat"],
                    n_treated=node["n_treated"], n_control=node["n_control"],
                    var_treated=node["var_treated"], var_control=node["var_control"],
                    sum_weights_treated=node["sum_weights_treated"],
                    sum_weights_control=node["sum_weights_control"])
                if "est_members" in node:
                    members[i] = np.asarray(node["est_members"], dtype=np.intp)
        return CausalTree(
            node_feature=feature, node_threshold=threshold,
            node_left=left, node_right=right, leaf_records=records,
            train_indices=np.asarray(d["train_indices"], dtype=np.intp),
            est_indices=np.asarray(d["est_indices"], dtype=np.intp),
            params=TreeParams.from_dict(d["params"]),
            n_features=d["n_features"], leaf_est_members=members)

    def structure_equal(self, other: "CausalTree") -> bool:
        return (np.array_equal(self.node_feature, other.node_feature)
                and np.array_equal(self.node_threshold, other.node_threshold)
                and np.array_equal(self.node_left, other.node_left)
                and np.array_equal(self.node_right, other.node_right))


# =============================================================================
# Growth
# =============================================================================

@dataclass
class _GrownNodes:
    """Mutable tree under construction, flattened arrays plus train rewards."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    reward: list = field(default_factory=list)  # as-leaf criterion share on train half

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.reward.append(0.0)
        return len(self.feature) - 1


def _grow_structure(X: np.ndarray, y: np.ndarray, a: np.ndarray, w: np.ndarray,
                    params: TreeParams, rng: np.random.Generator | None,
                    mtry: int | None, penalty_coef: float,
                    min_gain: float) -> _GrownNodes:
    """Greedy depth-first growth on the training half (left child first)."""
    n, d = X.shape
    w_root = float(w.sum())
    nodes = _GrownNodes()
    root = nodes.add()
    stack = [(root, np.arange(n, dtype=np.intp))]
    min_t, min_c = params.min_treated_per_leaf, params.min_control_per_leaf
    while stack:
        nid, members = stack.pop()
        ym, am, wm = y[members], a[members], w[members]
        stats = LeafStats.from_data(ym, am, wm)
        nodes.reward[nid] = (stats.total_weight / w_root * stats.tau_hat ** 2
                             - penalty_coef * stats.variance_penalty())
        if stats.treated.n < 2 * min_t or stats.control.n < 2 * min_c:
            continue
        if mtry is not None and mtry < d:
            feats = rng.choice(d, size=mtry, replace=False)
        else:
            feats = np.arange(d)
        cand = best_causal_split(
            X[members], ym, am, wm, feats,
            min_treated=min_t, min_control=min_c,
            max_buckets=params.max_split_buckets, penalty_coef=penalty_coef)
        if cand is None or not cand.gain > min_gain:
            continue
        go_left = X[members, cand.feature] <= cand.threshold
        left_id, right_id = nodes.add(), nodes.add()
        nodes.feature[nid] = cand.feature
        nodes.threshold[nid] = cand.threshold
        nodes.left[nid] = left_id
        nodes.right[nid] = right_id
        stack.append((right_id, members[~go_left]))
        stack.append((left_id, members[go_left]))
    return nodes


def _route_paths(feature, threshold, left, right, X) -> np.ndarray:
    """(n, depth+1) matrix of node ids visited from the root; -1 past the leaf."""
    n = len(X)
    cur = np.zeros(n, dtype=np.intp)
    levels = [cur.copy()]
    while True:
        valid = cur >= 0
        internal = valid & (feature[np.maximum(cur, 0)] >= 0)
        if not internal.any():
            break
        nxt = np.full(n, -1, dtype=np.intp)
        idx = np.nonzero(internal)[0]
        node = cur[idx]
        go_left = X[idx, feature[node]] <= threshold[node]
        nxt[idx] = np.where(go_left, left[node], right[node])
        levels.append(nxt.copy())
        cur = nxt
    return np.column_stack(levels)


def _node_moments(paths: np.ndarray, y: np.ndarray, a: np.ndarray, w: np.ndarray,
                  n_nodes: int) -> dict[str, np.ndarray]:
    """Per-node weighted outcome moments over all rows passing through each node."""
    valid = paths >= 0
    row_idx, _ = np.nonzero(valid)
    nodes = paths[valid]
    av = a[row_idx].astype(float)
    wv = w[row_idx]
    yv = y[row_idx]
    wa = wv * av
    wc = wv - wa

    def accumulate(vals):
        out = np.zeros(n_nodes)
        np.add.at(out, nodes, vals)
        return out

    return {
        "n1": accumulate(av), "n0": accumulate(1.0 - av),
        "sw1": accumulate(wa), "swy1": accumulate(wa * yv),
        "swyy1": accumulate(wa * yv * yv), "sww1": accumulate(wa * wa),
        "sw0": accumulate(wc), "swy0": accumulate(wc * yv),
        "swyy0": accumulate(wc * yv * yv), "sww0": accumulate(wc * wc),
    }


def _arm_var_vec(sw, swy, swyy, sww):
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = swy / sw
        raw = np.maximum(swyy / sw - mean * mean, 0.0)
        n_eff = sw * sw / sww
        var = np.where(n_eff > 1.0, raw * n_eff / np.maximum(n_eff - 1.0, 1e-300), 0.0)
    return np.where(sw > 0, var, 0.0), np.where(sw > 0, mean, 0.0)


def _node_effects_and_penalties(mom: dict[str, np.ndarray]):
    """Per-node (tau_hat, variance penalty, both-arms mask, total weight)."""
    var1, mean1 = _arm_var_vec(mom["sw1"], mom["swy1"], mom["swyy1"], mom["sww1"])
    var0, mean0 = _arm_var_vec(mom["sw0"], mom["swy0"], mom["swyy0"], mom["sww0"])
    both = (mom["n1"] >= 1) & (mom["n0"] >= 1)
    tau = np.where(both, mean1 - mean0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = mom["n1"] / np.maximum(mom["n1"] + mom["n0"], 1.0)
        penalty = np.where(both, var1 / np.maximum(p, 1e-300)
                           + var0 / np.maximum(1.0 - p, 1e-300), 0.0)
    return tau, penalty, both, mom["sw1"] + mom["sw0"]


def _weakest_link_snapshots(feature, left, right, reward) -> list[np.ndarray]:
    """Nested cost-complexity sequence, from the full tree down to the root."""
    n = len(feature)
    cost_leaf = -np.asarray(reward, dtype=float)
    is_leaf = feature < 0
    snapshots = [is_leaf.copy()]
    order = _postorder(left, right)
    while not is_leaf[0]:
        branch_cost = cost_leaf.copy()
        leaves_below = np.ones(n)
        for i in order:
            if feature[i] >= 0 and not is_leaf[i]:
                branch_cost[i] = branch_cost[left[i]] + branch_cost[right[i]]
                leaves_below[i] = leaves_below[left[i]] + leaves_below[right[i]]
        internal = np.nonzero((feature >= 0) & ~is_leaf)[0]
        g = (cost_leaf[internal] - branch_cost[internal]) / (leaves_below[internal] - 1.0)
        g_min = g.min()
        for i in internal[g <= g_min + 1e-15]:
            _collapse(is_leaf, left, right, i)
        snapshots.append(is_leaf.copy())
    return snapshots


def _postorder(left, right) -> list[int]:
    order, stack = [], [0]
    while stack:
        i = stack.pop()
        order.append(i)
        if left[i] >= 0:
            stack.extend((left[i], right[i]))
    order.reverse()
    return order


def _collapse(is_leaf: np.ndarray, left, right, node: int) -> None:
    is_leaf[node] = True
    stack = [left[node], right[node]]
    while stack:
        i = stack.pop()
        if i < 0:
            continue
        is_leaf[i] = True  # marks the whole subtree unreachable
        stack.extend((left[i], right[i]))


def _rebuild(feature, threshold, left, right, is_leaf) -> tuple:
    """Drop unreachable nodes and renumber, honoring the snapshot's leaves."""
    mapping = {}
    order = []
    stack = [0]
    while stack:
        i = stack.pop()
        mapping[i] = len(order)
        order.append(i)
        if not is_leaf[i] and feature[i] >= 0:
            stack.append(right[i])
            stack.append(left[i])
    nf = np.full(len(order), -1, dtype=np.int32)
    nt = np.zeros(len(order))
    nl = np.full(len(order), -1, dtype=np.int32)
    nr = np.full(len(order), -1, dtype=np.int32)
    for old, new in mapping.items():
        if not is_leaf[old] and feature[old] >= 0:
            nf[new] = feature[old]
            nt[new] = threshold[old]
            nl[new] = mapping[left[old]]
            nr[new] = mapping[right[old]]
    return nf, nt, nl, nr


# =============================================================================
# Fitting
# =============================================================================

def _as_matrix(history) -> np.ndarray:
    if isinstance(history, HistoryMatrix):
        return history.values
    return np.asarray(history, dtype=float)


def _fit_tree(X: np.ndarray, y: np.ndarray, a: np.ndarray, w: np.ndarray,
              params: TreeParams, *, mtry: int | None = None, prune: bool = True,
              min_gain: float = 0.0) -> CausalTree:
    """Full fit: honest split, growth, optional CV pruning, leaf estimation."""
    n = len(X)
    train_idx, est_idx = honest_split(
        n, params.honest_fraction, derive_seed(params.rng_seed, "honest-split"))
    min_t, min_c = params.min_treated_per_leaf, params.min_control_per_leaf

    a_tr = a[train_idx]
    n1 = int(np.sum(a_tr == 1))
    if n1 < min_t or (len(a_tr) - n1) < min_c:
        raise DegenerateFitError(
            "training half cannot satisfy the per-arm leaf minima at the root")

    coef = penalty_coefficient(len(train_idx), len(est_idx))
    rng = rng_from(params.rng_seed, "growth")
    grown = _grow_structure(X[train_idx], y[train_idx], a_tr, w[train_idx],
                            params, rng, mtry, coef, min_gain)
    feature = np.asarray(grown.feature, dtype=np.int32)
    threshold = np.asarray(grown.threshold, dtype=float)
    left = np.asarray(grown.left, dtype=np.int32)
    right = np.asarray(grown.right, dtype=np.int32)

    if prune and params.cv_folds >= 2 and (feature >= 0).any():
        snapshot = _select_subtree_by_cv(
            feature, threshold, left, right, np.asarray(grown.reward),
            X[train_idx], y[train_idx], a_tr, w[train_idx],
            params, n_est=len(est_idx))
        feature, threshold, left, right = _rebuild(feature, threshold, left, right, snapshot)

    return _finalize_estimation(
        feature, threshold, left, right, X, y, a, w,
        train_idx, est_idx, params)


def _select_subtree_by_cv(feature, threshold, left, right, reward,
                          X_tr, y_tr, a_tr, w_tr, params: TreeParams,
                          n_est: int) -> np.ndarray:
    """Pick the cost-complexity subtree maximizing the cross-validated criterion.

    Per fold, leaf effects and variance penalties come from the grow
    portion (training half minus the fold); the held-out fold supplies an
    independent effect estimate per leaf. A leaf contributes its held-out
    weight share times (2 * tau_val * tau_grow - tau_grow^2), an unbiased
    stand-in for tau^2 minus the squared estimation error, minus the
    variance penalty scaled by 1/n_grow + 1/n_est. Ties prefer the
    smallest subtree.
    """
    folds = params.cv_folds
    if folds > len(X_tr):
        raise ValueError("more folds than training rows")
    snapshots = _weakest_link_snapshots(feature, left, right, reward)
    n_nodes = len(feature)
    paths = _route_paths(feature, threshold, left, right, X_tr)
    perm = rng_from(params.rng_seed, "cv").permutation(len(X_tr))
    fold_slices = np.array_split(perm, folds)
    leaves_per_snapshot = [_reachable_leaves(feature, left, right, snap)
                           for snap in snapshots]

    scores = np.zeros(len(snapshots))
    for fold_rows in fold_slices:
        grow_mask = np.ones(len(X_tr), dtype=bool)
        grow_mask[fold_rows] = False
        grow_rows = np.nonzero(grow_mask)[0]
        coef = penalty_coefficient(len(grow_rows), n_est)

        mom_grow = _node_moments(paths[grow_rows], y_tr[grow_rows],
                                 a_tr[grow_rows], w_tr[grow_rows], n_nodes)
        mom_val = _node_moments(paths[fold_rows], y_tr[fold_rows],
                                a_tr[fold_rows], w_tr[fold_rows], n_nodes)
        tau_grow, penalty_grow, _, _ = _node_effects_and_penalties(mom_grow)
        tau_val, _, _, w_val = _node_effects_and_penalties(mom_val)
        total_val_w = float(w_tr[fold_rows].sum())
        if total_val_w <= 0:
            continue
        matched = w_val / total_val_w * (2.0 * tau_val * tau_grow - tau_grow ** 2)

        for s, leaf_ids in enumerate(leaves_per_snapshot):
            scores[s] += float(np.sum(matched[leaf_ids])
                               - coef * np.sum(penalty_grow[leaf_ids]))
    scores /= folds
    best = max(range(len(snapshots)),
               key=lambda i: (scores[i], -len(leaves_per_snapshot[i])))
    return snapshots[best]


def _reachable_leaves(feature, left, right, is_leaf) -> np.ndarray:
    out, stack = [], [0]
    while stack:
        i = stack.pop()
        if is_leaf[i] or feature[i] < 0:
            out.append(i)
        else:
            stack.extend((left[i], right[i]))
    return np.asarray(out, dtype=np.intp)


def _finalize_estimation(feature, threshold, left, right, X, y, a, w,
                         train_idx, est_idx, params: TreeParams) -> CausalTree:
    """Collapse leaves thin on the estimation half, then estimate leaf effects."""
    min_t, min_c = params.min_treated_per_leaf, params.min_control_per_leaf
    X_est, a_est = X[est_idx], a[est_idx]

    paths = _route_paths(feature, threshold, left, right, X_est)
    n_nodes = len(feature)
    cnt1 = np.zeros(n_nodes, dtype=int)
    cnt0 = np.zeros(n_nodes, dtype=int)
    valid = paths >= 0
    flat_nodes = paths[valid]
    flat_treated = np.broadcast_to((a_est == 1)[:, None], paths.shape)[valid]
    np.add.at(cnt1, flat_nodes[flat_treated], 1)
    np.add.at(cnt0, flat_nodes[~flat_treated], 1)

    node_ok = (cnt1 >= min_t) & (cnt0 >= min_c)
    make_leaf = np.zeros(n_nodes, dtype=bool)
    subtree_ok = np.zeros(n_nodes, dtype=bool)
    for i in _postorder(left, right):
        if feature[i] < 0:
            subtree_ok[i] = node_ok[i]
        else:
            if subtree_ok[left[i]] and subtree_ok[right[i]]:
                subtree_ok[i] = True
            elif node_ok[i]:
                make_leaf[i] = True
                subtree_ok[i] = True
    if not subtree_ok[0]:
        raise DegenerateFitError(
            "estimation half cannot satisfy the per-arm leaf minima at the root")
    if make_leaf.any():
        snapshot = (feature < 0) | make_leaf
        feature, threshold, left, right = _rebuild(feature, threshold, left, right, snapshot)

    # Leaf estimates on the estimation half.
    tree = CausalTree(
        node_feature=feature, node_threshold=threshold, node_left=left,
        node_right=right, leaf_records=[None] * len(feature),
        train_indices=train_idx, est_indices=est_idx, params=params,
        n_features=X.shape[1], fit_refs=(X, y, a, w),
        growth_touched_indices=np.sort(train_idx))
    leaf_of_est = tree.apply(X_est)
    y_est, w_est = y[est_idx], w[est_idx]
    members_by_leaf: list[np.ndarray | None] = [None] * tree.n_nodes
    for leaf in tree.leaf_node_ids():
        rows = np.nonzero(leaf_of_est == leaf)[0]
        stats = LeafStats.from_data(y_est[rows], a_est[rows], w_est[rows])
        tree.leaf_records[leaf] = LeafRecord(
            tau_hat=stats.tau_hat,
            n_treated=stats.treated.n, n_control=stats.control.n,
            var_treated=stats.treated.variance, var_control=stats.control.variance,
            sum_weights_treated=stats.treated.sum_w,
            sum_weights_control=stats.control.sum_w)
        members_by_leaf[leaf] = est_idx[rows]
    tree.leaf_est_members = members_by_leaf
    return tree


def grow_tree(history, outcomes: np.ndarray, treatments: np.ndarray,
              weights: np.ndarray | None = None,
              params: TreeParams = TreeParams()) -> CausalTree:
    """Fit an honest causal tree.

    Greedy depth-first growth on the training half over weighted-quantile
    split candidates, cost-complexity pruning cross-validated on the
    training half, then leaf effects re-estimated on the estimation half.
    Every leaf of the result satisfies the per-arm minima on both halves.

    Args:
        history: HistoryMatrix or raw (N, d) design.
        outcomes: Length-N outcome (or pseudo-outcome) vector.
        treatments: Length-N binary treatment vector.
        weights: Optional observation weights (default all ones).
        params: Hyperparameters; params.rng_seed fixes the honest split,
            feature subsampling, and fold assignment.

    Raises:
        DegenerateFitError: No root satisfying the leaf minima exists.
    """
    X = _as_matrix(history)
    y = np.asarray(outcomes, dtype=float)
    a = np.asarray(treatments)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if not (len(X) == len(y) == len(a) == len(w)):
        raise ValueError("inputs are misaligned")
    if len(np.unique(a)) < 2:
        raise DegenerateFitError("both treatment arms must be present")
    return _fit_tree(X, y, a, w, params)


def cv_prune(tree: CausalTree, folds: int) -> CausalTree:
    """Re-prune a fitted tree with a different fold count.

    Builds the weakest-link subtree sequence on the training half, scores
    every subtree with the criterion averaged over held-out folds, and
    returns the best subtree re-estimated on the estimation half. A
    single-leaf tree comes back unchanged.
    """
    if tree._fit_refs is None:
        raise ValueError("tree was deserialized without its fitting data; cannot prune")
    if folds > len(tree.train_indices):
        raise ValueError("more folds than training rows")
    if tree.n_leaves == 1:
        return tree
    X, y, a, w = tree._fit_refs
    params = TreeParams(**{**tree.params.to_dict(), "cv_folds": folds})
    train_idx, est_idx = tree.train_indices, tree.est_indices

    # Recompute per-node as-leaf rewards on the training half.
    X_tr, y_tr = X[train_idx], y[train_idx]
    a_tr, w_tr = a[train_idx], w[train_idx]
    coef = penalty_coefficient(len(train_idx), len(est_idx))
    w_root = float(w_tr.sum())
    paths = _route_paths(tree.node_feature, tree.node_threshold,
                         tree.node_left, tree.node_right, X_tr)
    reward = np.zeros(tree.n_nodes)
    for i in range(tree.n_nodes):
        rows = np.nonzero((paths == i).any(axis=1))[0]
        stats = LeafStats.from_data(y_tr[rows], a_tr[rows], w_tr[rows])
        if stats.treated.n and stats.control.n:
            reward[i] = (stats.total_weight / w_root * stats.tau_hat ** 2
                         - coef * stats.variance_penalty())
    snapshot = _select_subtree_by_cv(
        tree.node_feature, tree.node_threshold, tree.node_left, tree.node_right,
        reward, X_tr, y_tr, a_tr, w_tr, params, n_est=len(est_idx))
    feature, threshold, left, right = _rebuild(
        tree.node_feature, tree.node_threshold, tree.node_left, tree.node_right, snapshot)
    return _finalize_estimation(feature, threshold, left, right, X, y, a, w,
                                train_idx, est_idx, params)
