"""CART regression tree on expanded features, with decision paths, rules and
the consistency/structure metrics computed from them.

Node conventions: nodes are stored in pre-order (left subtree first), the root
has depth 1, and a sample goes left iff ``x[feature] <= threshold``.  A path
length counts every node from the root to the leaf inclusive.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import EmptyInput, LengthMismatch, SchemaMismatch
from .featurebase import EXPERT_FAMILIES
from .nnem import hard_label

MIN_GAIN = 1e-12
TREE_FORMAT_VERSION = 1


@dataclass
class RegressionTree:
    feature: np.ndarray      # -1 at leaves
    threshold: np.ndarray    # nan at leaves
    left: np.ndarray
    right: np.ndarray
    n_samples: np.ndarray
    value: np.ndarray        # mean training target of the node
    mse: np.ndarray
    depth: np.ndarray
    n_features: int
    s_leaf: int
    max_depth: int
    schema: object = None

    @property
    def n_nodes(self):
        return len(self.feature)

    def is_leaf(self, node):
        return self.feature[node] < 0

    def to_dict(self):
        return {
            "format_version": TREE_FORMAT_VERSION,
            "n_features": self.n_features,
            "s_leaf": self.s_leaf,
            "max_depth": self.max_depth,
            "nodes": [
                {"feature": int(self.feature[i]),
                 "threshold": None if self.feature[i] < 0 else float(self.threshold[i]),
                 "left": int(self.left[i]), "right": int(self.right[i]),
                 "n_samples": int(self.n_samples[i]), "value": float(self.value[i]),
                 "mse": float(self.mse[i]), "depth": int(self.depth[i])}
                for i in range(self.n_nodes)
            ],
        }

    @classmethod
    def from_dict(cls, d, schema=None):
        nodes = d["nodes"]

        def col(key, dtype, missing=None):
            return np.array([missing if n[key] is None else n[key] for n in nodes], dtype=dtype)

        return cls(col("feature", np.int64), col("threshold", float, np.nan), col("left", np.int64),
                   col("right", np.int64), col("n_samples", np.int64), col("value", float),
                   col("mse", float), col("depth", np.int64), d["n_features"], d["s_leaf"],
                   d["max_depth"], schema)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path, schema=None):
        return cls.from_dict(json.loads(Path(path).read_text()), schema)


def node_sse(y):
    """Sum of squared deviations in index order; the reference used for every split decision."""
    if len(y) == 0:
        return 0.0
    return float(np.sum((y - np.mean(y)) ** 2))


def fit(X, y, s_leaf=10, max_depth=12, schema=None):
    """Grow a regression tree greedily by exhaustive best-SSE splits.

    Candidate thresholds are midpoints between consecutive distinct sorted values.
    A split needs ``s_leaf`` samples on both sides and must lower the SSE by more
    than ``MIN_GAIN``.  Ties go to the lowest feature index, then the smallest
    threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise EmptyInput(f"need matching non-empty X (n, d) and y (n,), got {X.shape} and {y.shape}")
    if schema is not None and len(schema) != X.shape[1]:
        raise SchemaMismatch(f"schema has {len(schema)} features, X has {X.shape[1]}")
    s_leaf = max(int(s_leaf), 1)
    Xt = np.ascontiguousarray(X.T)
    n_feat = X.shape[1]

    nodes = []

    def grow(order, depth):
        # order: (d, n) global sample ids, each row sorted by that feature
        idx = np.sort(order[0])
        yn = y[idx]
        n = len(idx)
        sse = node_sse(yn)
        node = {"feature": -1, "threshold": np.nan, "left": -1, "right": -1, "n_samples": n,
                "value": float(np.mean(yn)), "mse": sse / n, "depth": depth}
        nodes.append(node)
        split = None
        if depth < max_depth and n >= 2 * s_leaf:
            split = _best_split(Xt, y, order, idx, sse, s_leaf)
        if split is None:
            return
        f, thr, go_left = split
        node["feature"], node["threshold"] = f, thr
        left_order, right_order = _partition(order, go_left, int(go_left[idx].sum()))
        node["left"] = len(nodes)
        grow(left_order, depth + 1)
        node["right"] = len(nodes)
        grow(right_order, depth + 1)

    grow(np.argsort(Xt, axis=1, kind="stable"), 1)

    def col(key, dtype):
        return np.array([nd[key] for nd in nodes], dtype=dtype)

    return RegressionTree(col("feature", np.int64), col("threshold", float), col("left", np.int64),
                          col("right", np.int64), col("n_samples", np.int64), col("value", float),
                          col("mse", float), col("depth", np.int64), n_feat, s_leaf, max_depth, schema)


@njit(cache=True)
def _child_sse(Xt, y, order, mean, s_leaf):
    """Approximate child SSE for every candidate cut, inf where the cut is not allowed.

    Column ``j`` is the cut after sorted position ``s_leaf - 1 + j``.  Targets are
    centered at the node mean so the prefix-sum formula stays accurate.
    """
    d, n = order.shape
    n_pos = n - 2 * s_leaf + 1
    out = np.full((d, n_pos), np.inf)
    for f in range(d):
        tot = 0.0
        totq = 0.0
        for i in range(n):
            v = y[order[f, i]] - mean
            tot += v
            totq += v * v
        cl = 0.0
        ql = 0.0
        for i in range(n - s_leaf):
            v = y[order[f, i]] - mean
            cl += v
            ql += v * v
            if i >= s_leaf - 1 and Xt[f, order[f, i]] < Xt[f, order[f, i + 1]]:
                nl = i + 1.0
                nr = n - nl
                cr = tot - cl
                out[f, i - s_leaf + 1] = (ql - cl * cl / nl) + ((totq - ql) - cr * cr / nr)
    return out


@njit(cache=True)
def _partition(order, go_left, n_left):
    """Split every presorted row of ``order`` into left/right rows, keeping the sort."""
    d, n = order.shape
    left = np.empty((d, n_left), dtype=order.dtype)
    right = np.empty((d, n - n_left), dtype=order.dtype)
    for f in range(d):
        a = 0
        b = 0
        for i in range(n):
            s = order[f, i]
            if go_left[s]:
                left[f, a] = s
                a += 1
            else:
                right[f, b] = s
                b += 1
    return left, right


def _best_split(Xt, y, order, idx, parent_sse, s_leaf):
    child = _child_sse(Xt, y, order, float(np.mean(y[idx])), s_leaf)
    pos = np.arange(s_leaf - 1, order.shape[1] - s_leaf)
    approx = child.min()
    if not np.isfinite(approx):
        return None
    band = 1e-9 * parent_sse + 1e-300
    cand_f, cand_p = np.nonzero(child <= approx + band)
    best = None
    for f, p in zip(cand_f, cand_p):
        i = pos[p]
        lo, hi = Xt[f, order[f, i]], Xt[f, order[f, i + 1]]
        thr = split_threshold(lo, hi)
        go = Xt[f, idx] <= thr
        sse = node_sse(y[idx[go]]) + node_sse(y[idx[~go]])
        key = (sse, f, thr)
        if best is None or key < best[0]:
            best = (key, go)
    (sse, f, thr), go = best
    if not parent_sse - sse > MIN_GAIN:
        return None
    go_left = np.zeros(len(y), dtype=bool)
    go_left[idx[go]] = True
    return int(f), float(thr), go_left


def split_threshold(lo, hi):
    """Midpoint of two consecutive distinct values, kept strictly below ``hi``."""
    thr = lo / 2.0 + hi / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(thr)


# -- traversal ----------------------------------------------------------------

def _check_width(tree, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None] if single else X
    if X2.shape[1] != tree.n_features:
        raise SchemaMismatch(f"tree expects {tree.n_features} features, got {X2.shape[1]}")
    return X2, single


def apply(tree, X):
    """Leaf node id reached by each row of ``X``."""
    X2, single = _check_width(tree, X)
    node = np.zeros(len(X2), dtype=np.int64)
    active = np.nonzero(tree.feature[node] >= 0)[0]
    while len(active):
        nd = node[active]
        go_left = X2[active, tree.feature[nd]] <= tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = active[tree.feature[node[active]] >= 0]
    return node[0] if single else node


def predict(tree, X):
    return tree.value[apply(tree, X)]


def path_lengths(tree, X):
    return tree.depth[apply(tree, X)]


def average_depth(tree, X):
    """Mean number of nodes on the decision path over the rows of ``X``."""
    X2, _ = _check_width(tree, X)
    if len(X2) == 0:
        raise EmptyInput("average depth of an empty set")
    return float(np.mean(path_lengths(tree, X2)))


def fidelity(nn_probs, tree_probs):
    """Fraction of samples on which the two models' hard labels agree."""
    a = np.asarray(nn_probs, dtype=float)
    b = np.asarray(tree_probs, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise LengthMismatch(f"need equal non-empty inputs, got {a.shape} and {b.shape}")
    return float(np.mean(hard_label(a) == hard_label(b)))


# -- decision paths and rules -----------------------------------------------------

@dataclass
class Predicate:
    node: int
    feature: int
    name: str
    family: str
    op: str                 # "<=" or ">"
    threshold: float        # tree input units (standardized)
    value: float            # the sample's tree input value
    threshold_phys: float | None = None
    value_phys: float | None = None
    unit: str = ""

    @property
    def expert(self):
        return self.family not in ("raw", "")

    def holds(self, x):
        v = x[self.feature]
        return bool(v <= self.threshold) if self.op == "<=" else bool(v > self.threshold)

    def to_dict(self):
        return {"node": self.node, "feature": self.feature, "name": self.name, "family": self.family,
                "expert": self.expert, "op": self.op, "threshold": self.threshold, "value": self.value,
                "threshold_phys": self.threshold_phys, "value_phys": self.value_phys, "unit": self.unit}


@dataclass
class DecisionPath:
    nodes: list
    predicates: list
    leaf_value: float

    def __len__(self):
        return len(self.nodes)


def decision_path(tree, x, schema=None, standardizer=None):
    x2, _ = _check_width(tree, x)
    x = x2[0]
    schema = schema if schema is not None else tree.schema
    nodes, preds = [], []
    node = 0
    while True:
        nodes.append(node)
        f = tree.feature[node]
        if f < 0:
            break
        thr = tree.threshold[node]
        op = "<=" if x[f] <= thr else ">"
        preds.append(_predicate(node, int(f), op, float(thr), float(x[f]), schema, standardizer))
        node = int(tree.left[node] if op == "<=" else tree.right[node])
    return DecisionPath(nodes, preds, float(tree.value[node]))


def _predicate(node, f, op, thr, val, schema, standardizer):
    name, family, unit, scale = f"x[{f}]", "", "", 1.0
    if schema is not None:
        d = schema[f]
        name, family, unit, scale = d.name, d.family, d.unit, d.scale
    thr_p = val_p = None
    if standardizer is not None:
        mean, std = standardizer.mean.ravel()[f], standardizer.std.ravel()[f]
        thr_p = float((thr * std + mean) * scale)
        val_p = float((val * std + mean) * scale)
    return Predicate(node, f, name, family, op, thr, val, thr_p, val_p, unit)


@dataclass
class Rule:
    predicates: list
    probability: float
    label: int
    path: list = field(default_factory=list)

    def holds(self, x):
        return all(p.holds(x) for p in self.predicates)

    def text(self):
        lines = []
        for k, p in enumerate(self.predicates):
            lead = "IF  " if k == 0 else "AND "
            if p.threshold_phys is not None:
                thr = f"{p.threshold_phys:.6g}{' ' + p.unit if p.unit else ''}"
            else:
                thr = f"{p.threshold:.6g}"
            tag = "  [expert: " + p.family + "]" if p.expert else ""
            lines.append(f"{lead}{p.name} {p.op} {thr}{tag}")
        verdict = "stable" if self.label == 1 else "unstable"
        head = "THEN" if self.predicates else "ALWAYS"
        lines.append(f"{head} P(stable) = {self.probability:.4f} -> {verdict}")
        return "\n".join(lines)

    def to_dict(self):
        return {"predicates": [p.to_dict() for p in self.predicates], "probability": self.probability,
                "label": self.label, "path": [int(n) for n in self.path]}


def render_rule(tree, x, schema=None, standardizer=None):
    """Interpretive rule for one sample: the conjunction along its decision path."""
    path = decision_path(tree, x, schema, standardizer)
    return Rule(path.predicates, path.leaf_value, int(hard_label(path.leaf_value)), path.nodes)


# -- expert-term structure metrics ------------------------------------------------------

def _family_index(tree, schema, families):
    fam = schema.families()
    lookup = {f: k for k, f in enumerate(families)}
    out = np.full(tree.n_nodes, -1)
    for i in range(tree.n_nodes):
        if tree.feature[i] >= 0:
            out[i] = lookup.get(fam[tree.feature[i]], -1)
    return out


def nonlinear_frequency(tree, X, schema, families=EXPERT_FAMILIES):
    """Mean number of path nodes per sample that test a feature of each family."""
    X2, _ = _check_width(tree, X)
    fam_of = _family_index(tree, schema, families)
    counts = np.zeros((len(X2), len(families)))
    node = np.zeros(len(X2), dtype=np.int64)
    active = np.nonzero(tree.feature[node] >= 0)[0]
    while len(active):
        nd = node[active]
        k = fam_of[nd]
        hit = k >= 0
        np.add.at(counts, (active[hit], k[hit]), 1.0)
        go_left = X2[active, tree.feature[nd]] <= tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = active[tree.feature[node[active]] >= 0]
    mean = counts.mean(axis=0) if len(X2) else np.zeros(len(families))
    return {f: float(mean[k]) for k, f in enumerate(families)}


def nonlinear_layer_number(tree, schema, families=EXPERT_FAMILIES):
    """Mean depth (root = 1) of the internal nodes testing each family; None if absent."""
    fam_of = _family_index(tree, schema, families)
    out = {}
    for k, f in enumerate(families):
        depths = tree.depth[fam_of == k]
        out[f] = float(depths.mean()) if len(depths) else None
    return out
