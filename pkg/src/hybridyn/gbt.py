"""Second-order gradient-boosted regression trees (squared error).

Trees grow level by level with an exact greedy split search over presorted
columns. A split is kept only when its regularised gain is strictly
positive. Leaf weights carry the learning rate, so a prediction is the base
score plus the plain sum of the reached leaves.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from ._backend import core
from .errors import ContractError


@dataclass(frozen=True)
class GbtHyperParams:
    learning_rate: float = 0.1
    max_depth: int = 6
    min_child_weight: float = 1.0
    colsample_bytree: float = 1.0
    subsample: float = 1.0
    reg_alpha: float = 0.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    n_estimators: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ContractError("learning_rate must lie in (0, 1]")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ContractError("max_depth must be an integer >= 1")
        if int(self.n_estimators) != self.n_estimators or self.n_estimators < 1:
            raise ContractError("n_estimators must be an integer >= 1")
        for name in ("subsample", "colsample_bytree"):
            if not 0 < getattr(self, name) <= 1:
                raise ContractError(f"{name} must lie in (0, 1]")
        for name in ("reg_alpha", "reg_lambda", "gamma", "min_child_weight"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        object.__setattr__(self, "max_depth", int(self.max_depth))
        object.__setattr__(self, "n_estimators", int(self.n_estimators))
        object.__setattr__(self, "seed", int(self.seed))

    def with_(self, **kw) -> "GbtHyperParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GbtHyperParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def soft_threshold(g, alpha):
    return np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)


class GbtEnsemble:
    """Trees stored as concatenated node arrays; ``roots[t]`` is tree t's root.

    A node is a leaf when ``left < 0``; rows with ``x[feature] < threshold``
    go left.
    """

    def __init__(self, base_score, feature, threshold, left, right, value, roots,
                 n_features, params: GbtHyperParams, objective_trace=()):
        self.base_score = float(base_score)
        self.feature = np.ascontiguousarray(feature, dtype=np.int64)
        self.threshold = np.ascontiguousarray(threshold, dtype=float)
        self.left = np.ascontiguousarray(left, dtype=np.int64)
        self.right = np.ascontiguousarray(right, dtype=np.int64)
        self.value = np.ascontiguousarray(value, dtype=float)
        self.roots = np.ascontiguousarray(roots, dtype=np.int64)
        self.n_features = int(n_features)
        self.params = params
        self.objective_trace = tuple(float(v) for v in objective_trace)
        inner = self.left >= 0
        if np.any(self.feature[inner] >= self.n_features) or np.any(self.feature[inner] < 0):
            raise ContractError("split feature index out of range")

    @property
    def n_trees(self) -> int:
        return int(self.roots.shape[0])

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ContractError(f"expected {self.n_features} feature columns, got {X.shape}")
        return self.base_score + core.predict_forest(X, self.feature, self.threshold, self.left,
                                                     self.right, self.value, self.roots)

    def tree_depth(self, t: int) -> int:
        stack, depth = [(int(self.roots[t]), 0)], 0
        while stack:
            node, d = stack.pop()
            depth = max(depth, d)
            if self.left[node] >= 0:
                stack += [(int(self.left[node]), d + 1), (int(self.right[node]), d + 1)]
        return depth

    def tree(self, t: int) -> dict:
        """Tree ``t`` as nested nodes."""
        def build(node):
            if self.left[node] < 0:
                return {"leaf": float(self.value[node])}
            return {"feature": int(self.feature[node]), "threshold": float(self.threshold[node]),
                    "left": build(int(self.left[node])), "right": build(int(self.right[node]))}
        return build(int(self.roots[t]))

    def to_dict(self) -> dict:
        return {"base_score": self.base_score, "n_features": self.n_features,
                "params": self.params.to_dict(), "objective_trace": list(self.objective_trace),
                "trees": [self.tree(t) for t in range(self.n_trees)]}

    @classmethod
    def from_dict(cls, d) -> "GbtEnsemble":
        feat, thr, lft, rgt, val, roots = [], [], [], [], [], []

        def add(node):
            i = len(feat)
            feat.append(-1); thr.append(0.0); lft.append(-1); rgt.append(-1); val.append(0.0)
            if "leaf" in node:
                val[i] = node["leaf"]
            else:
                feat[i], thr[i] = node["feature"], node["threshold"]
                lft[i] = add(node["left"])
                rgt[i] = add(node["right"])
            return i

        for tree in d["trees"]:
            roots.append(add(tree))
        return cls(d["base_score"], feat, thr, lft, rgt, val, roots, d["n_features"],
                   GbtHyperParams.from_dict(d["params"]), d.get("objective_trace", ()))


def regularized_objective(residual, leaf_values, n_splits, params: GbtHyperParams) -> float:
    """``sum r^2 / 2 + sum over leaves (lambda w^2 / 2 + alpha |w|) + gamma * splits``."""
    w = np.asarray(leaf_values)
    return float(0.5 * residual @ residual + 0.5 * params.reg_lambda * (w @ w)
                 + params.reg_alpha * np.abs(w).sum() + params.gamma * n_splits)


def presort(X) -> tuple[np.ndarray, np.ndarray]:
    """Per-column stable sort order ``(d, N)`` and the matching sorted values."""
    idx = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T, dtype=np.int32)
    vals = np.ascontiguousarray(np.take_along_axis(X.T, idx, axis=1))
    return idx, vals


def fit_gbt(X, y, params: GbtHyperParams, presorted=None) -> GbtEnsemble:
    """Boost ``params.n_estimators`` trees on squared error."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ContractError("X must be (N, d) and y (N,)")
    N, d = X.shape
    if N < 2:
        raise ContractError("need at least two rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ContractError("training data contains NaN or inf")
    p = params
    rng = np.random.default_rng(p.seed)
    sorted_idx, sorted_vals = presort(X) if presorted is None else presorted
    base = float(y.mean())
    pred = np.full(N, base)
    h = np.ones(N)
    feat, thr, lft, rgt, val, roots = [], [], [], [], [], []
    n_splits = 0
    trace = [regularized_objective(pred - y, [], 0, p)]
    all_cols = np.ones(d, dtype=np.uint8)
    for _ in range(p.n_estimators):
        if p.subsample < 1:
            inbag = np.zeros(N, dtype=bool)
            inbag[rng.choice(N, max(1, int(round(p.subsample * N))), replace=False)] = True
        else:
            inbag = np.ones(N, dtype=bool)
        if p.colsample_bytree < 1:
            cols = np.zeros(d, dtype=np.uint8)
            cols[rng.choice(d, max(1, int(round(p.colsample_bytree * d))), replace=False)] = 1
        else:
            cols = all_cols
        g = pred - y

        lvl = np.zeros(N, dtype=np.int64)      # open-node index on the current level, -1 once in a leaf
        leaf_of = np.full(N, -1, dtype=np.int64)
        gid = [len(feat)]
        feat.append(-1); thr.append(0.0); lft.append(-1); rgt.append(-1); val.append(0.0)
        roots.append(gid[0])
        for depth in range(p.max_depth + 1):
            K = len(gid)
            live = lvl >= 0
            stat = live & inbag
            G = np.bincount(lvl[stat], weights=g[stat], minlength=K)
            H = np.bincount(lvl[stat], weights=h[stat], minlength=K)
            if depth < p.max_depth:
                node_of = np.where(stat, lvl, -1).astype(np.int32)
                _, bf, bt = core.best_splits(sorted_vals, sorted_idx, node_of, g, h, G, H, cols,
                                             p.reg_lambda, p.reg_alpha, p.gamma, p.min_child_weight)
            else:
                bf = np.full(K, -1, dtype=np.int64)
                bt = np.zeros(K)
            child_l = np.full(K, -1, dtype=np.int64)
            next_gid = []
            for k in range(K):
                node = gid[k]
                if bf[k] >= 0:
                    feat[node], thr[node] = int(bf[k]), float(bt[k])
                    for side in (lft, rgt):
                        side[node] = len(feat)
                        next_gid.append(len(feat))
                        feat.append(-1); thr.append(0.0); lft.append(-1); rgt.append(-1); val.append(0.0)
                    child_l[k] = len(next_gid) - 2
                    n_splits += 1
                else:
                    val[node] = float(-p.learning_rate * soft_threshold(G[k], p.reg_alpha) / (H[k] + p.reg_lambda))
            rows = np.flatnonzero(live)
            k_row = lvl[rows]
            splits = bf[k_row] >= 0
            done = rows[~splits]
            leaf_of[done] = np.asarray(gid, dtype=np.int64)[lvl[done]]
            lvl[done] = -1
            moving = rows[splits]
            km = lvl[moving]
            go_left = X[moving, bf[km]] < bt[km]
            lvl[moving] = np.where(go_left, child_l[km], child_l[km] + 1)
            gid = next_gid
            if not gid:
                break
        values = np.asarray(val)
        pred = pred + values[leaf_of]
        leaves = values[np.asarray(lft) < 0]
        trace.append(regularized_objective(pred - y, leaves, n_splits, p))
    return GbtEnsemble(base, feat, thr, lft, rgt, val, roots, d, p, trace)
