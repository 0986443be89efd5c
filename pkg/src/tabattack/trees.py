"""Decision tree, random forest and gradient boosting targets with information-gain importance."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .nn import sigmoid
from .schema import BINARY, Dataset

log = logging.getLogger(__name__)

KINDS = ("decision_tree", "random_forest", "gbm")
SHORT = {"dt": "decision_tree", "rf": "random_forest", "gbm": "gbm"}
MAX_ONE_VS_REST = 16


@dataclass
class TreeParams:
    max_depth: int = 8
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: int | str | None = None
    n_trees: int = 1
    bootstrap: bool = False
    learning_rate: float = 0.1
    subsample: float = 1.0
    # "set": categorical codes split as unordered sets; "ordered": treated as numbers
    categorical: str = "set"
    # "weighted": gains scaled by the node's share of training rows; "raw": plain sum
    importance: str = "weighted"

    @classmethod
    def from_dict(cls, d: dict | None) -> "TreeParams":
        return cls(**(d or {}))


DEFAULTS = {
    "decision_tree": TreeParams(max_depth=8),
    "random_forest": TreeParams(max_depth=8, n_trees=100, bootstrap=True, max_features="sqrt"),
    "gbm": TreeParams(max_depth=3, n_trees=200, learning_rate=0.1, categorical="ordered"),
}


def _impurity(n, s1, s2, criterion):
    """Node impurity from counts and first/second target sums (vectorised)."""
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(n > 0, s1 / np.where(n > 0, n, 1), 0.0)
        if criterion == "entropy":
            p = np.clip(mean, 0.0, 1.0)
            h = np.zeros_like(p)
            inner = (p > 0) & (p < 1)
            q = p[inner]
            h[inner] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
            return h
        var = np.where(n > 0, s2 / np.where(n > 0, n, 1), 0.0) - mean ** 2
        return np.maximum(var, 0.0)


def entropy(labels) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    return float(_impurity(len(labels), labels.sum(), (labels ** 2).sum(), "entropy"))


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    categories: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)
    gain: list = field(default_factory=list)
    n: list = field(default_factory=list)

    def add_node(self, value, n) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.categories.append(None)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        self.gain.append(0.0)
        self.n.append(int(n))
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def _arrays(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            kmax = max([max(c) + 1 for c in self.categories if c] or [0])
            mask = np.zeros((self.n_nodes, max(kmax, 1)), dtype=bool)
            is_cat = np.zeros(self.n_nodes, dtype=bool)
            for i, c in enumerate(self.categories):
                if c is not None:
                    is_cat[i] = True
                    mask[i, list(c)] = True
            cache = (np.array(self.feature), np.array(self.threshold), is_cat, mask,
                     np.array(self.left), np.array(self.right), np.array(self.value))
            object.__setattr__(self, "_cache", cache)
        return cache

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        feat, thr, is_cat, mask, left, right, value = self._arrays()
        node = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        while True:
            f = feat[node]
            live = f >= 0
            if not live.any():
                break
            r, nd, fi = rows[live], node[live], f[live]
            x = X[r, fi]
            go_left = x <= thr[nd]
            cat = is_cat[nd]
            if cat.any():
                codes = np.clip(x[cat].astype(int), 0, mask.shape[1] - 1)
                inside = (x[cat] >= 0) & (x[cat] < mask.shape[1])
                go_left[cat] = mask[nd[cat], codes] & inside
            node[live] = np.where(go_left, left[nd], right[nd])
        return value[node]

    def to_dict(self) -> dict:
        return {"nodes": [
            {"feature": f, "threshold": t, "categories": None if c is None else list(c),
             "left": l, "right": r, "value": v, "gain": g, "n": n}
            for f, t, c, l, r, v, g, n in zip(self.feature, self.threshold, self.categories, self.left,
                                              self.right, self.value, self.gain, self.n)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        t = cls()
        for nd in d["nodes"]:
            t.feature.append(nd["feature"])
            t.threshold.append(nd["threshold"])
            t.categories.append(None if nd["categories"] is None else tuple(nd["categories"]))
            t.left.append(nd["left"])
            t.right.append(nd["right"])
            t.value.append(nd["value"])
            t.gain.append(nd["gain"])
            t.n.append(nd["n"])
        return t


class _Grower:
    def __init__(self, X, target, criterion, params: TreeParams, categorical_mask, rng, leaf_value=None):
        self.X = X
        self.t = np.asarray(target, dtype=np.float64)
        self.t2 = self.t ** 2
        self.criterion = criterion
        self.p = params
        self.cat = np.asarray(categorical_mask, dtype=bool) & (params.categorical == "set")
        self.rng = rng
        self.leaf_value = leaf_value or (lambda idx: float(self.t[idx].mean()))
        d = X.shape[1]
        mf = params.max_features
        if mf is None:
            self.mf = d
        elif mf == "sqrt":
            self.mf = max(1, int(np.sqrt(d)))
        elif mf == "log2":
            self.mf = max(1, int(np.log2(d)))
        elif isinstance(mf, float):
            self.mf = max(1, int(mf * d))
        else:
            self.mf = min(d, int(mf))

    def grow(self, idx) -> Tree:
        tree = Tree()
        self._node(tree, idx, 0)
        return tree

    def _node(self, tree, idx, depth):
        node = tree.add_node(self.leaf_value(idx), len(idx))
        n = len(idx)
        s1, s2 = self.t[idx].sum(), self.t2[idx].sum()
        parent = float(_impurity(n, s1, s2, self.criterion))
        if depth >= self.p.max_depth or n < self.p.min_samples_split or parent <= 1e-15:
            return node
        best = self._best_split(idx, n, s1, s2, parent)
        if best is None:
            return node
        gain, f, thr, cats, go_left = best
        tree.feature[node] = int(f)
        tree.threshold[node] = float(thr)
        tree.categories[node] = cats
        tree.gain[node] = max(gain, 0.0)
        li = self._node(tree, idx[go_left], depth + 1)
        ri = self._node(tree, idx[~go_left], depth + 1)
        tree.left[node], tree.right[node] = li, ri
        return node

    def _best_split(self, idx, n, s1, s2, parent):
        d = self.X.shape[1]
        feats = np.arange(d) if self.mf >= d else np.sort(self.rng.choice(d, self.mf, replace=False))
        msl = self.p.min_samples_leaf
        best = None
        for f in feats:
            v = self.X[idx, f]
            if self.cat[f]:
                cand = self._categorical(v, idx, n, s1, s2, msl)
            else:
                cand = self._numeric(v, idx, n, s1, s2, msl)
            if cand is None:
                continue
            child, thr, cats = cand
            gain = parent - child
            if best is None or gain > best[0] + 1e-15:
                best = (gain, f, thr, cats)
        if best is None:
            return None
        gain, f, thr, cats = best
        v = self.X[idx, f]
        go_left = np.isin(v, cats) if cats is not None else v <= thr
        return gain, f, thr, cats, go_left

    def _numeric(self, v, idx, n, s1, s2, msl):
        order = np.argsort(v, kind="stable")
        vs = v[order]
        cs1 = np.cumsum(self.t[idx][order])[:-1]
        cs2 = np.cumsum(self.t2[idx][order])[:-1]
        nl = np.arange(1, n)
        ok = (vs[1:] > vs[:-1]) & (nl >= msl) & (n - nl >= msl)
        if not ok.any():
            return None
        nl, cs1, cs2 = nl[ok], cs1[ok], cs2[ok]
        nr = n - nl
        child = (nl * _impurity(nl, cs1, cs2, self.criterion)
                 + nr * _impurity(nr, s1 - cs1, s2 - cs2, self.criterion)) / n
        k = int(np.argmin(child))
        pos = np.where(ok)[0][k]
        return float(child[k]), (vs[pos] + vs[pos + 1]) / 2.0, None

    def _categorical(self, v, idx, n, s1, s2, msl):
        codes = v.astype(int)
        cnt = np.bincount(codes)
        c1 = np.bincount(codes, weights=self.t[idx], minlength=len(cnt))
        c2 = np.bincount(codes, weights=self.t2[idx], minlength=len(cnt))
        present = np.where(cnt > 0)[0]
        if len(present) < 2:
            return None
        if len(present) <= MAX_ONE_VS_REST:
            sets = [(c,) for c in present]
            nl, l1, l2 = cnt[present], c1[present], c2[present]
        else:
            # frequency-ordered heuristic: sort by mean target, take prefixes
            order = present[np.argsort(c1[present] / cnt[present], kind="stable")]
            sets = [tuple(sorted(order[:k + 1])) for k in range(len(order) - 1)]
            nl, l1, l2 = np.cumsum(cnt[order])[:-1], np.cumsum(c1[order])[:-1], np.cumsum(c2[order])[:-1]
        nl = nl.astype(np.float64)
        nr = n - nl
        ok = (nl >= msl) & (nr >= msl)
        if not ok.any():
            return None
        child = (nl * _impurity(nl, l1, l2, self.criterion)
                 + nr * _impurity(nr, s1 - l1, s2 - l2, self.criterion)) / n
        child = np.where(ok, child, np.inf)
        k = int(np.argmin(child))
        return float(child[k]), 0.0, tuple(int(c) for c in sets[k])


class TreeModel:
    def __init__(self, kind: str, trees: list[Tree], params: TreeParams, d: int, task: str,
                 base_score: float = 0.0, importance=None, seed: int = 0):
        if kind not in KINDS:
            raise ValueError(f"unknown tree model kind {kind!r}")
        self.kind = kind
        self.trees = trees
        self.params = params
        self.d = d
        self.task = task
        self.base_score = base_score
        self.seed = seed
        self.importance = np.zeros(d) if importance is None else np.asarray(importance, dtype=np.float64)
        for t in trees:
            if any(f >= d for f in t.feature):
                raise ValueError("split feature index out of range")

    @property
    def is_classification(self) -> bool:
        return self.task == BINARY

    def raw(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features, got {X.shape[1]}")
        if self.kind == "gbm":
            out = np.full(len(X), self.base_score)
            for t in self.trees:
                out += self.params.learning_rate * t.predict(X)
            return out
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def score(self, X) -> np.ndarray:
        """Positive-class probability (classification) or real prediction (regression)."""
        raw = self.raw(X)
        if self.kind == "gbm" and self.is_classification:
            return sigmoid(raw)
        return raw

    def predict(self, X) -> np.ndarray:
        s = self.score(X)
        return (s >= 0.5).astype(int) if self.is_classification else s

    def feature_importance(self) -> np.ndarray:
        return self.importance.copy()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "task": self.task, "d": self.d, "seed": self.seed,
            "params": asdict(self.params), "base_score": self.base_score,
            "importance": self.importance.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeModel":
        return cls(d["kind"], [Tree.from_dict(t) for t in d["trees"]], TreeParams.from_dict(d["params"]),
                   d["d"], d["task"], d["base_score"], d["importance"], d.get("seed", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TreeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _accumulate(importance, tree: Tree, n_root: int, mode: str):
    for f, g, n in zip(tree.feature, tree.gain, tree.n):
        if f >= 0:
            importance[f] += g * (n / n_root if mode == "weighted" else 1.0)


def train_tree_model(kind: str, train: Dataset, hyperparams: TreeParams | dict | None = None, seed: int = 0) -> TreeModel:
    kind = SHORT.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown tree model kind {kind!r}")
    if hyperparams is None:
        params = DEFAULTS[kind]
    elif isinstance(hyperparams, dict):
        params = TreeParams(**{**asdict(DEFAULTS[kind]), **hyperparams})
    else:
        params = hyperparams
    X, y = train.X, train.y.astype(np.float64)
    if len(X) == 0:
        raise ValueError("empty training set")
    task = train.schema.label_space.task
    classification = task == BINARY
    d = X.shape[1]
    cat_mask = train.schema.categorical_mask
    rng = np.random.default_rng(seed)
    importance = np.zeros(d)
    n = len(X)

    if classification and len(np.unique(y)) < 2:
        log.warning("training labels hold a single class; returning a constant predictor")
        const = Tree()
        const.add_node(float(y[0]), n)
        base = float(np.log(max(y[0], 1e-6) / max(1 - y[0], 1e-6))) if kind == "gbm" else 0.0
        return TreeModel(kind, [] if kind == "gbm" else [const], params, d, task, base, importance, seed)

    criterion = "entropy" if classification else "variance"
    if kind in ("decision_tree", "random_forest"):
        trees = []
        for _ in range(params.n_trees if kind == "random_forest" else 1):
            idx = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
            tree = _Grower(X, y, criterion, params, cat_mask, rng).grow(idx)
            _accumulate(importance, tree, len(idx), params.importance)
            trees.append(tree)
        if kind == "random_forest":
            importance /= len(trees)
        return TreeModel(kind, trees, params, d, task, 0.0, importance, seed)

    # gradient boosting on logistic or squared loss
    if classification:
        p0 = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = float(np.log(p0 / (1 - p0)))
    else:
        base = float(y.mean())
    F = np.full(n, base)
    trees = []
    for _ in range(params.n_trees):
        if classification:
            prob = sigmoid(F)
            resid = y - prob
            hess = prob * (1 - prob)
        else:
            resid = y - F
            hess = None
        if params.subsample < 1.0:
            idx = np.sort(rng.choice(n, max(1, int(params.subsample * n)), replace=False))
        else:
            idx = np.arange(n)
        if hess is None:
            leaf = None
        else:
            leaf = lambda rows, r=resid, h=hess: float(r[rows].sum() / (h[rows].sum() + 1e-12))
        tree = _Grower(X, resid, "variance", params, cat_mask, rng, leaf).grow(idx)
        _accumulate(importance, tree, len(idx), params.importance)
        trees.append(tree)
        F += params.learning_rate * tree.predict(X)
    return TreeModel(kind, trees, params, d, task, base, importance, seed)


def feature_importance(m: TreeModel) -> np.ndarray:
    return m.feature_importance()


def predict(m: TreeModel, X) -> np.ndarray:
    return m.predict(X)


def auc(y, scores) -> float:
    """ROC-AUC via the rank-sum statistic, ties counted as one half."""
    y = np.asarray(y).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined for a single-class dataset")
    ranks = rankdata(scores)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mse(y, pred) -> float:
    return float(np.mean((np.asarray(y, dtype=np.float64) - np.asarray(pred, dtype=np.float64)) ** 2))


def evaluate(m, dataset: Dataset) -> float:
    """ROC-AUC for classification, MSE for regression. ``m`` needs a ``score`` method."""
    s = m.score(dataset.X)
    if dataset.schema.label_space.is_classification:
        return auc(dataset.y, s)
    return mse(dataset.y, s)
