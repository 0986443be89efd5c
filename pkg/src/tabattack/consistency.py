"""Per-feature supports with projection, class-conditional consistency scoring and validity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .schema import INTEGER, NEGATIVE, POSITIVE, Dataset, Schema, check_feasibility

SET, LATTICE, INTERVAL = "set", "lattice", "interval"


class FeatureSupport:
    """Where each feature may legally sit, in preprocessed units.

    ``set``: finite observed values (categorical codes). ``lattice``: raw
    integers k in [lo, hi] mapped through value = (k - shift) / scale.
    ``interval``: closed range [lo, hi].
    """

    def __init__(self, entries: list[dict]):
        self.entries = entries
        for i, e in enumerate(entries):
            if e["kind"] == SET and not e["values"]:
                raise ValueError(f"feature {i}: empty support")
            if e["kind"] != SET and not e["lo"] <= e["hi"]:
                raise ValueError(f"feature {i}: empty support")
        self._sets = {i: np.asarray(e["values"], dtype=np.float64) for i, e in enumerate(entries) if e["kind"] == SET}

    def __len__(self):
        return len(self.entries)

    def project_one(self, i: int, v: float) -> float:
        e = self.entries[i]
        if e["kind"] == INTERVAL:
            return float(min(max(v, e["lo"]), e["hi"]))
        if e["kind"] == LATTICE:
            k = float(np.round(v * e["scale"] + e["shift"]))
            k = min(max(k, e["lo"]), e["hi"])
            return float((k - e["shift"]) / e["scale"])
        vals = self._sets[i]
        j = int(np.searchsorted(vals, v))
        if j == 0:
            return float(vals[0])
        if j == len(vals):
            return float(vals[-1])
        lo, hi = vals[j - 1], vals[j]
        # ties go to the lower value
        return float(lo if v - lo <= hi - v else hi)

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (len(self.entries),):
            raise ValueError(f"expected a vector of length {len(self.entries)}")
        return np.array([self.project_one(i, v) for i, v in enumerate(x)])

    def violations(self, x) -> list[int]:
        x = np.asarray(x, dtype=np.float64)
        p = self.project(x)
        return [i for i in range(len(x)) if p[i] != x[i]]

    def to_dict(self) -> dict:
        return {"features": self.entries}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSupport":
        return cls(d["features"])


def fit_supports(train: Dataset, schema: Schema) -> FeatureSupport:
    if len(train) == 0:
        raise ValueError("cannot fit supports on an empty dataset")
    pre = train.preprocessor
    entries = []
    for j, f in enumerate(schema.features):
        col = train.X[:, j]
        if f.is_categorical:
            entries.append({"kind": SET, "values": sorted(float(v) for v in np.unique(col))})
            continue
        if pre is not None:
            s = pre.scalers[f.name]
            shift, scale = float(s["shift"]), float(s["scale"])
        else:
            shift, scale = 0.0, 1.0
        raw = col * scale + shift
        obs_lo, obs_hi = float(raw.min()), float(raw.max())
        lo, hi = obs_lo, obs_hi
        if f.declared_range is not None:
            lo, hi = max(lo, f.declared_range[0]), min(hi, f.declared_range[1])
        if POSITIVE in f.constraints:
            lo = max(lo, 0.0)
        if NEGATIVE in f.constraints:
            hi = min(hi, 0.0)
        if hi < lo:
            raise ValueError(f"{f.name}: observed values contradict the declared constraints")
        if INTEGER in f.constraints:
            # value = (k - shift) / scale for raw integers k in [lo, hi]
            lo_k, hi_k = math.ceil(lo - 1e-9), math.floor(hi + 1e-9)
            entries.append({"kind": LATTICE, "lo": float(lo_k), "hi": float(max(lo_k, hi_k)),
                            "shift": shift, "scale": scale})
            continue
        # reuse observed extremes verbatim so in-support rows are never nudged by rounding
        pre_lo = float(col.min()) if lo == obs_lo else float((lo - shift) / scale)
        pre_hi = float(col.max()) if hi == obs_hi else float((hi - shift) / scale)
        entries.append({"kind": INTERVAL, "lo": pre_lo, "hi": pre_hi})
    return FeatureSupport(entries)


def project(x_star, supports: FeatureSupport, schema: Schema | None = None) -> np.ndarray:
    return supports.project(x_star)


@dataclass
class ValidityReport:
    feasible: bool
    support_violations: list
    consistency_score: float
    epsilon: float
    consistent: bool
    valid: bool
    log_score: float = float("nan")

    def to_row(self) -> dict:
        return {
            "feasible": int(self.feasible),
            "support_violations": ";".join(str(v) for v in self.support_violations),
            "consistency_score": self.consistency_score,
            "log_score": self.log_score,
            "epsilon": self.epsilon,
            "consistent": int(self.consistent),
            "valid": int(self.valid),
        }


@dataclass
class EstimatorConfig:
    n_bins: int = 20
    alpha: float = 1.0
    penalty: float = 0.5
    ridge: float = 1e-6
    percentile: float = 1.0
    max_discrete: int = 32
    regression_bins: int = 10

    @classmethod
    def from_dict(cls, d: dict | None) -> "EstimatorConfig":
        return cls(**(d or {}))


class ConsistencyEstimator:
    """Class-conditional proxy for P(X = x | y).

    log score = sum_i log p_i(x_i | y) - penalty * Mahalanobis^2 of the numeric
    block against the class mean and covariance. Discrete features use
    Laplace-smoothed frequencies over the values seen with that class (unseen
    values get probability 0); continuous ones use smoothed histograms over
    their support.
    """

    def __init__(self, cfg: EstimatorConfig, classes, discrete, continuous, numeric_idx,
                 center, spread, means, precisions, log_eps, class_edges=None):
        self.cfg = cfg
        self.classes = [int(c) for c in classes]
        self.discrete = discrete
        self.continuous = continuous
        self.numeric_idx = np.asarray(numeric_idx, dtype=int)
        self.center = np.asarray(center, dtype=np.float64)
        self.spread = np.asarray(spread, dtype=np.float64)
        self.means = {int(c): np.asarray(m, dtype=np.float64) for c, m in means.items()}
        self.precisions = {int(c): np.asarray(p, dtype=np.float64) for c, p in precisions.items()}
        self.log_eps = {int(c): float(v) for c, v in log_eps.items()}
        self.class_edges = None if class_edges is None else np.asarray(class_edges, dtype=np.float64)

    def class_of(self, y) -> int:
        if self.class_edges is not None:
            c = int(np.searchsorted(self.class_edges, float(y), side="right"))
        else:
            c = int(y)
        if c not in self.means:
            raise KeyError(f"class {y} was not seen when fitting the estimator")
        return c

    def log_score(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64)
        c = self.class_of(y)
        total = 0.0
        for j, table in self.discrete.items():
            p = table[c].get(repr(float(x[j])), 0.0)
            if p <= 0.0:
                return -math.inf
            total += math.log(p)
        for j, h in self.continuous.items():
            lo, hi, dens = h["lo"], h["hi"], h["density"][c]
            if x[j] < lo or x[j] > hi:
                return -math.inf
            if hi > lo:
                b = min(int((x[j] - lo) / (hi - lo) * len(dens)), len(dens) - 1)
            else:
                b = 0
            total += math.log(dens[b])
        if len(self.numeric_idx):
            z = (x[self.numeric_idx] - self.center) / self.spread - self.means[c]
            total -= self.cfg.penalty * float(z @ self.precisions[c] @ z)
        return total

    def score(self, x, y) -> float:
        return math.exp(self.log_score(x, y))

    def epsilon(self, y) -> float:
        return math.exp(self.log_eps[self.class_of(y)])

    def log_epsilon(self, y) -> float:
        return self.log_eps[self.class_of(y)]

    def is_consistent_log(self, log_score: float, y) -> bool:
        return log_score > self.log_epsilon(y)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "classes": self.classes,
            "discrete": {str(j): {str(c): t for c, t in tab.items()} for j, tab in self.discrete.items()},
            "continuous": {str(j): {"lo": h["lo"], "hi": h["hi"],
                                    "density": {str(c): list(v) for c, v in h["density"].items()}}
                           for j, h in self.continuous.items()},
            "numeric_idx": self.numeric_idx.tolist(),
            "center": self.center.tolist(),
            "spread": self.spread.tolist(),
            "means": {str(c): m.tolist() for c, m in self.means.items()},
            "precisions": {str(c): p.tolist() for c, p in self.precisions.items()},
            "log_eps": {str(c): v for c, v in self.log_eps.items()},
            "class_edges": None if self.class_edges is None else self.class_edges.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyEstimator":
        discrete = {int(j): {int(c): t for c, t in tab.items()} for j, tab in d["discrete"].items()}
        continuous = {int(j): {"lo": h["lo"], "hi": h["hi"],
                               "density": {int(c): np.asarray(v) for c, v in h["density"].items()}}
                      for j, h in d["continuous"].items()}
        return cls(EstimatorConfig(**d["config"]), d["classes"], discrete, continuous, d["numeric_idx"],
                   d["center"], d["spread"], d["means"], d["precisions"], d["log_eps"], d["class_edges"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ConsistencyEstimator":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_estimator(train: Dataset, schema: Schema, supports: FeatureSupport,
                  cfg: EstimatorConfig | None = None) -> ConsistencyEstimator:
    cfg = cfg or EstimatorConfig()
    X = train.X
    edges = None
    if schema.label_space.is_classification:
        cls = train.y.astype(int)
    else:
        from .embedding import equal_frequency_bins
        cls, edges = equal_frequency_bins(train.y, cfg.regression_bins)
    classes = sorted(int(c) for c in np.unique(cls))

    discrete, continuous = {}, {}
    for j, f in enumerate(schema.features):
        col = X[:, j]
        distinct = np.unique(col)
        if f.is_categorical or (INTEGER in f.constraints and len(distinct) <= cfg.max_discrete):
            tab = {}
            for c in classes:
                vals, counts = np.unique(col[cls == c], return_counts=True)
                total = counts.sum() + cfg.alpha * len(vals)
                tab[c] = {repr(float(v)): float((k + cfg.alpha) / total) for v, k in zip(vals, counts)}
            discrete[j] = tab
            continue
        e = supports.entries[j]
        if e["kind"] == LATTICE:
            lo, hi = (e["lo"] - e["shift"]) / e["scale"], (e["hi"] - e["shift"]) / e["scale"]
        else:
            lo, hi = e["lo"], e["hi"]
        lo, hi = min(lo, float(col.min())), max(hi, float(col.max()))
        dens = {}
        for c in classes:
            if hi > lo:
                counts, _ = np.histogram(col[cls == c], bins=cfg.n_bins, range=(lo, hi))
                width = (hi - lo) / cfg.n_bins
            else:
                counts, width = np.array([float((cls == c).sum())]), 1.0
            dens[c] = (counts + cfg.alpha) / (counts.sum() + cfg.alpha * len(counts)) / width
        continuous[j] = {"lo": float(lo), "hi": float(hi), "density": dens}

    numeric_idx = np.array([j for j, f in enumerate(schema.features) if not f.is_categorical], dtype=int)
    center = X[:, numeric_idx].mean(axis=0) if len(numeric_idx) else np.zeros(0)
    spread = X[:, numeric_idx].std(axis=0) if len(numeric_idx) else np.zeros(0)
    spread = np.where(spread > 0, spread, 1.0)
    means, precisions = {}, {}
    for c in classes:
        Z = (X[cls == c][:, numeric_idx] - center) / spread
        mu = Z.mean(axis=0)
        if len(Z) > 1:
            cov = np.atleast_2d(np.cov(Z, rowvar=False))
        else:
            cov = np.zeros((len(numeric_idx), len(numeric_idx)))
        cov = cov + cfg.ridge * np.eye(len(numeric_idx))
        means[c] = mu
        precisions[c] = np.linalg.inv(cov)

    est = ConsistencyEstimator(cfg, classes, discrete, continuous, numeric_idx, center, spread,
                               means, precisions, {c: 0.0 for c in classes}, edges)
    log_eps = {}
    for c in classes:
        rows = np.where(cls == c)[0]
        label = train.y[rows[0]]
        scores = np.array([est.log_score(X[r], label if edges is None else train.y[r]) for r in rows])
        finite = scores[np.isfinite(scores)]
        log_eps[c] = float(np.percentile(finite, cfg.percentile)) if len(finite) else -math.inf
    est.log_eps = log_eps
    return est


def consistency_score(est: ConsistencyEstimator, x, y) -> float:
    return est.score(x, y)


def is_consistent(score: float, epsilon: float) -> bool:
    return score > epsilon


def validity_check(x, x_star, y, est: ConsistencyEstimator, supports: FeatureSupport, schema: Schema,
                   epsilon: float | None = None) -> ValidityReport:
    feasible = check_feasibility(x, x_star, schema)
    violations = supports.violations(x_star)
    log_s = est.log_score(x_star, y)
    if epsilon is None:
        log_e = est.log_epsilon(y)
        consistent = log_s > log_e
        epsilon = math.exp(log_e)
    else:
        consistent = (math.exp(log_s) > epsilon) if epsilon > 0 else log_s > -math.inf
    return ValidityReport(feasible, violations, math.exp(log_s), epsilon, consistent,
                          feasible and consistent, log_s)
