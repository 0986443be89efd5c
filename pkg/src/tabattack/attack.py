"""Saliency-guided l0 attack on the surrogate, with an importance-ranked variant for tree targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .consistency import ConsistencyEstimator, FeatureSupport, ValidityReport, validity_check
from .schema import Schema, check_feasibility, mutable_count
from .surrogate import SurrogateModel

log = logging.getLogger(__name__)

GRADIENT = "surrogate_gradient"
IMPORTANCE = "target_importance"


class NoEligibleFeature(ValueError):
    pass


class AttackAborted(FloatingPointError):
    pass


@dataclass
class AttackConfig:
    max_features: int | None = None
    tau: float = 0.75
    margin_pad: float = 0.1
    inner_steps: int = 20
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_outer_iterations: int | None = None
    selection_mode: str = GRADIENT
    spatial_weight: float = 1.0
    signed: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.selection_mode not in (GRADIENT, IMPORTANCE):
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")

    def budget(self, schema: Schema) -> int:
        lam = mutable_count(schema) if self.max_features is None else self.max_features
        if lam > mutable_count(schema):
            raise ValueError("max_features cannot exceed the number of mutable features")
        return lam

    @classmethod
    def from_dict(cls, d: dict | None) -> "AttackConfig":
        return cls(**(d or {}))


@dataclass
class AttackResult:
    x: np.ndarray
    x_star: np.ndarray
    selected: list
    succeeded: bool
    iterations: int
    trace: list = field(default_factory=list)
    validity: ValidityReport | None = None
    initially_adversarial: bool = False
    aborted: str | None = None
    score: float = float("nan")
    y: float = float("nan")

    @property
    def delta(self) -> np.ndarray:
        return self.x_star - self.x

    def trace_dict(self) -> dict:
        return {
            "selected": [int(i) for i in self.selected],
            "succeeded": self.succeeded,
            "iterations": self.iterations,
            "initially_adversarial": self.initially_adversarial,
            "aborted": self.aborted,
            "trace": self.trace,
            "x": self.x.tolist(),
            "x_star": self.x_star.tolist(),
        }


class Objective:
    """L* = L_adv(M~(z), y) + spatial_weight * ||f(x) - f(z)||_2 for a fixed origin x.

    Classification uses the negated cross-entropy of the true label; regression
    a hinge max(0, tau + pad - |M~(z) - y|).
    """

    def __init__(self, surrogate: SurrogateModel, x, y, cfg: AttackConfig):
        self.m = surrogate
        self.x = np.asarray(x, dtype=np.float64)
        self.y = float(y)
        self.cfg = cfg
        self.fx = surrogate.embedding.embed(self.x)[0]

    def adversarial(self, score: float) -> float:
        if self.m.is_classification:
            p = min(max(score, 1e-15), 1 - 1e-15)
            return float(self.y * np.log(p) + (1 - self.y) * np.log(1 - p))
        return max(0.0, self.cfg.tau + self.cfg.margin_pad - abs(score - self.y))

    def spatial(self, z) -> float:
        return float(np.linalg.norm(self.m.embedding.embed(z)[0] - self.fx))

    def value(self, z) -> float:
        score = float(self.m.score(z)[0])
        return self.adversarial(score) + self.cfg.spatial_weight * self.spatial(z)

    def value_and_grad(self, z):
        Z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        score, E, cache = self.m.forward(Z)
        s = float(score[0])
        diff = E[0] - self.fx
        dist = float(np.linalg.norm(diff))
        d_emb = np.zeros_like(E)
        if dist > 0 and self.cfg.spatial_weight:
            d_emb[0] = self.cfg.spatial_weight * diff / dist
        if self.m.is_classification:
            # d(-CE)/d(logit) = y - p
            g_score, logit = np.array([self.y - s]), True
        else:
            r = s - self.y
            active = self.cfg.tau + self.cfg.margin_pad - abs(r) > 0
            g_score, logit = np.array([-np.sign(r) if active else 0.0]), False
        grad = self.m.backward(cache, g_score, d_emb, score_is_logit=logit)[0]
        value = self.adversarial(s) + self.cfg.spatial_weight * dist
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise AttackAborted("non-finite objective")
        return value, grad


class StepState:
    """Per-coordinate Adam moments; coordinates keep their state across outer iterations."""

    def __init__(self, d: int):
        self.m = np.zeros(d)
        self.v = np.zeros(d)
        self.t = np.zeros(d)

    def reset(self, i: int):
        self.m[i] = self.v[i] = self.t[i] = 0.0


def select_feature(G, S, I, signed: bool = False) -> int:
    """Index of the largest |G_i| (or G_i) outside S and I, lowest index on ties."""
    G = np.asarray(G, dtype=np.float64)
    scores = G if signed else np.abs(G)
    eligible = np.ones(len(G), dtype=bool)
    eligible[list(S)] = False
    eligible[list(I)] = False
    if not eligible.any():
        raise NoEligibleFeature("every feature is selected or immutable")
    return int(np.argmax(np.where(eligible, scores, -np.inf)))


def compute_step(x_star, objective: Objective, S, state: StepState, cfg: AttackConfig,
                 steps: int | None = None) -> np.ndarray:
    """Adam on the coordinates in S for ``inner_steps`` iterations; returns the step alpha.

    ``steps`` overrides the configured iteration count (0 gives a zero step).
    """
    z = np.array(x_star, dtype=np.float64)
    idx = np.asarray(sorted(S), dtype=int)
    if len(idx) == 0:
        raise ValueError("compute_step needs at least one selected feature")
    for _ in range(cfg.inner_steps if steps is None else steps):
        _, g = objective.value_and_grad(z)
        g = g[idx]
        state.t[idx] += 1
        state.m[idx] = cfg.beta1 * state.m[idx] + (1 - cfg.beta1) * g
        state.v[idx] = cfg.beta2 * state.v[idx] + (1 - cfg.beta2) * g * g
        mhat = state.m[idx] / (1 - cfg.beta1 ** state.t[idx])
        vhat = state.v[idx] / (1 - cfg.beta2 ** state.t[idx])
        z[idx] -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    alpha = np.zeros_like(z)
    alpha[idx] = z[idx] - np.asarray(x_star, dtype=np.float64)[idx]
    return alpha


def exit_condition(surrogate: SurrogateModel, x_star, y, tau: float) -> bool:
    """True once x_star fools the surrogate (label flip, or regression error beyond tau)."""
    s = float(surrogate.score(x_star)[0])
    if surrogate.is_classification:
        return int(s >= 0.5) != int(y)
    return abs(s - float(y)) > tau


def craft(surrogate: SurrogateModel, x, y, cfg: AttackConfig, supports: FeatureSupport, schema: Schema,
          importance=None, estimator: ConsistencyEstimator | None = None) -> AttackResult:
    """Greedy feature selection, Adam steps on the selected set, projection each round.

    Selection ranks by surrogate input gradients, or by the static ``importance``
    vector when one is given.
    """
    x = np.asarray(x, dtype=np.float64)
    x_star = x.copy()
    immutable = schema.immutable_set
    lam = cfg.budget(schema)
    max_outer = cfg.max_outer_iterations if cfg.max_outer_iterations is not None else lam
    objective = Objective(surrogate, x, y, cfg)
    state = StepState(schema.d)
    S: list[int] = []
    trace = []
    aborted = None
    initially = exit_condition(surrogate, x_star, y, cfg.tau)
    done = initially
    outer = 0
    while not done and len(S) < lam and outer < max_outer:
        try:
            if importance is not None:
                ranking = importance
                i = select_feature(ranking, S, immutable, signed=True)
            else:
                G = surrogate.input_gradient(x_star, y)
                i = select_feature(G, S, immutable, cfg.signed)
        except NoEligibleFeature:
            break
        except FloatingPointError as exc:
            aborted = str(exc)
            break
        S.append(i)
        state.reset(i)
        try:
            alpha = compute_step(x_star, objective, S, state, cfg)
        except AttackAborted as exc:
            aborted = str(exc)
            break
        for j in S:
            x_star[j] = supports.project_one(j, x_star[j] + alpha[j])
        outer += 1
        done = exit_condition(surrogate, x_star, y, cfg.tau)
        trace.append({"feature": int(i), "objective": objective.value(x_star),
                      "score": float(surrogate.score(x_star)[0])})
    # re-evaluate rather than trust the loop flag
    succeeded = exit_condition(surrogate, x_star, y, cfg.tau) and aborted is None
    result = AttackResult(x, x_star, S, succeeded, outer, trace, None, initially, aborted,
                          float(surrogate.score(x_star)[0]), float(y))
    if estimator is not None:
        result.validity = validity_check(x, x_star, y, estimator, supports, schema)
    assert check_feasibility(x, x_star, schema)
    return result


def craft_adjusted(surrogate: SurrogateModel, target, x, y, cfg: AttackConfig, supports: FeatureSupport,
                   schema: Schema, estimator: ConsistencyEstimator | None = None) -> AttackResult:
    """Same loop as ``craft`` but features are ranked by the target's information gain."""
    importance = np.asarray(target.feature_importance(), dtype=np.float64)
    if not np.any(importance > 0):
        log.warning("target importance is all zero; falling back to gradient ranking")
        importance = None
    return craft(surrogate, x, y, cfg, supports, schema, importance=importance, estimator=estimator)


def craft_many(surrogate: SurrogateModel, X, y, cfg: AttackConfig, supports: FeatureSupport, schema: Schema,
               target=None, estimator: ConsistencyEstimator | None = None, jobs: int = 1) -> list[AttackResult]:
    X = np.atleast_2d(X)
    args = [(surrogate, X[k], y[k], cfg, supports, schema, target, estimator) for k in range(len(X))]
    if jobs > 1 and len(X) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_craft_one, args, chunksize=max(1, len(args) // (4 * jobs))))
    return [_craft_one(a) for a in args]


def _craft_one(args) -> AttackResult:
    surrogate, x, y, cfg, supports, schema, target, estimator = args
    if target is not None and cfg.selection_mode == IMPORTANCE:
        return craft_adjusted(surrogate, target, x, y, cfg, supports, schema, estimator)
    return craft(surrogate, x, y, cfg, supports, schema, estimator=estimator)
