"""Surrogate model: frozen embedding composed with a one-neuron task solver."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingModel
from .nn import Adam, Network, loss_gradient
from .schema import BINARY, Dataset

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


@dataclass
class SolverConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    patience: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        return cls(**(d or {}))


class TaskSolver:
    def __init__(self, net: Network, task: str):
        if net.output_dim != 1 or len(net.sizes) != 2:
            raise ValueError("task solver is a single dense layer with one output neuron")
        self.net = net
        self.task = task

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.task == BINARY else "mse"

    @classmethod
    def build(cls, e: int, task: str, seed: int = 0) -> "TaskSolver":
        act = "sigmoid" if task == BINARY else "identity"
        return cls(Network([e, 1], [act], seed=seed), task)


class SurrogateModel:
    def __init__(self, embedding: EmbeddingModel, solver: TaskSolver):
        if solver.net.input_dim != embedding.e:
            raise ValueError("solver input width must equal the embedding dimension")
        self.embedding = embedding
        self.solver = solver
        self.diagnostics: dict = {}

    @property
    def task(self) -> str:
        return self.solver.task

    @property
    def is_classification(self) -> bool:
        return self.task == BINARY

    @property
    def d(self) -> int:
        return self.embedding.d

    def forward(self, X):
        """Scores and embeddings for a batch, plus a cache for ``backward``."""
        E, ecache = self.embedding.forward(X)
        out, steps = self.solver.net.forward(E, tape=True)
        return out[:, 0], E, (ecache, steps)

    def backward(self, cache, d_score, d_embedding=None, score_is_logit: bool = False):
        """Gradient w.r.t. the input rows given gradients on score and (optionally) embedding.

        With ``score_is_logit`` ``d_score`` is taken w.r.t. the solver pre-activation.
        """
        ecache, steps = cache
        _, dE = self.solver.net.backward(steps, np.asarray(d_score, dtype=np.float64).reshape(-1, 1),
                                         skip_last_activation=score_is_logit)
        if d_embedding is not None:
            dE = dE + d_embedding
        _, dX = self.embedding.backward(ecache, dE)
        return dX

    def score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite input")
        return self.solver.net.forward(self.embedding.embed(X))[:, 0]

    def predict(self, X):
        """Class labels (threshold 0.5) for classification, real outputs for regression."""
        s = self.score(X)
        return (s >= 0.5).astype(int) if self.is_classification else s

    def input_gradient(self, x, y, loss_kind: str | None = None) -> np.ndarray:
        """Gradient of the task loss at (x, y) w.r.t. the input coordinates."""
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        loss_kind = loss_kind or self.solver.loss
        score, _, cache = self.forward(X)
        _, g, pre = loss_gradient(loss_kind, self.solver.net.activations[-1], score.reshape(-1, 1),
                                  np.asarray(y, dtype=np.float64).reshape(-1, 1))
        G = self.backward(cache, g[:, 0], score_is_logit=pre)
        if not np.all(np.isfinite(G)):
            raise FloatingPointError("non-finite input gradient")
        return G[0] if np.ndim(x) == 1 else G

    def to_dict(self) -> dict:
        return {
            "version": BUNDLE_VERSION,
            "task": self.task,
            "embedding": self.embedding.to_dict(),
            "solver": self.solver.net.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        if d.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported surrogate bundle version {d.get('version')}")
        m = cls(EmbeddingModel.from_dict(d["embedding"]), TaskSolver(Network.from_dict(d["solver"]), d["task"]))
        m.diagnostics = d.get("diagnostics", {})
        return m

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_solver(embedding: EmbeddingModel, train: Dataset, cfg: SolverConfig | None = None,
                 validation: Dataset | None = None) -> TaskSolver:
    """Fit the solver on frozen embeddings with Adam; early stop on validation loss."""
    cfg = cfg or SolverConfig()
    task = train.schema.label_space.task
    y = train.y.astype(np.float64)
    if task == BINARY and not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("classification solver needs 0/1 labels")
    solver = TaskSolver.build(embedding.e, task, seed=cfg.seed)
    net = solver.net
    E = embedding.embed(train.X)
    Ev = embedding.embed(validation.X) if validation is not None else None
    yv = validation.y.astype(np.float64) if validation is not None else None
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 7)
    best, best_params, waited = np.inf, [p.copy() for p in net.params], 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(E))
        for start in range(0, len(E), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            _, grads, _ = net.loss_and_grads(E[rows], y[rows].reshape(-1, 1), solver.loss)
            opt.step(net.params, grads)
        if Ev is None:
            continue
        out = net.forward(Ev)
        vloss, _, _ = loss_gradient(solver.loss, net.activations[-1], out, yv.reshape(-1, 1))
        if vloss < best - 1e-9:
            best, best_params, waited = vloss, [p.copy() for p in net.params], 0
        else:
            waited += 1
            if waited >= cfg.patience:
                break
    if Ev is not None and np.isfinite(best):
        net.params = best_params
    return solver


def build_surrogate(embedding: EmbeddingModel, train: Dataset, cfg: SolverConfig | None = None,
                    validation: Dataset | None = None) -> SurrogateModel:
    return SurrogateModel(embedding, train_solver(embedding, train, cfg, validation))
