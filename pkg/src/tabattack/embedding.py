"""Metric-learning embedding trained with batch-hard triplet loss under cosine distance."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Adagrad, Network
from .schema import Dataset, Schema

log = logging.getLogger(__name__)


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for zero vectors")
    return float(1.0 - (a @ b) / (na * nb))


def cosine_distance_matrix(E) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance is undefined for zero vectors")
    U = E / norms
    return 1.0 - U @ U.T


def equal_frequency_bins(targets, n_bins: int):
    """Label each target with one of ``n_bins`` equally populated, ordered bins.

    Returns ``(labels, edges)``; edges are the strictly increasing cut points
    between consecutive bins. Tied targets always share a bin, so heavy ties
    can leave fewer usable bins, in which case a warning is emitted.
    """
    t = np.asarray(targets, dtype=np.float64)
    n = len(t)
    if n_bins < 2:
        raise ValueError("need at least two bins")
    if n < n_bins:
        raise ValueError(f"cannot split {n} targets into {n_bins} bins")
    sorted_t = np.sort(t)
    # rank of each target; tie groups take the bin of their lowest-ranked member
    first = np.searchsorted(sorted_t, t, side="left")
    raw = (first * n_bins) // n
    used = np.unique(raw)
    labels = np.searchsorted(used, raw)
    if len(used) < n_bins:
        warnings.warn(f"only {len(used)} distinct bins available out of {n_bins} requested")
    edges = []
    for b in range(len(used) - 1):
        hi = t[labels == b].max()
        lo = t[labels == b + 1].min()
        edges.append((hi + lo) / 2.0)
    return labels, np.array(edges)


def batch_hard_triplet_loss(E, labels, margin: float = 0.3, soft: bool = False, return_grad: bool = False):
    """Mean over anchors of the hinge on hardest positive vs hardest negative distance.

    Anchors lacking a positive or a negative in the batch are skipped. With
    ``return_grad`` the gradient w.r.t. ``E`` is returned as well.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(E)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance is undefined for zero vectors")
    U = E / norms
    D = 1.0 - U @ U.T
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} anchors lack a positive or negative and are skipped")
    if not valid.any():
        raise ValueError("batch needs at least two classes with two members each")
    a = np.where(valid)[0]
    hp = np.argmax(np.where(pos, D, -np.inf), axis=1)[a]
    hn = np.argmin(np.where(neg, D, np.inf), axis=1)[a]
    gap = D[a, hp] - D[a, hn]
    if soft:
        per = np.logaddexp(0.0, gap)
        weight = 1.0 / (1.0 + np.exp(-gap))
    else:
        per = np.maximum(0.0, margin + gap)
        weight = (margin + gap > 0).astype(np.float64)
    loss = float(per.mean())
    if not return_grad:
        return loss
    W = np.zeros((n, n))
    scale = weight / len(a)
    np.add.at(W, (a, hp), scale)
    np.add.at(W, (a, hn), -scale)
    # D_ij = 1 - u_i.u_j
    dU = -(W + W.T) @ U
    dE = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms
    return loss, dE


@dataclass
class TripletConfig:
    margin: float = 0.3
    soft: bool = False
    classes_per_batch: int | None = None
    samples_per_class: int | None = None
    batch_size: int = 32
    epochs: int = 50
    lr: float = 0.001
    n_bins: int = 10
    seed: int = 0

    def composition(self, regression: bool) -> tuple[int, int]:
        P = self.classes_per_batch or (4 if regression else 2)
        K = self.samples_per_class or self.batch_size // P
        if P * K != self.batch_size or P < 2 or K < 2:
            raise ValueError(f"batch composition {P}x{K} does not give batch size {self.batch_size}")
        return P, K

    @classmethod
    def from_dict(cls, d: dict | None) -> "TripletConfig":
        return cls(**(d or {}))


class EmbeddingModel:
    """f: preprocessed row -> R^e.

    Rows pass through a fixed affine map (x - input_shift) * input_scale before
    the network; categorical codes thereby enter as scaled integers. Outputs
    are unit-normalised when ``normalize`` is set so downstream consumers see
    the same geometry the cosine-trained network was shaped for.
    """

    def __init__(self, net: Network, input_scale, normalize: bool = True, bin_edges=None, input_shift=None):
        self.net = net
        self.input_scale = np.asarray(input_scale, dtype=np.float64)
        self.input_shift = (np.zeros_like(self.input_scale) if input_shift is None
                            else np.asarray(input_shift, dtype=np.float64))
        self.normalize = normalize
        self.bin_edges = None if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
        if self.e < 2:
            raise ValueError("embedding dimension must be at least 2")
        if self.bin_edges is not None and np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        self.history: list[float] = []

    @property
    def e(self) -> int:
        return self.net.output_dim

    @property
    def d(self) -> int:
        return self.net.input_dim

    def raw_forward(self, X, tape=False):
        return self.net.forward(self.prepare(X), tape=tape)

    def prepare(self, X) -> np.ndarray:
        return (np.atleast_2d(X) - self.input_shift) * self.input_scale

    def forward(self, X):
        """Embed a batch, keeping what ``backward`` needs."""
        G, steps = self.raw_forward(X, tape=True)
        if not self.normalize:
            return G, (steps, None, None)
        norms = np.linalg.norm(G, axis=1, keepdims=True)
        norms = np.maximum(norms, 1e-12)
        U = G / norms
        return U, (steps, U, norms)

    def backward(self, cache, dE):
        steps, U, norms = cache
        if U is not None:
            dE = (dE - U * np.sum(U * dE, axis=1, keepdims=True)) / norms
        grads, dX = self.net.backward(steps, dE)
        return grads, dX * self.input_scale

    def embed(self, X) -> np.ndarray:
        return self.forward(X)[0]

    __call__ = embed

    def to_dict(self) -> dict:
        d = self.net.to_dict()
        d.update({
            "e": self.e,
            "input_scale": self.input_scale.tolist(),
            "input_shift": self.input_shift.tolist(),
            "normalize": self.normalize,
            "bin_edges": None if self.bin_edges is None else self.bin_edges.tolist(),
        })
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingModel":
        return cls(Network.from_dict(d), d["input_scale"], d.get("normalize", True), d.get("bin_edges"),
                   d.get("input_shift"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def checksum(self) -> str:
        return self.net.checksum()


def input_standardization(X) -> tuple[np.ndarray, np.ndarray]:
    """Column means and inverse standard deviations (1 for constant columns)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sd = X.std(axis=0)
    return X.mean(axis=0), np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 1.0)


def build_embedding(schema: Schema, e: int, seed: int = 0, normalize: bool = True, X=None) -> EmbeddingModel:
    """Two relu layers of width max(2d, 32) and a linear e-wide output."""
    d = schema.d
    width = max(2 * d, 32)
    net = Network([d, width, width, e], ["relu", "relu", "identity"], seed=seed)
    if X is None:
        shift, scale = np.zeros(d), np.ones(d)
    else:
        shift, scale = input_standardization(X)
    return EmbeddingModel(net, scale, normalize=normalize, input_shift=shift)


def metric_labels(train: Dataset, cfg: TripletConfig):
    """Class labels for metric learning: the labels themselves, or target bins for regression."""
    if train.schema.label_space.is_classification:
        return train.y.astype(int), None
    labels, edges = equal_frequency_bins(train.y, cfg.n_bins)
    return labels, edges


def sample_batch(labels, P: int, K: int, rng: np.random.Generator, members=None):
    members = members or {c: np.where(labels == c)[0] for c in np.unique(labels)}
    classes = sorted(members)
    if len(classes) < 2:
        raise ValueError("metric learning needs at least two classes")
    chosen = rng.choice(classes, size=min(P, len(classes)), replace=False)
    rows = []
    for c in chosen:
        m = members[c]
        rows.append(rng.choice(m, size=K, replace=len(m) < K))
    return np.concatenate(rows)


def train_embedding(train: Dataset, schema: Schema, cfg: TripletConfig | None = None, e: int = 4,
                    normalize: bool = True) -> EmbeddingModel:
    cfg = cfg or TripletConfig()
    regression = not schema.label_space.is_classification
    P, K = cfg.composition(regression)
    labels, edges = metric_labels(train, cfg)
    model = build_embedding(schema, e, seed=cfg.seed, normalize=normalize, X=train.X)
    model.bin_edges = edges
    rng = np.random.default_rng(cfg.seed + 1)
    members = {c: np.where(labels == c)[0] for c in np.unique(labels)}
    small = [c for c, m in members.items() if len(m) < K]
    if small:
        log.warning("classes %s have fewer than %d members; sampling with replacement", small, K)
    opt = Adagrad(lr=cfg.lr)
    n_batches = max(1, len(train) // cfg.batch_size)
    X = model.prepare(train.X)
    net = model.net
    for _ in range(cfg.epochs):
        total = 0.0
        for _ in range(n_batches):
            rows = sample_batch(labels, P, K, rng, members)
            G, steps = net.forward(X[rows], tape=True)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                loss, dG = batch_hard_triplet_loss(G, labels[rows], cfg.margin, cfg.soft, return_grad=True)
            grads, _ = net.backward(steps, dG)
            opt.step(net.params, grads)
            total += loss
        model.history.append(total / n_batches)
    return model
