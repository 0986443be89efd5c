"""Small reverse-mode network: dense layers, activations, losses and optimizers.

Everything is float64 numpy. A forward pass can keep a tape of intermediate
values; ``Network.backward`` walks that tape in reverse and returns gradients
for every parameter and for the input batch.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")
LOSSES = ("mse", "cross_entropy")


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softmax":
        return softmax(z)
    return z


def _activation_backward(kind, z, a, grad):
    if kind == "relu":
        return grad * (z > 0)
    if kind == "sigmoid":
        return grad * a * (1.0 - a)
    if kind == "softmax":
        return a * (grad - (grad * a).sum(axis=1, keepdims=True))
    return grad


class Network:
    """Chain of dense layers, each followed by an activation.

    ``sizes`` lists the widths from input to output, ``activations`` has one
    entry per layer. Weights are drawn uniformly in +-1/sqrt(fan_in), biases
    start at zero.
    """

    def __init__(self, sizes, activations, seed: int = 0, params=None):
        sizes = [int(s) for s in sizes]
        activations = list(activations)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output width")
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if "softmax" in activations[:-1]:
            raise ValueError("softmax is only allowed as the final activation")
        self.sizes = sizes
        self.activations = activations
        self.seed = seed
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        self.params = [np.array(p, dtype=np.float64) for p in params]
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if self.params[2 * k].shape != (fan_in, fan_out) or self.params[2 * k + 1].shape != (fan_out,):
                raise ValueError(f"parameter shapes of layer {k} do not match sizes")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, X, tape: bool = False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected batch of width {self.input_dim}, got shape {X.shape}")
        a = X
        steps = []
        for k, act in enumerate(self.activations):
            z = a @ self.params[2 * k] + self.params[2 * k + 1]
            out = _activate(act, z)
            steps.append((a, z, out))
            a = out
        return (a, steps) if tape else a

    __call__ = forward

    def backward(self, steps, grad_out, skip_last_activation: bool = False):
        """Push d(loss)/d(output) back through the tape.

        Returns ``(param_grads, input_grad)``. With ``skip_last_activation``
        ``grad_out`` is taken to be the gradient w.r.t. the final pre-activation.
        """
        grads = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        for k in range(len(steps) - 1, -1, -1):
            a_in, z, out = steps[k]
            if not (skip_last_activation and k == len(steps) - 1):
                g = _activation_backward(self.activations[k], z, out, g)
            grads[2 * k] = a_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
        return grads, g

    def loss_and_grads(self, X, targets, loss: str):
        """Mean loss over the batch with parameter and input gradients."""
        out, steps = self.forward(X, tape=True)
        value, g_out, pre_act = loss_gradient(loss, self.activations[-1], out, targets)
        grads, g_in = self.backward(steps, g_out, skip_last_activation=pre_act)
        return value, grads, g_in

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": self.activations,
            "seed": self.seed,
            "params": [p.tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        return cls(d["sizes"], d["activations"], d.get("seed", 0), [np.array(p) for p in d["params"]])

    def copy(self) -> "Network":
        return Network(self.sizes, self.activations, self.seed, [p.copy() for p in self.params])


def loss_gradient(loss: str, final_activation: str, out, targets):
    """Return (mean loss, gradient, gradient_is_w.r.t._pre-activation).

    Cross-entropy needs a sigmoid or softmax output; for those pairings the
    gradient is returned directly w.r.t. the pre-activation (p - y).
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    n = out.shape[0]
    if loss == "mse":
        diff = out - targets
        return float(np.mean(np.sum(diff ** 2, axis=1))), 2.0 * diff / n, False
    if loss == "cross_entropy":
        if final_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"cross-entropy needs a sigmoid or softmax output, not {final_activation!r}")
        p = np.clip(out, 1e-15, 1.0 - 1e-15)
        if final_activation == "sigmoid":
            value = -np.mean(np.sum(targets * np.log(p) + (1 - targets) * np.log(1 - p), axis=1))
        else:
            value = -np.mean(np.sum(targets * np.log(p), axis=1))
        return float(value), (out - targets) / n, True
    raise ValueError(f"unknown loss {loss!r}")


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads) -> bool:
        """Update ``params`` in place. Non-finite gradients skip the step and return False."""
        if any(g.shape != p.shape for p, g in zip(params, grads)):
            raise ValueError("gradient shapes do not match parameters")
        if not all(np.all(np.isfinite(g)) for g in grads):
            log.warning("non-finite gradient, optimizer step skipped")
            return False
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def config(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


@dataclass
class Adagrad:
    lr: float = 0.001
    eps: float = 1e-8

    def __post_init__(self):
        self.acc = None
        self.t = 0

    def step(self, params, grads) -> bool:
        if any(g.shape != p.shape for p, g in zip(params, grads)):
            raise ValueError("gradient shapes do not match parameters")
        if not all(np.all(np.isfinite(g)) for g in grads):
            log.warning("non-finite gradient, optimizer step skipped")
            return False
        if self.acc is None:
            self.acc = [np.zeros_like(p) for p in params]
        self.t += 1
        for p, g, a in zip(params, grads, self.acc):
            a += g * g
            p -= self.lr * g / np.sqrt(a + self.eps)
        return True

    def config(self) -> dict:
        return {"kind": "adagrad", "lr": self.lr, "eps": self.eps}


def make_optimizer(cfg: dict):
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "adam":
        return Adam(**cfg)
    if kind == "adagrad":
        return Adagrad(**cfg)
    raise ValueError(f"unknown optimizer {kind!r}")


def save_network(net: Network, path: str | Path, optimizer=None, extra: dict | None = None):
    d = net.to_dict()
    if optimizer is not None:
        d["optimizer"] = optimizer.config()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_network(path: str | Path) -> Network:
    return Network.from_dict(json.loads(Path(path).read_text()))
