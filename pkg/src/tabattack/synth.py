"""Synthetic heterogeneous tables with latent-factor correlation and a learnable label."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .schema import BINARY, REGRESSION, SchemaError

DEFAULT_NUMERIC = (
    ("integer", "positive"), ("integer", "positive"), ("integer", "positive"),
    ("positive",), ("positive",), ("positive",),
    ("negative",), ("negative",),
    ("normalized",), ("normalized",),
    (), (),
)


@dataclass
class SynthSpec:
    n_samples: int = 12000
    cardinalities: tuple = (2, 3, 4, 5, 3, 6, 2, 4)
    numeric_kinds: tuple = DEFAULT_NUMERIC
    n_immutable: int = 5
    separation: float = 2.0
    n_latent: int = 3
    task: str = BINARY
    noise: float = 1.0
    cluster_gap: float = 0.6
    monotone_pair: bool = False
    missing_rate: float = 0.0
    name: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        self.cardinalities = tuple(int(k) for k in self.cardinalities)
        self.numeric_kinds = tuple(tuple(k) for k in self.numeric_kinds)
        if any(k < 2 for k in self.cardinalities):
            raise SchemaError("categorical cardinalities must be at least 2")
        if self.n_immutable > self.n_features or self.n_immutable < 0:
            raise SchemaError("n_immutable must lie in [0, number of features]")
        if self.task not in (BINARY, REGRESSION):
            raise SchemaError(f"unknown task {self.task!r}")
        for kinds in self.numeric_kinds:
            if "positive" in kinds and "negative" in kinds:
                raise SchemaError("a feature cannot be both positive and negative")
        if self.n_samples < 10:
            raise SchemaError("need at least 10 samples")

    @property
    def n_features(self) -> int:
        return len(self.cardinalities) + len(self.numeric_kinds) + (2 if self.monotone_pair else 0)

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthSpec":
        return cls(**(d or {}))


def _numeric_raw(u: np.ndarray, kinds: tuple, rng: np.random.Generator) -> np.ndarray:
    """Map a standardised latent column onto a raw scale honouring the constraint kinds."""
    if "normalized" in kinds:
        return 1.0 / (1.0 + np.exp(-u))
    if "integer" in kinds:
        if "negative" in kinds:
            return -np.round(np.clip(3.0 + 2.0 * u, 0, None))
        if "positive" in kinds:
            return np.round(np.clip(3.0 + 2.0 * u, 0, None))
        return np.round(4.0 * u)
    scale = float(10 ** rng.integers(1, 5))
    if "positive" in kinds:
        return scale * np.exp(0.5 * u)
    if "negative" in kinds:
        return -scale * np.exp(0.5 * u)
    return scale * u + scale / 10.0


def synth_generate(spec: SynthSpec) -> tuple[pd.DataFrame, dict]:
    """Return (raw table, schema manifest). Deterministic under ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    Z = rng.standard_normal((n, spec.n_latent))
    # mixture component; every latent column is shifted along its label-effect sign
    component = rng.choice([-1.0, 1.0], size=n)
    columns: dict[str, np.ndarray] = {}
    features = []
    logit = np.zeros(n)

    def latent_column(sign=1.0):
        load = rng.normal(0, 0.6, spec.n_latent)
        u = Z @ load + spec.noise * rng.standard_normal(n) + sign * spec.cluster_gap * component
        return (u - u.mean()) / u.std()

    for j, k in enumerate(spec.cardinalities):
        name = f"cat_{j}"
        u = latent_column()
        levels = np.searchsorted(np.quantile(u, np.linspace(0, 1, k + 1)[1:-1]), u)
        # nominal: level order carries no meaning
        perm = rng.permutation(k)
        letters = [f"{string.ascii_uppercase[i % 26]}{i // 26 or ''}" for i in range(k)]
        labels = np.array(letters)[perm[levels]]
        columns[name] = labels
        effect = np.sort(rng.normal(0, 1.0, k))
        logit += effect[levels]
        features.append({"name": name, "kind": "categorical", "constraints": [], "immutable": False,
                         "categories": letters})

    for j, kinds in enumerate(spec.numeric_kinds):
        name = f"num_{j}"
        sign = rng.choice([-1.0, 1.0])
        u = latent_column(sign)
        columns[name] = _numeric_raw(u, kinds, rng)
        # heavy-tailed weights: a few features dominate, as in real tables
        logit += sign * (0.2 + rng.exponential(0.6)) * u
        feat = {"name": name, "kind": "numeric", "constraints": list(kinds), "immutable": False}
        features.append(feat)

    if spec.monotone_pair:
        u = latent_column()
        birth = np.round(1950.0 + 10.0 * u, 2)
        life = np.clip(30.0 + 4.0 * rng.standard_normal(n), 1.0, None)
        death = np.round(birth + life, 2)
        columns["birth_year"] = birth
        columns["death_year"] = death
        logit += -1.5 * (life - 30.0) / 4.0 + 0.5 * u
        for name in ("birth_year", "death_year"):
            features.append({"name": name, "kind": "numeric", "constraints": ["positive"], "immutable": False})

    logit += Z @ rng.normal(0, 0.5, spec.n_latent)
    logit = (logit - logit.mean()) / logit.std()

    # immutable features are drawn among those carrying label signal (all of them here)
    candidates = [f["name"] for f in features if f["name"] not in ("birth_year", "death_year")]
    for name in rng.choice(candidates, size=min(spec.n_immutable, len(candidates)), replace=False):
        next(f for f in features if f["name"] == name)["immutable"] = True

    if spec.task == BINARY:
        p = 1.0 / (1.0 + np.exp(-3.0 * spec.separation * logit))
        y = (rng.random(n) < p).astype(int)
    else:
        y = 1.5 * spec.separation * logit + 0.3 * rng.standard_normal(n)

    table = pd.DataFrame(columns)
    if spec.missing_rate > 0:
        for f in features:
            if not f["immutable"]:
                mask = rng.random(n) < spec.missing_rate
                table[f["name"]] = table[f["name"]].astype(object).where(~mask, None)
    table["label"] = y
    manifest = {"task": spec.task, "name": spec.name, "features": features}
    return table, manifest


def write_synth(spec: SynthSpec, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, manifest = synth_generate(spec)
    data_path, schema_path = out / "data.csv", out / "schema.json"
    table.to_csv(data_path, index=False, float_format="%.17g")
    schema_path.write_text(json.dumps(manifest, indent=2))
    return data_path, schema_path
