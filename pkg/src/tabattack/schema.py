"""Typed feature space: feature specs, constraint kinds, immutability and labels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

CATEGORICAL = "categorical"
NUMERIC = "numeric"
KINDS = (CATEGORICAL, NUMERIC)

INTEGER = "integer"
POSITIVE = "positive"
NEGATIVE = "negative"
NORMALIZED = "normalized"
CONSTRAINTS = (INTEGER, POSITIVE, NEGATIVE, NORMALIZED)

BINARY = "binary_classification"
REGRESSION = "regression"
TASKS = (BINARY, REGRESSION)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    constraints: frozenset = frozenset()
    immutable: bool = False
    declared_range: tuple[float, float] | None = None
    categories: tuple[str, ...] | None = None
    missing_sentinel: float | None = None

    def __post_init__(self):
        if not self.name:
            raise SchemaError("feature name must be non-empty")
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        object.__setattr__(self, "constraints", frozenset(self.constraints))
        unknown = self.constraints - set(CONSTRAINTS)
        if unknown:
            raise SchemaError(f"{self.name}: unknown constraints {sorted(unknown)}")
        if POSITIVE in self.constraints and NEGATIVE in self.constraints:
            raise SchemaError(f"{self.name}: positive and negative are mutually exclusive")
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise SchemaError(f"{self.name}: categorical feature needs a category list")
            bad = self.constraints & {POSITIVE, NEGATIVE, NORMALIZED}
            if bad:
                raise SchemaError(f"{self.name}: categorical feature cannot be {sorted(bad)}")
            cats = tuple(str(c) for c in self.categories)
            if len(set(cats)) != len(cats):
                raise SchemaError(f"{self.name}: duplicate category labels")
            object.__setattr__(self, "categories", cats)
        elif self.categories is not None:
            raise SchemaError(f"{self.name}: numeric feature cannot list categories")
        if self.declared_range is not None:
            lo, hi = (float(v) for v in self.declared_range)
            if not lo <= hi:
                raise SchemaError(f"{self.name}: empty declared range")
            object.__setattr__(self, "declared_range", (lo, hi))
        if NORMALIZED in self.constraints:
            if self.declared_range is None:
                object.__setattr__(self, "declared_range", (0.0, 1.0))
            elif self.declared_range != (0.0, 1.0):
                raise SchemaError(f"{self.name}: normalized feature must have range [0, 1]")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def is_discrete(self) -> bool:
        """Categorical or integer-valued, i.e. compared exactly rather than with a tolerance."""
        return self.kind == CATEGORICAL or INTEGER in self.constraints

    @property
    def n_categories(self) -> int:
        return len(self.categories) if self.categories else 0

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "name": self.name,
            "kind": self.kind,
            "constraints": sorted(self.constraints),
            "immutable": self.immutable,
        }
        if self.declared_range is not None:
            out["range"] = list(self.declared_range)
        if self.categories is not None:
            out["categories"] = list(self.categories)
        if self.missing_sentinel is not None:
            out["missing_sentinel"] = self.missing_sentinel
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        try:
            name = d["name"]
            kind = d["kind"]
        except KeyError as exc:
            raise SchemaError(f"feature entry missing field {exc}") from None
        return cls(
            name=str(name),
            kind=kind,
            constraints=frozenset(d.get("constraints", [])),
            immutable=bool(d.get("immutable", False)),
            declared_range=tuple(d["range"]) if d.get("range") is not None else None,
            categories=tuple(d["categories"]) if d.get("categories") is not None else None,
            missing_sentinel=d.get("missing_sentinel"),
        )


@dataclass(frozen=True)
class LabelSpace:
    task: str = BINARY

    def __post_init__(self):
        if self.task not in TASKS:
            raise SchemaError(f"unknown task {self.task!r}")

    @property
    def m(self) -> int:
        return 2 if self.task == BINARY else 1

    @property
    def is_classification(self) -> bool:
        return self.task == BINARY

    def one_hot(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=int)
        return np.eye(self.m)[y]


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    label_space: LabelSpace = field(default_factory=LabelSpace)
    label: str = "label"
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise SchemaError("schema needs at least one feature")
        names = [f.name for f in self.features]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate feature names: {dupes}")
        if self.label in names:
            raise SchemaError(f"label column {self.label!r} clashes with a feature name")

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def immutable_set(self) -> frozenset:
        return frozenset(i for i, f in enumerate(self.features) if f.immutable)

    @property
    def immutable_mask(self) -> np.ndarray:
        return np.array([f.immutable for f in self.features], dtype=bool)

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([f.is_categorical for f in self.features], dtype=bool)

    @property
    def discrete_mask(self) -> np.ndarray:
        return np.array([f.is_discrete for f in self.features], dtype=bool)

    @property
    def n_categorical(self) -> int:
        return int(self.categorical_mask.sum())

    @property
    def n_numeric(self) -> int:
        return self.d - self.n_categorical

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, names: Iterable[str]) -> "Schema":
        keep = set(names)
        return Schema(tuple(f for f in self.features if f.name in keep),
                      self.label_space, self.label, self.name)

    def constraint_counts(self) -> dict[str, int]:
        """Feature counts per constraint type, in the layout of a dataset summary table."""
        counts = {c: sum(c in f.constraints for f in self.features) for c in CONSTRAINTS}
        counts[CATEGORICAL] = self.n_categorical
        counts["total"] = self.d
        return counts

    def to_dict(self) -> dict:
        out = {"task": self.label_space.task, "features": [f.to_dict() for f in self.features]}
        if self.label != "label":
            out["label"] = self.label
        if self.name != "dataset":
            out["name"] = self.name
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def parse_schema(manifest: str | dict) -> Schema:
    """Build a Schema from a JSON manifest (text or already-decoded dict)."""
    if isinstance(manifest, str):
        try:
            manifest = json.loads(manifest)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise SchemaError("manifest must be a JSON object")
    if "features" not in manifest:
        raise SchemaError("manifest has no 'features' list")
    features = tuple(FeatureSpec.from_dict(f) for f in manifest["features"])
    return Schema(
        features,
        LabelSpace(manifest.get("task", BINARY)),
        label=manifest.get("label", "label"),
        name=manifest.get("name", "dataset"),
    )


def load_schema(path: str | Path) -> Schema:
    return parse_schema(Path(path).read_text())


def _bits(v: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(v, dtype=np.float64).view(np.uint64)


def check_feasibility(x: Sequence[float], x_star: Sequence[float], schema: Schema) -> bool:
    """True iff every immutable coordinate of x_star is bit-identical to x."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != (schema.d,) or x_star.shape != (schema.d,):
        raise ValueError(f"expected vectors of length {schema.d}, got {x.shape} and {x_star.shape}")
    idx = sorted(schema.immutable_set)
    return bool(np.array_equal(_bits(x[idx]), _bits(x_star[idx])))


def mutable_count(schema: Schema) -> int:
    return schema.d - len(schema.immutable_set)


class Dataset:
    """Preprocessed feature matrix with labels, tied to one schema.

    Rows are validated on construction: categorical columns must hold codes
    0..k-1 and, when a preprocessor is attached, numeric columns must map back
    to raw values honouring their constraints.
    """

    def __init__(self, X, y, schema: Schema, preprocessor=None, index=None, validate=True):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != schema.d:
            raise ValueError(f"expected {schema.d} columns, got {X.shape[1]}")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(y) != len(X):
            raise ValueError("X and y differ in length")
        if schema.label_space.is_classification:
            y = y.astype(int)
        self.X = X
        self.y = y
        self.schema = schema
        self.preprocessor = preprocessor
        self.index = np.arange(len(X)) if index is None else np.asarray(index)
        if validate:
            violations = constraint_violations(X, schema, preprocessor)
            if violations:
                raise ValueError(f"dataset violates feature constraints: {violations[:5]}")

    def __len__(self):
        return len(self.X)

    def __getitem__(self, i: int):
        return self.X[i], self.y[i]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.X[rows], self.y[rows], self.schema, self.preprocessor,
                       index=self.index[rows], validate=False)


def constraint_violations(X: np.ndarray, schema: Schema, preprocessor=None, tol: float = 1e-9) -> list[tuple[int, str]]:
    """List (column, reason) pairs for every column that holds an out-of-constraint value."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = []
    if not np.all(np.isfinite(X)):
        out.extend((j, "non-finite") for j in np.where(~np.isfinite(X).all(axis=0))[0])
    for j, f in enumerate(schema.features):
        col = X[:, j]
        if f.is_categorical:
            if np.any((col != np.round(col)) | (col < 0) | (col > f.n_categories - 1)):
                out.append((j, "category code out of range"))
            continue
        if preprocessor is None:
            continue
        raw = preprocessor.to_raw_numeric(f.name, col)
        if f.missing_sentinel is not None:
            raw = raw[~np.isclose(raw, f.missing_sentinel, rtol=0, atol=tol * max(1.0, abs(f.missing_sentinel)))]
        if INTEGER in f.constraints and np.any(np.abs(raw - np.round(raw)) > tol * np.maximum(1.0, np.abs(raw))):
            out.append((j, "non-integral"))
        if POSITIVE in f.constraints and np.any(raw < -tol):
            out.append((j, "negative value on positive feature"))
        if NEGATIVE in f.constraints and np.any(raw > tol):
            out.append((j, "positive value on negative feature"))
        if NORMALIZED in f.constraints and np.any((raw < -tol) | (raw > 1 + tol)):
            out.append((j, "normalized value outside [0, 1]"))
    return out
