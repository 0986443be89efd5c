"""CSV ingestion, cleaning, imputation, integer encoding and scaling, with exact inverses."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from .schema import (INTEGER, NORMALIZED, Dataset, FeatureSpec, Schema, SchemaError,
                     parse_schema)

log = logging.getLogger(__name__)

MISSING_REASON = "missing>threshold"
CORRELATED_REASON = "correlated"


class PreprocessError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    missing_threshold: float = 0.75
    corr_threshold: float = 0.95
    # per-feature overrides: {"name": "mode" | "mean" | "sentinel"}
    imputation: dict = field(default_factory=dict)
    scaling: str = "minmax"
    # per-feature overrides: {"name": "minmax" | "standardize"}
    scalers: dict = field(default_factory=dict)
    winsorize: tuple[float, float] | None = None
    unseen: str = "error"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "PreprocessConfig":
        d = dict(d or {})
        if d.get("winsorize") is not None:
            d["winsorize"] = tuple(d["winsorize"])
        return cls(**d)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.80
    validation_fraction: float = 0.20
    attack_set_size: int = 500
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if abs(self.train_fraction + self.validation_fraction - 1.0) > 1e-12:
            raise ValueError("train and validation fractions must sum to 1")
        if self.attack_set_size < 0:
            raise ValueError("attack_set_size must be nonnegative")


def read_csv(path: str | Path) -> pd.DataFrame:
    """Read a CSV keeping every cell as text; only empty cells count as missing.

    Leading lines starting with ``#`` (artifact headers) are skipped.
    """
    skip = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            skip += 1
    return pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8", skiprows=skip)


def _numeric_column(table: pd.DataFrame, name: str) -> np.ndarray:
    try:
        return pd.to_numeric(table[name], errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise PreprocessError(f"non-numeric content in numeric column {name!r}: {exc}") from None


def _categorical_column(table: pd.DataFrame, name: str) -> pd.Series:
    col = table[name]
    return col.where(col.isna(), col.astype(str))


def fingerprint(table: pd.DataFrame) -> str:
    return hashlib.sha256(table.to_csv(index=False).encode()).hexdigest()[:16]


def correlated_groups(corr: pd.DataFrame, threshold: float) -> list[list[str]]:
    """Connected components of the |r| > threshold graph, members sorted by name."""
    names = sorted(corr.columns)
    parent = {n: n for n in names}

    def root(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    values = corr.loc[names, names].to_numpy()
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            r = values[a, b]
            if np.isfinite(r) and abs(r) > threshold:
                parent[root(names[b])] = root(names[a])
    groups: dict[str, list[str]] = {}
    for n in names:
        groups.setdefault(root(n), []).append(n)
    return sorted((g for g in groups.values() if len(g) > 1), key=lambda g: g[0])


class Preprocessor:
    def __init__(self, input_schema: Schema, output_schema: Schema, dropped, imputation,
                 encoders, scalers, clips, fitted_on: str, unseen: str = "error"):
        self.input_schema = input_schema
        self.schema = output_schema
        self.dropped = list(dropped)
        self.imputation = dict(imputation)
        self.encoders = {k: dict(v) for k, v in encoders.items()}
        self.decoders = {k: {c: lab for lab, c in v.items()} for k, v in self.encoders.items()}
        self.scalers = dict(scalers)
        self.clips = dict(clips)
        self.fitted_on = fitted_on
        self.unseen = unseen
        for name, s in self.scalers.items():
            if s["kind"] == "standardize" and not s["scale"] > 0:
                raise PreprocessError(f"{name}: standardized feature needs sigma > 0")

    # raw <-> preprocessed for numeric columns: value = (raw - shift) / scale
    def to_raw_numeric(self, name: str, values) -> np.ndarray:
        s = self.scalers[name]
        return np.asarray(values, dtype=np.float64) * s["scale"] + s["shift"]

    def from_raw_numeric(self, name: str, raw) -> np.ndarray:
        s = self.scalers[name]
        return (np.asarray(raw, dtype=np.float64) - s["shift"]) / s["scale"]

    def transform_table(self, table: pd.DataFrame) -> np.ndarray:
        missing = [n for n in self.schema.names if n not in table.columns]
        if missing:
            raise PreprocessError(f"table lacks columns {missing}")
        X = np.empty((len(table), self.schema.d))
        for j, f in enumerate(self.schema.features):
            rule = self.imputation[f.name]
            if f.is_categorical:
                col = _categorical_column(table, f.name).fillna(rule["value"])
                enc = self.encoders[f.name]
                codes = col.map(enc)
                if codes.isna().any():
                    unseen = sorted(set(col[codes.isna()]))
                    if self.unseen != "mode":
                        raise PreprocessError(f"{f.name}: unseen category labels {unseen}")
                    codes = codes.fillna(enc[self.imputation[f.name]["mode"]])
                X[:, j] = codes.to_numpy(dtype=np.float64)
            else:
                raw = _numeric_column(table, f.name)
                raw = np.where(np.isnan(raw), rule["value"], raw)
                if f.name in self.clips:
                    lo, hi = self.clips[f.name]
                    raw = np.clip(raw, lo, hi)
                X[:, j] = self.from_raw_numeric(f.name, raw)
        return X

    def labels(self, table: pd.DataFrame) -> np.ndarray:
        label = self.schema.label
        if label not in table.columns:
            raise PreprocessError(f"table lacks label column {label!r}")
        y = _numeric_column(table, label)
        if np.isnan(y).any():
            raise PreprocessError("label column has missing values")
        if self.schema.label_space.is_classification:
            if not set(np.unique(y)) <= {0.0, 1.0}:
                raise PreprocessError("binary labels must be 0/1")
            return y.astype(int)
        return y

    def inverse_record(self, x) -> dict:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.schema.d,):
            raise ValueError(f"expected a vector of length {self.schema.d}")
        out = {}
        for j, f in enumerate(self.schema.features):
            if f.is_categorical:
                code = x[j]
                if code != np.round(code) or int(code) not in self.decoders[f.name]:
                    raise PreprocessError(f"{f.name}: category code {code} out of range")
                out[f.name] = self.decoders[f.name][int(code)]
            else:
                raw = float(self.to_raw_numeric(f.name, x[j]))
                out[f.name] = int(round(raw)) if INTEGER in f.constraints else raw
        return out

    def to_dict(self) -> dict:
        return {
            "input_schema": self.input_schema.to_dict(),
            "dropped": [list(d) for d in self.dropped],
            "imputation": self.imputation,
            "encoders": self.encoders,
            "scalers": self.scalers,
            "clips": {k: list(v) for k, v in self.clips.items()},
            "kept": self.schema.names,
            "fitted_on": self.fitted_on,
            "unseen": self.unseen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        input_schema = parse_schema(d["input_schema"])
        return cls(input_schema, input_schema.subset(d["kept"]), [tuple(x) for x in d["dropped"]],
                   d["imputation"], d["encoders"], d["scalers"],
                   {k: tuple(v) for k, v in d["clips"].items()}, d["fitted_on"], d["unseen"])

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Preprocessor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_preprocessor(table: pd.DataFrame, schema: Schema, config: PreprocessConfig | None = None) -> Preprocessor:
    cfg = config or PreprocessConfig()
    absent = [n for n in schema.names if n not in table.columns]
    if absent:
        raise PreprocessError(f"table lacks schema columns {absent}")

    numeric = {f.name: _numeric_column(table, f.name) for f in schema.features if not f.is_categorical}
    cats = {f.name: _categorical_column(table, f.name) for f in schema.features if f.is_categorical}

    dropped = []
    for f in schema.features:
        rate = float(np.isnan(numeric[f.name]).mean()) if f.name in numeric else float(cats[f.name].isna().mean())
        if rate > cfg.missing_threshold:
            dropped.append((f.name, MISSING_REASON))
    gone = {n for n, _ in dropped}

    clips = {}
    if cfg.winsorize is not None:
        qlo, qhi = cfg.winsorize
        for name, col in numeric.items():
            obs = col[~np.isnan(col)]
            if name in gone or len(obs) == 0:
                continue
            lo, hi = np.quantile(obs, [qlo, qhi], method="inverted_cdf")
            clips[name] = (float(lo), float(hi))
            numeric[name] = np.where(np.isnan(col), col, np.clip(col, lo, hi))

    live_numeric = [n for n in numeric if n not in gone]
    if len(live_numeric) > 1:
        corr = pd.DataFrame({n: numeric[n] for n in live_numeric}).corr(method="pearson")
        rng = np.random.default_rng(cfg.seed)
        for group in correlated_groups(corr, cfg.corr_threshold):
            keep = group[int(rng.integers(len(group)))]
            dropped.extend((n, CORRELATED_REASON) for n in group if n != keep)
        gone = {n for n, _ in dropped}

    kept = [f for f in schema.features if f.name not in gone]
    if not kept:
        raise PreprocessError("every feature was dropped")
    out_schema = Schema(tuple(kept), schema.label_space, schema.label, schema.name)

    imputation, encoders, scalers = {}, {}, {}
    for f in kept:
        rule = cfg.imputation.get(f.name)
        if rule is None:
            rule = "sentinel" if f.missing_sentinel is not None else ("mode" if f.is_categorical else "mean")
        if f.is_categorical:
            col = cats[f.name]
            unknown = sorted(set(col.dropna()) - set(f.categories))
            if unknown and cfg.unseen != "mode":
                raise PreprocessError(f"{f.name}: labels {unknown} not in the declared categories")
            encoders[f.name] = {lab: i for i, lab in enumerate(f.categories)}
            counts = col[col.isin(f.categories)].value_counts()
            # mode ties resolve to the first-declared category
            mode = max(f.categories, key=lambda c: (counts.get(c, 0), -encoders[f.name][c]))
            value = mode if rule == "mode" else _sentinel(f, rule)
            imputation[f.name] = {"rule": rule, "value": value, "mode": mode}
            continue
        col = numeric[f.name]
        obs = col[~np.isnan(col)]
        if rule == "mean":
            value = float(obs.mean()) if len(obs) else 0.0
            if INTEGER in f.constraints:
                value = float(np.round(value))
        elif rule == "mode":
            vals, counts = np.unique(obs, return_counts=True)
            value = float(vals[np.argmax(counts)]) if len(vals) else 0.0
        else:
            value = float(_sentinel(f, rule))
        imputation[f.name] = {"rule": rule, "value": value}
        filled = np.where(np.isnan(col), value, col)
        kind = cfg.scalers.get(f.name, cfg.scaling)
        if NORMALIZED in f.constraints:
            kind = "minmax"
        if kind == "standardize":
            sigma = float(filled.std())
            if sigma > 0:
                scalers[f.name] = {"kind": "standardize", "shift": float(filled.mean()), "scale": sigma}
                continue
            log.warning("%s: zero variance, falling back to min-max scaling", f.name)
        if f.declared_range is not None:
            lo, hi = f.declared_range
            lo, hi = min(lo, float(filled.min())), max(hi, float(filled.max()))
        else:
            lo, hi = float(filled.min()), float(filled.max())
        scalers[f.name] = {"kind": "minmax", "shift": lo, "scale": (hi - lo) if hi > lo else 1.0}

    return Preprocessor(schema, out_schema, dropped, imputation, encoders, scalers, clips,
                        fingerprint(table), cfg.unseen)


def _sentinel(f: FeatureSpec, rule: str):
    if rule != "sentinel":
        raise PreprocessError(f"{f.name}: unknown imputation rule {rule!r}")
    if f.missing_sentinel is None:
        raise SchemaError(f"{f.name}: sentinel imputation needs a missing_sentinel in the manifest")
    return str(f.missing_sentinel) if f.is_categorical else f.missing_sentinel


def transform(p: Preprocessor, table: pd.DataFrame, with_labels: bool = True) -> Dataset:
    X = p.transform_table(table)
    y = p.labels(table) if with_labels else np.zeros(len(X))
    return Dataset(X, y, p.schema, p)


def inverse_transform(p: Preprocessor, sample) -> dict:
    return p.inverse_record(sample)


def transform_record(p: Preprocessor, record: dict) -> np.ndarray:
    table = pd.DataFrame({k: [str(v)] for k, v in record.items()})
    return p.transform_table(table)[0]


def split(dataset: Dataset, spec: SplitSpec | None = None) -> dict[str, Dataset]:
    """Draw the attack set first, then split the remainder into train/validation."""
    spec = spec or SplitSpec()
    n = len(dataset)
    if n <= spec.attack_set_size:
        raise ValueError(f"dataset of {n} rows is too small for an attack set of {spec.attack_set_size}")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    attack = np.sort(perm[:spec.attack_set_size])
    rest = perm[spec.attack_set_size:]
    n_val = int(round(spec.validation_fraction * len(rest)))
    if spec.stratify and dataset.schema.label_space.is_classification:
        val = _stratified_pick(dataset.y[rest], n_val, rng)
        val_idx = rest[val]
    else:
        val_idx = rest[:n_val]
    train_idx = np.setdiff1d(rest, val_idx)
    return {
        "train": dataset.take(np.sort(train_idx)),
        "validation": dataset.take(np.sort(val_idx)),
        "attack": dataset.take(attack),
    }


def _stratified_pick(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of k rows drawn with per-class quotas by largest remainder."""
    classes, counts = np.unique(y, return_counts=True)
    exact = counts * k / len(y)
    quota = np.floor(exact).astype(int)
    short = k - quota.sum()
    quota[np.argsort(-(exact - quota), kind="stable")[:short]] += 1
    picks = []
    for c, q in zip(classes, quota):
        members = np.where(y == c)[0]
        picks.append(rng.permutation(members)[:q])
    return np.sort(np.concatenate(picks))


def save_dataset(ds: Dataset, path: str | Path, header: str | None = None):
    """Write preprocessed rows as CSV with round-trip-exact floats."""
    cols = ds.schema.names + [ds.schema.label, "row"]
    lines = [] if header is None else [f"# {header}"]
    lines.append(",".join(cols))
    for x, y, r in zip(ds.X, ds.y, ds.index):
        lines.append(",".join([repr(float(v)) for v in x] + [repr(y.item() if hasattr(y, "item") else y), str(int(r))]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path, schema: Schema, preprocessor: Preprocessor | None = None) -> Dataset:
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    X = df[schema.names].to_numpy(dtype=np.float64)
    y = df[schema.label].to_numpy()
    return Dataset(X, y, schema, preprocessor, index=df["row"].to_numpy())


def config_dict(cfg) -> dict:
    return asdict(cfg)
