"""Perturbation metrics, attack summaries, transfer rates, histograms and report files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .attack import AttackResult
from .consistency import ValidityReport
from .schema import Schema

CONTINUOUS_TOL = 1e-9

SUMMARY_COLUMNS = ["dataset", "l0_cat", "l0_cat_pct", "l1_num", "l0_num", "l0_num_pct",
                   "l0_total", "l0_total_pct", "success_pct"]
TRANSFER_COLUMNS = ["dataset", "model", "base_pct", "adjusted_pct"]
VALIDITY_COLUMNS = ["dataset", "mode", "n", "feasible_pct", "support_clean_pct", "consistent_pct", "valid_pct"]


@dataclass
class PerturbationMetrics:
    l0_categorical: int
    l0_numeric: int
    l0_total: int
    l0_pct_categorical: float
    l0_pct_numeric: float
    l0_pct_total: float
    l1_numeric: float
    l1_raw: float | None = None

    def __post_init__(self):
        if self.l0_total != self.l0_categorical + self.l0_numeric:
            raise ValueError("l0 total must equal categorical plus numeric")
        if self.l1_numeric < 0 or min(self.l0_categorical, self.l0_numeric) < 0:
            raise ValueError("norms are nonnegative")


def pct(count: float, of: int) -> float:
    """count as a percentage of ``of`` features (0 when there are none)."""
    return 100.0 * count / of if of else 0.0


def changed_mask(x, x_star, schema: Schema) -> np.ndarray:
    """Coordinates that differ: exactly for discrete features, beyond 1e-9 for continuous ones."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape or x.shape != (schema.d,):
        raise ValueError(f"expected two vectors of length {schema.d}")
    discrete = schema.discrete_mask
    diff = np.abs(x_star - x)
    return np.where(discrete, x_star != x, diff > CONTINUOUS_TOL)


def perturbation_metrics(x, x_star, schema: Schema, preprocessor=None) -> PerturbationMetrics:
    changed = changed_mask(x, x_star, schema)
    cat = schema.categorical_mask
    n_cat = int((changed & cat).sum())
    n_num = int((changed & ~cat).sum())
    delta = np.asarray(x_star, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    l1 = float(np.abs(delta[~cat]).sum())
    l1_raw = None
    if preprocessor is not None:
        l1_raw = 0.0
        for j, f in enumerate(schema.features):
            if not f.is_categorical:
                l1_raw += abs(float(delta[j])) * float(preprocessor.scalers[f.name]["scale"])
    return PerturbationMetrics(n_cat, n_num, n_cat + n_num, pct(n_cat, schema.n_categorical),
                               pct(n_num, schema.n_numeric), pct(n_cat + n_num, schema.d), l1, l1_raw)


def perturbed(r: AttackResult) -> bool:
    """Successful results that actually moved the sample."""
    return r.succeeded and not r.initially_adversarial


def attack_summary(results: list[AttackResult], schema: Schema, dataset: str = "dataset") -> dict:
    """Table-3 style row; norms average over perturbed successes, success is over the whole set."""
    if not results:
        raise ValueError("no attack results")
    rows = [perturbation_metrics(r.x, r.x_star, schema) for r in results if perturbed(r)]
    success = pct(sum(r.succeeded for r in results), len(results))
    return summary_row(dataset, rows, success, schema)


def summary_row(dataset: str, rows: list[PerturbationMetrics], success: float, schema: Schema) -> dict:
    out = {"dataset": dataset, "success_pct": success}
    if not rows:
        out.update({c: None for c in SUMMARY_COLUMNS if c not in out})
        return out
    cat = float(np.mean([m.l0_categorical for m in rows]))
    num = float(np.mean([m.l0_numeric for m in rows]))
    out.update({
        "l0_cat": cat,
        "l0_cat_pct": pct(cat, schema.n_categorical),
        "l1_num": float(np.mean([m.l1_numeric for m in rows])),
        "l0_num": num,
        "l0_num_pct": pct(num, schema.n_numeric),
        "l0_total": cat + num,
        "l0_total_pct": pct(cat + num, schema.d),
    })
    return out


def is_fooled(target, x_star, y, tau: float) -> bool:
    """Whether a target misses on x_star: label flip, or regression error beyond tau."""
    out = float(np.asarray(target.predict(np.atleast_2d(x_star)))[0])
    if target.is_classification:
        return int(out) != int(y)
    return abs(out - float(y)) > tau


def transfer_rate(results: list[AttackResult], target, task: str | None = None, tau: float = 0.75) -> float:
    """Percentage of perturbed surrogate successes that also fool ``target``."""
    pool = [r for r in results if perturbed(r)]
    if not pool:
        raise ValueError("no successful adversarial examples to transfer")
    return pct(sum(is_fooled(target, r.x_star, r.y, tau) for r in pool), len(pool))


def prediction_agreement(surrogate, target, X, tau: float = 0.75) -> float:
    """Percentage of rows where surrogate and target agree.

    Classification compares predicted classes; regression counts rows whose
    predictions differ by at most ``tau``. Reported as a diagnostic only.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("no rows to compare")
    a, b = np.asarray(surrogate.predict(X), float), np.asarray(target.predict(X), float)
    same = a == b if target.is_classification else np.abs(a - b) <= tau
    return pct(int(same.sum()), len(X))


def l0_histogram(results: list[AttackResult], schema: Schema) -> dict[int, int]:
    """Counts of perturbed successes by total l0 (bin width 1)."""
    counts: dict[int, int] = {}
    for r in results:
        if perturbed(r):
            k = int(changed_mask(r.x, r.x_star, schema).sum())
            counts[k] = counts.get(k, 0) + 1
    return dict(sorted(counts.items()))


# per-sample results

def result_rows(results: list[AttackResult], schema: Schema, preprocessor=None) -> list[dict]:
    rows = []
    for k, r in enumerate(results):
        m = perturbation_metrics(r.x, r.x_star, schema, preprocessor)
        row = {
            "sample": k,
            "y": r.y,
            "succeeded": int(r.succeeded),
            "initially_adversarial": int(r.initially_adversarial),
            "aborted": r.aborted or "",
            "iterations": r.iterations,
            "score": r.score,
            "selected": ";".join(str(i) for i in r.selected),
            "l0_cat": m.l0_categorical,
            "l0_num": m.l0_numeric,
            "l0_total": m.l0_total,
            "l1_num": m.l1_numeric,
            "l1_raw": "" if m.l1_raw is None else m.l1_raw,
        }
        if r.validity is not None:
            v = r.validity.to_row()
            row.update({f"v_{key}": val for key, val in v.items()})
        for j in range(schema.d):
            row[f"x_{j}"] = float(r.x[j])
        for j in range(schema.d):
            row[f"xs_{j}"] = float(r.x_star[j])
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str] | None = None, header: str | None = None):
    """CSV with repr floats so values round-trip exactly; ``header`` becomes a leading # line."""
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv_rows(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_results(path, results: list[AttackResult], schema: Schema, preprocessor=None, header=None):
    write_csv(path, result_rows(results, schema, preprocessor), header=header)


def read_results(path, schema: Schema) -> list[AttackResult]:
    """Rebuild AttackResults (without traces) from a per-sample CSV."""
    out = []
    for row in read_csv_rows(path):
        x = np.array([float(row[f"x_{j}"]) for j in range(schema.d)])
        xs = np.array([float(row[f"xs_{j}"]) for j in range(schema.d)])
        selected = [int(s) for s in row["selected"].split(";") if s]
        validity = None
        if "v_feasible" in row:
            validity = ValidityReport(
                bool(int(row["v_feasible"])),
                [int(s) for s in row["v_support_violations"].split(";") if s],
                float(row["v_consistency_score"]), float(row["v_epsilon"]),
                bool(int(row["v_consistent"])), bool(int(row["v_valid"])), float(row["v_log_score"]))
        out.append(AttackResult(x, xs, selected, bool(int(row["succeeded"])), int(row["iterations"]),
                                [], validity, bool(int(row["initially_adversarial"])), row["aborted"] or None,
                                float(row["score"]), float(row["y"])))
    return out


def summary_from_rows(rows: list[dict], schema: Schema, dataset: str) -> dict:
    """Table-3 row recomputed from per-sample CSV rows alone."""
    metrics = [PerturbationMetrics(int(r["l0_cat"]), int(r["l0_num"]), int(r["l0_total"]),
                                   pct(int(r["l0_cat"]), schema.n_categorical),
                                   pct(int(r["l0_num"]), schema.n_numeric),
                                   pct(int(r["l0_total"]), schema.d), float(r["l1_num"]))
               for r in rows if r["succeeded"] == "1" and r["initially_adversarial"] == "0"]
    success = pct(sum(r["succeeded"] == "1" for r in rows), len(rows))
    return summary_row(dataset, metrics, success, schema)


def validity_row(results: list[AttackResult], dataset: str, mode: str) -> dict:
    """Share of perturbed successes that are feasible, support-clean, consistent and valid."""
    pool = [r for r in results if perturbed(r) and r.validity is not None]
    n = len(pool)
    return {
        "dataset": dataset,
        "mode": mode,
        "n": n,
        "feasible_pct": pct(sum(r.validity.feasible for r in pool), n) if n else None,
        "support_clean_pct": pct(sum(not r.validity.support_violations for r in pool), n) if n else None,
        "consistent_pct": pct(sum(r.validity.consistent for r in pool), n) if n else None,
        "valid_pct": pct(sum(r.validity.valid for r in pool), n) if n else None,
    }


def round_row(row: dict, digits: int = 6) -> dict:
    return {k: (round(v, digits) if isinstance(v, float) and math.isfinite(v) else v) for k, v in row.items()}


def write_report(out_dir, summary: list[dict], transfer: list[dict], hist: dict, validity: list[dict],
                 header: str | None = None, meta: dict | None = None):
    """Write summary.csv, transfer.csv, l0_hist.json and validity.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "summary.csv", [round_row(r) for r in summary], SUMMARY_COLUMNS, header)
    write_csv(out / "transfer.csv", [round_row(r) for r in transfer], TRANSFER_COLUMNS, header)
    write_csv(out / "validity.csv", [round_row(r) for r in validity], VALIDITY_COLUMNS, header)
    doc = {"histogram": {str(k): v for k, v in hist.items()}}
    if meta:
        doc["_meta"] = meta
    (out / "l0_hist.json").write_text(json.dumps(doc, indent=2) + "\n")


def metrics_dict(m: PerturbationMetrics) -> dict:
    return asdict(m)
