"""One test per acceptance criterion; each prints a PASS/FAIL line."""
import math
import subprocess
import sys
import time
import warnings

import numpy as np
from conftest import REFERENCE, record
from tabattack.consistency import ConsistencyEstimator, FeatureSupport
from tabattack.embedding import batch_hard_triplet_loss
from tabattack.evaluation import perturbation_metrics, read_csv_rows, read_results
from tabattack.nn import Network, loss_gradient
from tabattack.pipeline import load_target
from tabattack.preprocess import Preprocessor, load_dataset
from tabattack.schema import NUMERIC, Dataset, FeatureSpec, LabelSpace, Schema, parse_schema
from tabattack.surrogate import SurrogateModel
from tabattack.trees import TreeParams, train_tree_model


def load_run(r):
    schema = parse_schema(r.json("prep/schema.json"))
    pre = Preprocessor.from_dict(r.json("prep/preprocessor.json"))
    return schema, pre


def all_result_files(r):
    return sorted((r.out / "results").glob("results_*.csv"))


# 1. gradient correctness

def _network_case(rng):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 6)) for _ in range(depth + 1)]
    acts = [str(rng.choice(["relu", "sigmoid", "identity"])) for _ in range(depth)]
    loss = str(rng.choice(["mse", "cross_entropy"]))
    if loss == "cross_entropy":
        acts[-1] = "softmax" if sizes[-1] > 1 and rng.random() < 0.5 else "sigmoid"
    net = Network(sizes, acts, seed=int(rng.integers(1 << 30)))
    X = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
    if loss == "cross_entropy":
        if acts[-1] == "softmax":
            T = np.eye(sizes[-1])[rng.integers(0, sizes[-1], len(X))]
        else:
            T = rng.integers(0, 2, (len(X), sizes[-1])).astype(float)
    else:
        T = rng.normal(size=(len(X), sizes[-1]))
    return net, X, T, loss


def _loss(net, X, T, loss):
    return loss_gradient(loss, net.activations[-1], net.forward(X), T)[0]


def _rel(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        net, X, T, loss = _network_case(rng)
        _, grads, g_in = net.loss_and_grads(X, T, loss)
        for k, P in enumerate(net.params):
            num = np.zeros_like(P)
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + h
                up = _loss(net, X, T, loss)
                P[idx] = old - h
                down = _loss(net, X, T, loss)
                P[idx] = old
                num[idx] = (up - down) / (2 * h)
            worst = max(worst, _rel(grads[k], num))
        num = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            old = X[idx]
            X[idx] = old + h
            up = _loss(net, X, T, loss)
            X[idx] = old - h
            down = _loss(net, X, T, loss)
            X[idx] = old
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel(g_in, num))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    record("C1 gradient correctness", ok, f"max relative error {worst:.2e} over 100 networks in {elapsed:.1f}s")
    assert ok


# 2. triplet oracle

def _cos(a, b):
    return 1.0 - sum(p * q for p, q in zip(a, b)) / (math.sqrt(sum(p * p for p in a)) * math.sqrt(sum(q * q for q in b)))


def _triplet_oracle(E, labels, margin):
    B = len(E)
    rows = [list(map(float, e)) for e in E]
    per = []
    for a in range(B):
        best = None
        for p in range(B):
            if p == a or labels[p] != labels[a]:
                continue
            for n in range(B):
                if labels[n] == labels[a]:
                    continue
                v = max(0.0, margin + _cos(rows[a], rows[p]) - _cos(rows[a], rows[n]))
                best = v if best is None else max(best, v)
        if best is not None:
            per.append(best)
    return sum(per) / len(per)


def test_criterion_02_triplet_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        B = int(rng.integers(4, 33))
        labels = rng.integers(0, int(rng.integers(2, 5)), B)
        labels[:2] = [0, 0]
        labels[2:4] = [1, 1]
        E = rng.normal(size=(B, int(rng.integers(2, 9))))
        margin = float(rng.uniform(0, 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = batch_hard_triplet_loss(E, labels, margin)
        worst = max(worst, abs(got - _triplet_oracle(E, labels, margin)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 60
    record("C2 triplet oracle", ok, f"max |loss - oracle| {worst:.1e} over 500 batches in {elapsed:.1f}s")
    assert ok


# 3. feasibility

def test_criterion_03_feasibility(reference_runs):
    total, bad = 0, 0
    for r in reference_runs:
        schema, pre = load_run(r)
        assert len(schema.immutable_set) / schema.d >= 0.25
        attack = load_dataset(r.out / "prep" / "attack.csv", schema, pre)
        imm = sorted(schema.immutable_set)
        for path in all_result_files(r):
            rows = read_csv_rows(path)
            for k, row in enumerate(rows):
                xs = np.array([float(row[f"xs_{j}"]) for j in imm])
                x = attack.X[k, imm]
                total += 1
                bad += int(not np.array_equal(xs.view(np.uint64), x.view(np.uint64)))
    ok = total >= 1000 and bad == 0
    record("C3 feasibility", ok, f"{total - bad}/{total} outputs keep immutable coordinates bit-identical")
    assert ok


# 4. projection

def test_criterion_04_projection(reference_runs):
    total, bad = 0, 0
    for r in reference_runs:
        schema, pre = load_run(r)
        supports = FeatureSupport.from_dict(r.json("prep/supports.json"))
        full = load_dataset(r.out / "prep" / "full.csv", schema, pre)
        observed = {j: set(np.unique(full.X[:, j])) for j, f in enumerate(schema.features) if f.is_categorical}
        for path in all_result_files(r):
            for res in read_results(path, schema):
                z = res.x_star
                ok = np.array_equal(supports.project(z), z)
                for j, f in enumerate(schema.features):
                    if f.is_categorical:
                        ok &= z[j] in observed[j]
                        continue
                    raw = float(pre.to_raw_numeric(f.name, z[j]))
                    if "integer" in f.constraints:
                        ok &= abs(raw - round(raw)) <= 1e-9 * max(1.0, abs(raw))
                    if "positive" in f.constraints:
                        ok &= raw >= -1e-9
                    if "negative" in f.constraints:
                        ok &= raw <= 1e-9
                    if "normalized" in f.constraints:
                        ok &= -1e-9 <= raw <= 1 + 1e-9
                total += 1
                bad += int(not ok)
    passed = bad == 0 and total > 0
    record("C4 projection", passed, f"{total - bad}/{total} outputs are fixed points of project and satisfy constraints")
    assert passed


# 5. end-to-end success

def _pairwise_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def test_criterion_05_attack_success(reference_runs):
    r = reference_runs[0]
    schema, pre = load_run(r)
    sur = SurrogateModel.from_dict(r.json("models/surrogate.json"))
    val = load_dataset(r.out / "prep" / "validation.csv", schema, pre)
    auc = _pairwise_auc(val.y.astype(int), sur.score(val.X))
    rows = read_csv_rows(r.out / "results" / "results_gradient.csv")
    results = read_results(r.out / "results" / "results_gradient.csv", schema)
    # re-check the exit condition on every claimed success
    rechecked = sum(int(sur.predict(res.x_star)[0]) != int(res.y) for res in results if res.succeeded)
    success = 100.0 * rechecked / len(rows)
    shape_ok = schema.d == 20 and schema.n_categorical == 8 and schema.n_numeric == 12 and len(schema.immutable_set) == 5
    n = len(load_dataset(r.out / "prep" / "full.csv", schema, pre))
    ok = shape_ok and n == 12000 and len(rows) == 500 and auc >= 0.85 and success >= 90.0 and r.seconds < 300
    record("C5 attack success", ok,
           f"surrogate validation AUC {auc:.3f}, success {success:.1f}% of {len(rows)}, pipeline {r.seconds:.0f}s")
    assert ok


# 6. l0 profile

def test_criterion_06_l0_profile(reference_runs):
    r = reference_runs[0]
    schema, _ = load_run(r)
    results = read_results(r.out / "results" / "results_gradient.csv", schema)
    l0 = np.array([perturbation_metrics(res.x, res.x_star, schema).l0_total
                   for res in results if res.succeeded and not res.initially_adversarial])
    median, mean = float(np.median(l0)), float(l0.mean())
    ok = median <= 3 and mean > median
    record("C6 l0 profile", ok, f"median {median:g}, mean {mean:.3f} over {len(l0)} perturbed successes")
    assert ok


# 7. regression exit condition

def test_criterion_07_regression_exit(regression_run):
    r = regression_run
    schema, _ = load_run(r)
    assert not schema.label_space.is_classification
    sur = SurrogateModel.from_dict(r.json("models/surrogate.json"))
    results = read_results(r.out / "results" / "results_gradient.csv", schema)
    succ = [res for res in results if res.succeeded]
    good = sum(abs(float(sur.score(res.x_star)[0]) - res.y) > 0.75 for res in succ)
    ok = len(succ) > 0 and good == len(succ)
    record("C7 regression exit", ok, f"{good}/{len(succ)} successes have |M(x*) - y| > 0.75 on re-evaluation")
    assert ok


# 8. transferability ordering

def _rate(model, results):
    pool = [res for res in results if res.succeeded and not res.initially_adversarial]
    fooled = sum(int(model.predict(res.x_star)[0]) != int(res.y) for res in pool)
    return 100.0 * fooled / len(pool)


def test_criterion_08_transfer_ordering(reference_runs):
    rates = {k: {"base": [], "adjusted": []} for k in ("dt", "rf", "gbm")}
    for r in reference_runs:
        schema, _ = load_run(r)
        base = read_results(r.out / "results" / "results_gradient.csv", schema)
        for k in rates:
            model = load_target(r.out / "models" / f"target_{k}.json")
            adj = read_results(r.out / "results" / f"results_importance_{k}.csv", schema)
            rates[k]["base"].append(_rate(model, base))
            rates[k]["adjusted"].append(_rate(model, adj))
    ok = True
    parts = []
    for k, v in rates.items():
        b, a = np.mean(v["base"]), np.mean(v["adjusted"])
        worst = min(x - y for x, y in zip(v["adjusted"], v["base"]))
        ok &= b > 5.0 and a >= b and worst >= -2.0
        parts.append(f"{k} base {b:.1f}% adjusted {a:.1f}% (worst seed {worst:+.1f}pp)")
    record("C8 transfer ordering", ok, "; ".join(parts))
    assert ok


# 9. information gain

def _h(labels):
    n = len(labels)
    out = 0.0
    for c in set(labels):
        p = labels.count(c) / n
        out -= p * math.log2(p)
    return out


def _one_feature(values, labels):
    schema = Schema((FeatureSpec("f", NUMERIC),), LabelSpace("binary_classification"))
    return Dataset(np.array(values, dtype=float).reshape(-1, 1), np.array(labels), schema)


def test_criterion_09_information_gain():
    labels = [0, 0, 0, 1, 0, 1, 1, 1]
    values = [0, 0, 0, 0, 1, 1, 1, 1]
    expected = _h(labels) - (4 / 8) * _h(labels[:4]) - (4 / 8) * _h(labels[4:])
    m = train_tree_model("dt", _one_feature(values, labels), TreeParams(max_depth=1))
    gain = float(m.feature_importance()[0])
    perfect = train_tree_model("dt", _one_feature([0, 0, 0, 0, 1, 1, 1, 1], [0, 0, 0, 0, 1, 1, 1, 1]),
                               TreeParams(max_depth=1))
    pg = float(perfect.feature_importance()[0])
    ok = abs(gain - expected) < 1e-12 and abs(pg - 1.0) < 1e-12
    record("C9 information gain", ok, f"gain {gain:.15f} vs hand {expected:.15f}; perfect split {pg:.15f}")
    assert ok


# 10. metric decomposition

def test_criterion_10_metric_decomposition(reference_runs):
    checked, bad = 0, 0
    for r in reference_runs:
        schema, _ = load_run(r)
        for path in all_result_files(r):
            for row in read_csv_rows(path):
                checked += 1
                bad += int(int(row["l0_cat"]) + int(row["l0_num"]) != int(row["l0_total"]))
        summary = read_csv_rows(r.out / "report" / "summary.csv")[0]
        for count, pct, of in [("l0_cat", "l0_cat_pct", schema.n_categorical),
                               ("l0_num", "l0_num_pct", schema.n_numeric),
                               ("l0_total", "l0_total_pct", schema.d)]:
            bad += int(abs(100.0 * float(summary[count]) / of - float(summary[pct])) > 0.01)
    table = abs(round(100 * 2.27 / 52, 2) - 4.37) < 0.01 and abs(round(100 * 1.60 / 21, 2) - 7.62) < 0.01
    ok = bad == 0 and table
    record("C10 metric decomposition", ok, f"{checked} result rows, {bad} mismatches; 2.27/52 -> 4.37%")
    assert ok


# 11. determinism

def test_criterion_11_determinism(reference_runs, tmp_path):
    import json
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({**REFERENCE, "seed": 0}))
    out = tmp_path / "again"
    proc = subprocess.run([sys.executable, "-m", "tabattack.cli", "run", "--config", str(cfg), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    first = reference_runs[0].out / "report"
    same = {f: (first / f).read_bytes() == (out / "report" / f).read_bytes()
            for f in ("summary.csv", "transfer.csv", "l0_hist.json")}
    ok = all(same.values())
    record("C11 determinism", ok, ", ".join(f"{f} {'identical' if v else 'differs'}" for f, v in same.items()))
    assert ok


# 12. consistency auditing

def test_criterion_12_consistency_audit(monotone_run):
    r = monotone_run
    schema, pre = load_run(r)
    est = ConsistencyEstimator.from_dict(r.json("prep/estimator.json"))
    b, d = schema.index("birth_year"), schema.index("death_year")

    def raw(z, j):
        return float(pre.to_raw_numeric(schema.names[j], z[j]))

    inverted = []
    for path in all_result_files(r):
        for res in read_results(path, schema):
            if res.succeeded and raw(res.x_star, b) > raw(res.x_star, d):
                inverted.append(res)
    flagged = sum(not est.is_consistent_log(est.log_score(res.x_star, res.y), res.y) for res in inverted)
    attack = load_dataset(r.out / "prep" / "attack.csv", schema, pre)
    clean = sum(est.is_consistent_log(est.log_score(x, y), y) for x, y in zip(attack.X, attack.y))
    fr, pr = flagged / max(len(inverted), 1), clean / len(attack)
    ok = len(inverted) > 0 and fr >= 0.95 and pr >= 0.95
    record("C12 consistency audit", ok,
           f"{flagged}/{len(inverted)} pair-inverting outputs flagged, {clean}/{len(attack)} unperturbed pass")
    assert ok
