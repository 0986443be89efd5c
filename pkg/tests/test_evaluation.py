import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabattack.attack import AttackResult
from tabattack.evaluation import (PerturbationMetrics, attack_summary, changed_mask, l0_histogram, pct,
                                  perturbation_metrics, prediction_agreement, read_csv_rows, read_results, summary_from_rows,
                                  transfer_rate, write_report, write_results)
from tabattack.schema import parse_schema


def schema(n_cat=2, n_num=3):
    feats = [{"name": f"c{j}", "kind": "categorical", "categories": ["a", "b", "c"]} for j in range(n_cat)]
    feats += [{"name": f"n{j}", "kind": "numeric", "constraints": ["integer"] if j == 0 else []}
              for j in range(n_num)]
    return parse_schema({"features": feats})


def result(x, xs, ok=True, initially=False, y=0.0):
    return AttackResult(np.asarray(x, float), np.asarray(xs, float), [], ok, 1, initially_adversarial=initially, y=y)


def test_reported_percentages():
    assert round(pct(2.27, 52), 2) == 4.37
    assert round(pct(1.60, 21), 2) == 7.62
    assert round(pct(499, 500), 2) == 99.80


def test_zero_perturbation():
    s = schema()
    x = np.array([0, 1, 2, 0.5, 0.25])
    m = perturbation_metrics(x, x, s)
    assert (m.l0_categorical, m.l0_numeric, m.l0_total, m.l1_numeric) == (0, 0, 0, 0.0)


def test_changed_mask_tolerance():
    s = schema()
    x = np.array([0, 1, 2, 0.5, 0.25])
    z = x.copy()
    z[1] = 2
    z[3] += 1e-10
    z[4] += 1e-3
    assert changed_mask(x, z, s).tolist() == [False, True, False, False, True]


def test_decomposition_enforced():
    with pytest.raises(ValueError):
        PerturbationMetrics(1, 1, 3, 0, 0, 0, 0.0)


def test_summary_of_identical_results():
    s = schema()
    x = np.array([0, 1, 2, 0.5, 0.25])
    z = np.array([1, 1, 2, 0.5, 0.75])
    summ = attack_summary([result(x, z)] * 4, s)
    m = perturbation_metrics(x, z, s)
    assert summ["l0_cat"] == m.l0_categorical and summ["l0_num"] == m.l0_numeric
    assert summ["l1_num"] == m.l1_numeric and summ["success_pct"] == 100.0


def test_success_counts_whole_set():
    s = schema()
    x = np.zeros(5)
    rs = [result(x, x + np.r_[0, 0, 0, 0, 1.0])] * 499 + [result(x, x, ok=False)]
    assert attack_summary(rs, s)["success_pct"] == pytest.approx(99.8)


def test_initially_adversarial_excluded_from_norms():
    s = schema()
    x = np.zeros(5)
    rs = [result(x, x, initially=True), result(x, x + np.r_[1, 0, 0, 0, 0.0])]
    summ = attack_summary(rs, s)
    assert summ["l0_cat"] == 1.0 and summ["success_pct"] == 100.0


class _Const:
    is_classification = True

    def __init__(self, v):
        self.v = v

    def predict(self, X):
        return np.full(len(np.atleast_2d(X)), self.v)


def test_transfer_constant_targets():
    x = np.zeros(5)
    rs = [result(x, x + 1, y=1.0)] * 3 + [result(x, x + 1, y=0.0)]
    assert transfer_rate(rs, _Const(0)) == 75.0
    assert transfer_rate([r for r in rs if r.y == 1.0], _Const(0)) == 100.0
    assert transfer_rate([r for r in rs if r.y == 1.0], _Const(1)) == 0.0
    with pytest.raises(ValueError):
        transfer_rate([result(x, x, ok=False)], _Const(0))


class _Threshold:
    is_classification = True

    def __init__(self, cut):
        self.cut = cut

    def predict(self, X):
        return (np.atleast_2d(X)[:, 0] >= self.cut).astype(int)


def test_prediction_agreement():
    X = np.arange(10.0).reshape(-1, 1)
    assert prediction_agreement(_Threshold(5), _Threshold(5), X) == 100.0
    assert prediction_agreement(_Threshold(5), _Threshold(7), X) == 80.0
    assert prediction_agreement(_Const(0), _Const(1), X) == 0.0
    with pytest.raises(ValueError):
        prediction_agreement(_Const(0), _Const(0), np.empty((0, 1)))


def test_histogram_examples():
    s = schema()
    x = np.zeros(5)
    single = [result(x, x + np.r_[0, 0, 0, 0, 1.0])] * 5
    assert l0_histogram(single, s) == {1: 5}
    assert l0_histogram([result(x, x, ok=False)], s) == {}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 2), min_size=2, max_size=2),
                          st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3)),
                min_size=1, max_size=10))
def test_csv_round_trip_summary(rows):
    s = schema()
    x = np.array([0, 1, 0, 0.0, 0.5])
    rs = [result(x, np.array(c + f, dtype=float)) for c, f in rows]
    for r in rs:
        m = perturbation_metrics(r.x, r.x_star, s)
        assert m.l0_total == m.l0_categorical + m.l0_numeric
        assert abs(m.l0_pct_total - 100.0 * m.l0_total / s.d) < 0.01
    import tempfile
    import pathlib
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "r.csv"
        write_results(path, rs, s)
        back = summary_from_rows(read_csv_rows(path), s, "t")
        again = read_results(path, s)
    assert back == attack_summary(rs, s, "t")
    assert all(np.array_equal(a.x_star, b.x_star) for a, b in zip(rs, again))


def test_report_files(tmp_path):
    s = schema()
    x = np.zeros(5)
    rs = [result(x, x + np.r_[0, 0, 0, 0, 1.0]), result(x, x + np.r_[1, 1, 0, 0, 1.0])]
    hist = l0_histogram(rs, s)
    write_report(tmp_path, [attack_summary(rs, s, "t")], [], hist, [], header="config_hash=x", meta={"seed": 0})
    assert (tmp_path / "summary.csv").read_text().startswith("# config_hash=x\n")
    doc = json.loads((tmp_path / "l0_hist.json").read_text())
    assert doc["histogram"] == {"1": 1, "3": 1} and doc["_meta"] == {"seed": 0}


def test_histogram_keys_in_numeric_order():
    s = parse_schema({"features": [{"name": f"n{j}", "kind": "numeric"} for j in range(12)]})
    x = np.zeros(12)
    rs = [result(x, np.r_[np.ones(k), np.zeros(12 - k)]) for k in (10, 2, 1)]
    assert list(l0_histogram(rs, s)) == [1, 2, 10]
