import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabattack.embedding import (EmbeddingModel, TripletConfig, batch_hard_triplet_loss, build_embedding,
                                 cosine_distance, cosine_distance_matrix, equal_frequency_bins, train_embedding)
from tabattack.schema import Dataset, parse_schema


def test_cosine_examples():
    assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0
    with pytest.raises(ValueError):
        cosine_distance([0.0, 0.0], [1.0, 0.0])


def test_distance_matrix_matches_pairwise():
    E = np.random.default_rng(0).normal(size=(6, 3))
    D = cosine_distance_matrix(E)
    for i in range(6):
        for j in range(6):
            assert abs(D[i, j] - cosine_distance(E[i], E[j])) < 1e-12


def test_bins_median_split():
    labels, edges = equal_frequency_bins(np.arange(1, 11), 2)
    assert labels.tolist() == [0] * 5 + [1] * 5 and edges.tolist() == [5.5]


def test_bins_sizes_for_seven():
    labels, _ = equal_frequency_bins(np.arange(7), 3)
    assert sorted(np.bincount(labels).tolist(), reverse=True) == [3, 2, 2]


def test_bins_all_equal_warns():
    with pytest.warns(UserWarning):
        labels, edges = equal_frequency_bins(np.ones(10), 4)
    assert set(labels.tolist()) == {0} and len(edges) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=4, max_size=40), st.integers(2, 4))
def test_bins_monotone(targets, n_bins):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        labels, _ = equal_frequency_bins(targets, n_bins)
    order = np.argsort(targets, kind="stable")
    assert np.all(np.diff(labels[order]) >= 0)
    for a, b in zip(targets, labels):
        assert all(lb == b for t, lb in zip(targets, labels) if t == a)


def test_identical_embeddings_give_margin():
    E = np.tile([1.0, 2.0, 3.0], (6, 1))
    assert batch_hard_triplet_loss(E, np.array([0, 0, 0, 1, 1, 1]), 0.3) == pytest.approx(0.3, abs=1e-12)


def test_separated_clusters_give_zero():
    E = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
    assert batch_hard_triplet_loss(E, np.array([0, 0, 0, 1, 1, 1]), 0.3) == 0.0


def _oracle(E, labels, margin):
    per = []
    for a in range(len(E)):
        vals = [max(0.0, margin + cosine_distance(E[a], E[p]) - cosine_distance(E[a], E[n]))
                for p in range(len(E)) if p != a and labels[p] == labels[a]
                for n in range(len(E)) if labels[n] != labels[a]]
        if vals:
            per.append(max(vals))
    return sum(per) / len(per)


def test_batch_of_eight_matches_oracle():
    rng = np.random.default_rng(11)
    E = rng.normal(size=(8, 4))
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    assert abs(batch_hard_triplet_loss(E, labels, 0.3) - _oracle(E, labels, 0.3)) < 1e-9


def batches():
    return st.integers(4, 12).flatmap(lambda B: st.tuples(
        st.lists(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3), min_size=B, max_size=B),
        st.lists(st.integers(0, 2), min_size=B, max_size=B)))


@settings(max_examples=100, deadline=None)
@given(batches(), st.floats(0.05, 1.0), st.floats(0.1, 100.0))
def test_loss_properties(batch, margin, scale):
    E, labels = np.array(batch[0]), np.array(batch[1])
    if np.any(np.linalg.norm(E, axis=1) < 1e-3):
        return
    labels[:2], labels[2:4] = 0, 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        loss = batch_hard_triplet_loss(E, labels, margin)
        scaled = batch_hard_triplet_loss(E * scale, labels, margin)
    assert loss >= 0
    assert abs(loss - scaled) < 1e-9


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(8, 3))
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    _, g = batch_hard_triplet_loss(E, labels, 0.5, return_grad=True)
    h = 1e-6
    num = np.zeros_like(E)
    for idx in np.ndindex(E.shape):
        old = E[idx]
        E[idx] = old + h
        up = batch_hard_triplet_loss(E, labels, 0.5)
        E[idx] = old - h
        down = batch_hard_triplet_loss(E, labels, 0.5)
        E[idx] = old
        num[idx] = (up - down) / (2 * h)
    assert np.allclose(g, num, atol=1e-6)


def test_soft_margin_is_softplus():
    E = np.tile([1.0, 0.0], (4, 1))
    assert batch_hard_triplet_loss(E, np.array([0, 0, 1, 1]), soft=True) == pytest.approx(math.log(2))


def test_single_class_batch_rejected():
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            batch_hard_triplet_loss(np.ones((4, 2)), np.zeros(4, dtype=int))


def test_batch_composition():
    assert TripletConfig().composition(False) == (2, 16)
    assert TripletConfig().composition(True) == (4, 8)
    with pytest.raises(ValueError):
        TripletConfig(batch_size=30, classes_per_batch=4).composition(False)


def toy(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0, 0.3, size=(n, 4)) + np.where(y[:, None] == 1, 1.0, -1.0) * np.array([1.0, -1.0, 0.5, 0.0])
    schema = parse_schema({"features": [{"name": f"x{j}", "kind": "numeric"} for j in range(4)]})
    return Dataset(X, y, schema), schema


def test_architecture_and_e_for_credit_sized_table():
    schema = parse_schema({"features": [{"name": f"x{j}", "kind": "numeric"} for j in range(52)]})
    m = build_embedding(schema, 4)
    assert m.net.sizes == [52, 104, 104, 4] and m.e == 4
    small = build_embedding(toy()[1], 3)
    assert small.net.sizes == [4, 32, 32, 3]


def test_zero_epochs_returns_initial_model():
    train, schema = toy()
    m = train_embedding(train, schema, TripletConfig(epochs=0), e=3)
    ref = build_embedding(schema, 3, seed=0, X=train.X)
    assert m.checksum() == ref.checksum()


def test_separable_toy_learns_clusters():
    train, schema = toy()
    val, _ = toy(200, seed=1)
    m = train_embedding(train, schema, TripletConfig(epochs=10, lr=0.01), e=3)
    E = m.embed(val.X)
    D = cosine_distance_matrix(E)
    rng = np.random.default_rng(0)
    pos = {c: np.where(val.y == c)[0] for c in (0, 1)}
    good = 0
    for _ in range(1000):
        a = rng.integers(len(val))
        p = rng.choice(pos[val.y[a]])
        n = rng.choice(pos[1 - val.y[a]])
        good += D[a, n] > D[a, p]
    assert good >= 900


def test_embedding_output_normalized_and_round_trip(tmp_path):
    train, schema = toy()
    m = train_embedding(train, schema, TripletConfig(epochs=1), e=3)
    E = m.embed(train.X[:10])
    assert np.allclose(np.linalg.norm(E, axis=1), 1.0)
    m.save(tmp_path / "e.json")
    back = EmbeddingModel.load(tmp_path / "e.json")
    assert back.checksum() == m.checksum() and np.array_equal(back.embed(train.X[:10]), E)


def test_embedding_input_gradient():
    train, schema = toy()
    m = build_embedding(schema, 3, seed=1, X=train.X)
    x = train.X[:2].copy()
    w = np.random.default_rng(0).normal(size=(2, 3))
    E, cache = m.forward(x)
    _, dX = m.backward(cache, w)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = float(np.sum(m.embed(x) * w))
        x[idx] = old - h
        down = float(np.sum(m.embed(x) * w))
        x[idx] = old
        num[idx] = (up - down) / (2 * h)
    assert np.allclose(dX, num, atol=1e-6)
