import numpy as np
import pytest

from tabattack.embedding import TripletConfig, build_embedding, train_embedding
from tabattack.surrogate import SolverConfig, SurrogateModel, TaskSolver, build_surrogate, train_solver
from tabattack.schema import Dataset, parse_schema
from tabattack.trees import auc


def toy(n=400, seed=0, task="binary_classification"):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0, 0.3, size=(n, 3)) + np.where(y[:, None] == 1, 1.0, -1.0) * np.array([1.0, -1.0, 0.5])
    schema = parse_schema({"task": task, "features": [{"name": f"x{j}", "kind": "numeric"} for j in range(3)]})
    target = y if task == "binary_classification" else 2.0 * X[:, 0] + 0.1 * rng.normal(size=n)
    return Dataset(X, target, schema), schema


@pytest.fixture(scope="module")
def trained():
    train, schema = toy()
    val, _ = toy(200, seed=1)
    emb = train_embedding(train, schema, TripletConfig(epochs=5, lr=0.01), e=3)
    return emb, build_surrogate(emb, train, SolverConfig(epochs=30), val), train, val


def _logistic_auc(E, y):
    # closed-loop check: plain logistic regression by Newton steps on the same embeddings
    A = np.hstack([E, np.ones((len(E), 1))])
    w = np.zeros(A.shape[1])
    for _ in range(25):
        p = 1 / (1 + np.exp(-A @ w))
        H = A.T @ (A * (p * (1 - p))[:, None]) + 1e-6 * np.eye(A.shape[1])
        w -= np.linalg.solve(H, A.T @ (p - y))
    return auc(y, A @ w)


def test_separable_training_auc(trained):
    emb, sur, train, _ = trained
    got = auc(train.y, sur.score(train.X))
    assert got >= 0.95
    assert got >= _logistic_auc(emb.embed(train.X), train.y) - 0.02


def test_untrained_solver_near_half():
    train, schema = toy()
    emb = build_embedding(schema, 3, X=train.X)
    sur = build_surrogate(emb, train, SolverConfig(epochs=0))
    assert abs(float(sur.score(train.X).mean()) - 0.5) < 0.15


def test_training_rows_classified(trained):
    _, sur, train, _ = trained
    assert (sur.predict(train.X) == train.y).mean() >= 0.95


def test_deterministic_score_and_composition(trained):
    emb, sur, _, val = trained
    x = val.X[:5]
    assert np.array_equal(sur.score(x), sur.score(x))
    manual = sur.solver.net.forward(emb.embed(x))[:, 0]
    assert np.array_equal(sur.score(x), manual)
    assert np.all((sur.score(val.X) >= 0) & (sur.score(val.X) <= 1))


def test_embedding_frozen_during_solver_training():
    train, schema = toy()
    emb = train_embedding(train, schema, TripletConfig(epochs=1), e=3)
    before = emb.checksum()
    train_solver(emb, train, SolverConfig(epochs=5))
    assert emb.checksum() == before


def test_regression_head_unbounded():
    train, schema = toy(task="regression")
    emb = train_embedding(train, schema, TripletConfig(epochs=2), e=3)
    sur = build_surrogate(emb, train, SolverConfig(epochs=20))
    assert not sur.is_classification and sur.solver.net.activations == ["identity"]
    out = sur.score(train.X)
    assert out.max() > 1.0 or out.min() < 0.0


def test_input_gradient_matches_finite_differences(trained):
    _, sur, _, val = trained
    for k in range(3):
        x, y = val.X[k].copy(), val.y[k]
        g = sur.input_gradient(x, y)
        h = 1e-6
        num = np.zeros_like(x)
        for i in range(len(x)):
            def loss(z):
                p = float(np.clip(sur.score(z)[0], 1e-15, 1 - 1e-15))
                return -(y * np.log(p) + (1 - y) * np.log(1 - p))
            up, down = x.copy(), x.copy()
            up[i] += h
            down[i] -= h
            num[i] = (loss(up) - loss(down)) / (2 * h)
        assert np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12) < 1e-4


def test_gradient_small_on_saturated_correct_prediction(trained):
    _, sur, train, _ = trained
    s = sur.score(train.X)
    k = int(np.argmax(np.where(train.y == 1, s, -1)))
    assert np.linalg.norm(sur.input_gradient(train.X[k], 1)) < np.linalg.norm(sur.input_gradient(train.X[k], 0))


def test_gradient_covers_every_coordinate(trained):
    _, sur, _, val = trained
    assert sur.input_gradient(val.X[0], val.y[0]).shape == (3,)


def test_round_trip(trained, tmp_path):
    _, sur, _, val = trained
    sur.save(tmp_path / "s.json")
    back = SurrogateModel.load(tmp_path / "s.json")
    assert np.array_equal(back.score(val.X), sur.score(val.X))


def test_solver_shape_enforced():
    from tabattack.nn import Network
    with pytest.raises(ValueError):
        TaskSolver(Network([3, 2], ["softmax"]), "binary_classification")
