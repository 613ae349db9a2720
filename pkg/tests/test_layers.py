import numpy as np
import pytest

from asdgraph import _kernels
from asdgraph.graph import EdgeSet
from asdgraph.layers import (EdgeMLP, batch_norm, batch_norm_backward, batch_norm_forward,
                             edge_conv, edge_conv_backward, edge_conv_forward, sage_conv,
                             sage_conv_backward, sage_conv_forward, sigmoid)


def random_edges(rng, n, p=0.3):
    src, dst = np.nonzero(rng.random((n, n)) < p)
    loops = np.arange(n)
    return EdgeSet(np.r_[src, loops], np.r_[dst, loops], n)


def random_mlp(rng, d, h, f):
    return EdgeMLP(rng.standard_normal((h, 2 * d)), rng.standard_normal(h),
                   rng.standard_normal((f, h)), rng.standard_normal(f))


def fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn()
        x[i] = old - h
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def test_sage_hand_computed():
    # path 0 -> 1 -> 2 plus self-loops
    es = EdgeSet([0, 1, 0, 1, 2], [1, 2, 0, 1, 2], 3)
    X = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
    M = np.array([[1.0, 1.0]])
    Y = sage_conv(X, es, M, np.array([0.5]))
    # node0: x0; node1: x0 + x1; node2: x1 + x2
    np.testing.assert_allclose(Y[:, 0], [1.5, 3.5, 6.5])


def test_sage_matches_loop(rng):
    n, d, f = 12, 5, 3
    es = random_edges(rng, n)
    X, M, b = rng.standard_normal((n, d)), rng.standard_normal((f, d)), rng.standard_normal(f)
    ref = np.stack([M @ X[es.in_neighbors(v)].sum(0) + b for v in range(n)])
    np.testing.assert_allclose(sage_conv(X, es, M, b), ref, atol=1e-12)


def test_sage_shape_mismatch(rng):
    es = random_edges(rng, 4)
    with pytest.raises(ValueError):
        sage_conv(np.zeros((4, 3)), es, np.zeros((2, 5)))
    with pytest.raises(ValueError):
        sage_conv(np.zeros((5, 3)), es, np.zeros((2, 3)))


def test_edge_conv_matches_per_edge_mlp(rng):
    n, d, h, f = 15, 4, 7, 3
    es = random_edges(rng, n)
    g = random_mlp(rng, d, h, f)
    X = rng.standard_normal((n, d))
    ref = np.stack([sum(g(X[v], X[w]) for w in es.in_neighbors(v)) for v in range(n)])
    np.testing.assert_allclose(edge_conv(X, es, g), ref, atol=1e-10)


def test_edge_conv_hand_computed():
    # scalar features, g(c, n) = relu(c - n) * 2 + 1
    es = EdgeSet([0, 1, 1, 0], [0, 1, 0, 1], 2)
    g = EdgeMLP(np.array([[1.0, -1.0]]), np.zeros(1), np.array([[2.0]]), np.array([1.0]))
    X = np.array([[3.0], [1.0]])
    # node0: g(3,3) + g(3,1) = 1 + 5; node1: g(1,1) + g(1,3) = 1 + 1
    np.testing.assert_allclose(edge_conv(X, es, g), [[6.0], [2.0]])


@pytest.mark.parametrize("use_numba", [True, False])
def test_edge_conv_backends_agree(rng, monkeypatch, use_numba):
    n, d, h, f = 40, 6, 9, 4
    es = random_edges(rng, n, 0.2)
    g = random_mlp(rng, d, h, f)
    X = rng.standard_normal((n, d))
    ref = np.stack([sum(g(X[v], X[w]) for w in es.in_neighbors(v)) for v in range(n)])
    monkeypatch.setattr(_kernels, "USE_NUMBA", use_numba and _kernels.numba is not None)
    monkeypatch.setattr("asdgraph.graph.CHUNK_EDGES", 37)
    es = EdgeSet(es.src, es.dst, n)  # fresh chunk cache at the small chunk size
    np.testing.assert_allclose(edge_conv(X, es, g), ref, atol=1e-10)
    dY = rng.standard_normal((n, f))
    _, cache = edge_conv_forward(X, es, g)
    dX = edge_conv_backward(dY, es, g, cache)[0]
    fd = fd_grad(lambda: float(np.sum(edge_conv(X, es, g) * dY)), X)
    np.testing.assert_allclose(dX, fd, rtol=1e-5, atol=1e-6)


def test_edge_conv_gradients(rng):
    n, d, h, f = 10, 3, 5, 2
    es = random_edges(rng, n)
    g = random_mlp(rng, d, h, f)
    X = rng.standard_normal((n, d))
    dY = rng.standard_normal((n, f))
    _, cache = edge_conv_forward(X, es, g)
    dX, dW1, db1, dW2, db2 = edge_conv_backward(dY, es, g, cache)

    def loss():
        return float(np.sum(edge_conv(X, es, g) * dY))

    for analytic, arr in [(dX, X), (dW1, g.W1), (db1, g.b1), (dW2, g.W2), (db2, g.b2)]:
        np.testing.assert_allclose(analytic, fd_grad(loss, arr), rtol=1e-5, atol=1e-6)


def test_sage_gradients(rng):
    n, d, f = 9, 4, 3
    es = random_edges(rng, n)
    X, M, b = rng.standard_normal((n, d)), rng.standard_normal((f, d)), rng.standard_normal(f)
    dY = rng.standard_normal((n, f))
    _, S = sage_conv_forward(X, es, M, b)
    dX, dM, db = sage_conv_backward(dY, es, M, S)

    def loss():
        return float(np.sum(sage_conv(X, es, M, b) * dY))

    for analytic, arr in [(dX, X), (dM, M), (db, b)]:
        np.testing.assert_allclose(analytic, fd_grad(loss, arr), rtol=1e-6, atol=1e-7)


def test_batch_norm_train_and_eval():
    X = np.array([[1.0, 10.0], [3.0, 10.0], [5.0, 16.0]])
    bn = {"weight": np.array([2.0, 1.0]), "bias": np.array([0.0, 1.0]),
          "running_mean": np.zeros(2), "running_var": np.ones(2)}
    Y = batch_norm(X, bn, "train")
    mu = np.array([3.0, 12.0])
    var = np.array([8 / 3, 8.0])
    np.testing.assert_allclose(Y, (X - mu) / np.sqrt(var + 1e-5) * bn["weight"] + bn["bias"])
    np.testing.assert_allclose(bn["running_mean"], 0.1 * mu)
    np.testing.assert_allclose(bn["running_var"], 0.9 + 0.1 * var * 1.5)
    Ye = batch_norm(X, bn, "eval")
    np.testing.assert_allclose(
        Ye, (X - bn["running_mean"]) / np.sqrt(bn["running_var"] + 1e-5) * bn["weight"]
        + bn["bias"])
    with pytest.raises(ValueError):
        batch_norm(X, bn, "test")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(rng, mode):
    X = rng.standard_normal((7, 3)) * 2 + 1
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    dY = rng.standard_normal((7, 3))

    def loss():
        return float(np.sum(batch_norm_forward(X, gamma, beta, rm, rv, mode)[0] * dY))

    _, cache, _ = batch_norm_forward(X, gamma, beta, rm, rv, mode)
    dX, dg, db = batch_norm_backward(dY, cache)
    for analytic, arr in [(dX, X), (dg, gamma), (db, beta)]:
        np.testing.assert_allclose(analytic, fd_grad(loss, arr), rtol=1e-5, atol=1e-7)


def test_sigmoid_stable():
    z = np.array([-1000.0, -1.0, 0.0, 2.0, 1000.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s[1:4], 1 / (1 + np.exp(-z[1:4])))
    assert s[0] == 0.0 and s[-1] == 1.0
