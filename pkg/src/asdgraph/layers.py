"""Graph aggregation and normalisation kernels with hand-written backward passes.

All kernels work on dense row-major node-feature matrices and an
:class:`~asdgraph.graph.EdgeSet` whose in-neighbourhoods include self-loops.
"""

from __future__ import annotations

import numpy as np

from ._kernels import relu_pair_sum, relu_pair_sum_backward
from .graph import EdgeSet

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as(mat, dtype):
    return mat if mat.dtype == dtype else mat.astype(dtype)


def _check_rows(X, es: EdgeSet):
    if X.ndim != 2 or X.shape[0] != es.n_nodes:
        raise ValueError(f"feature matrix shape {X.shape} does not match {es.n_nodes} nodes")


# --- SAGE-CONV -------------------------------------------------------------

def neighbor_sum(X: np.ndarray, es: EdgeSet) -> np.ndarray:
    """``out[v] = sum of X[w] over in-neighbours w of v``."""
    _check_rows(X, es)
    return _as(es.adjacency, X.dtype) @ X


def neighbor_sum_t(dY: np.ndarray, es: EdgeSet) -> np.ndarray:
    """Adjoint of :func:`neighbor_sum`: scatter rows back to the sources."""
    return _as(es.adjacency_t, dY.dtype) @ dY


def sage_conv(X, es: EdgeSet, M, bias=None):
    """``Y[v] = M @ sum_{w in N(v)} X[w] + bias`` (sum aggregation, no activation)."""
    M = np.atleast_2d(M)
    if X.shape[1] != M.shape[1]:
        raise ValueError(f"weight expects {M.shape[1]} input features, got {X.shape[1]}")
    S = neighbor_sum(X, es)
    Y = S @ M.T
    if bias is not None:
        Y += bias
    return Y


def sage_conv_forward(X, es, M, bias):
    S = neighbor_sum(X, es)
    return S @ M.T + bias, S


def sage_conv_backward(dY, es, M, S):
    """Return ``(dX, dM, dbias)`` given the cached neighbour sums ``S``."""
    dM = dY.T @ S
    dbias = dY.sum(axis=0)
    dX = neighbor_sum_t(dY @ M, es)
    return dX, dM, dbias


# --- EDGE-CONV -------------------------------------------------------------
# g(x_v, x_w) = W2 relu(W1 [x_v, x_w] + b1) + b2, summed over in-edges.
# The second linear commutes with the sum, so only the hidden activations
# are aggregated per edge.

class EdgeMLP:
    """Weights of the two-layer edge transformation ``g``."""

    def __init__(self, W1, b1, W2, b2):
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1] // 2

    def __call__(self, center, neighbor):
        u = np.concatenate([center, neighbor], axis=-1)
        return np.maximum(u @ self.W1.T + self.b1, 0.0) @ self.W2.T + self.b2


def edge_conv_forward(X, es: EdgeSet, g: EdgeMLP):
    _check_rows(X, es)
    d = g.in_dim
    if X.shape[1] != d:
        raise ValueError(f"edge MLP expects {d} input features, got {X.shape[1]}")
    P = X @ g.W1[:, :d].T + g.b1
    Q = X @ g.W1[:, d:].T
    H = relu_pair_sum(P, Q, es)
    deg = es.in_degree.astype(X.dtype)
    Y = H @ g.W2.T + deg[:, None] * g.b2
    return Y, (X, P, Q, H, deg)


def edge_conv(X, es: EdgeSet, g: EdgeMLP):
    """``Y[v] = sum_{w in N(v)} g([X[v], X[w]])``."""
    return edge_conv_forward(X, es, g)[0]


def edge_conv_backward(dY, es: EdgeSet, g: EdgeMLP, cache):
    """Return ``(dX, dW1, db1, dW2, db2)``."""
    X, P, Q, H, deg = cache
    d = g.in_dim
    dW2 = dY.T @ H
    db2 = deg @ dY
    dH = dY @ g.W2
    dP, dQ = relu_pair_sum_backward(P, Q, dH, es)
    db1 = dP.sum(axis=0)
    dW1 = np.concatenate([dP.T @ X, dQ.T @ X], axis=1)
    dX = dP @ g.W1[:, :d] + dQ @ g.W1[:, d:]
    return dX, dW1, db1, dW2, db2


# --- batch normalisation ---------------------------------------------------

def batch_norm_forward(X, gamma, beta, running_mean, running_var, mode="train",
                       eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-feature normalisation over all rows.

    Returns ``(Y, cache, (new_mean, new_var))``.  In train mode the running
    statistics are blended with the batch statistics (unbiased variance);
    in eval mode they are returned unchanged.  The caller decides whether
    to store them.
    """
    n = X.shape[0]
    if n == 0:
        raise ValueError("batch norm over zero nodes")
    if mode == "train":
        mu = X.mean(axis=0)
        xc = X - mu
        var = np.mean(xc * xc, axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        unbiased = var * (n / (n - 1)) if n > 1 else var
        new_stats = ((1 - momentum) * running_mean + momentum * mu,
                     (1 - momentum) * running_var + momentum * unbiased)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (X - running_mean) * inv_std
        new_stats = (running_mean, running_var)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    Y = xhat * gamma + beta
    return Y, (xhat, inv_std, gamma, mode), new_stats


def batch_norm(X, bn: dict, mode="train", eps=BN_EPS, momentum=BN_MOMENTUM):
    """Convenience wrapper over a dict with keys weight/bias/running_mean/running_var.

    Train mode writes the updated running statistics back into ``bn``.
    """
    Y, _, (m, v) = batch_norm_forward(X, bn["weight"], bn["bias"], bn["running_mean"],
                                      bn["running_var"], mode, eps, momentum)
    if mode == "train":
        bn["running_mean"], bn["running_var"] = m, v
    return Y


def batch_norm_backward(dY, cache):
    """Return ``(dX, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    dgamma = np.sum(dY * xhat, axis=0)
    dbeta = dY.sum(axis=0)
    dxhat = dY * gamma
    if mode == "eval":
        return dxhat * inv_std, dgamma, dbeta
    n = dY.shape[0]
    dX = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dX, dgamma, dbeta


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
