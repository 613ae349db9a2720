"""Compiled per-edge loops for EDGE-CONV (numba), with a numpy fallback.

Both routes walk the destination-sorted CSR index; the compiled one streams
over edges without materialising an (edges x hidden) array.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("ASDGRAPH_NO_NUMBA", "") == ""


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _relu_sum_nb(P, Q, indptr, src, H):
        n, h = H.shape
        for v in range(n):
            for k in range(h):
                H[v, k] = 0.0
            for e in range(indptr[v], indptr[v + 1]):
                w = src[e]
                for k in range(h):
                    x = P[v, k] + Q[w, k]
                    if x > 0.0:
                        H[v, k] += x

    @numba.njit(cache=True, nogil=True)
    def _relu_sum_back_nb(P, Q, dH, indptr, src, dP, dQ):
        n, h = dH.shape
        for v in range(n):
            for k in range(h):
                dP[v, k] = 0.0
        for v in range(n):
            for e in range(indptr[v], indptr[v + 1]):
                w = src[e]
                for k in range(h):
                    if P[v, k] + Q[w, k] > 0.0:
                        g = dH[v, k]
                        dP[v, k] += g
                        dQ[w, k] += g


def relu_pair_sum(P, Q, es):
    """``H[v] = sum over in-edges (w -> v) of relu(P[v] + Q[w])``."""
    if USE_NUMBA:
        H = np.empty_like(P)
        _relu_sum_nb(P, Q, es.indptr, es.src, H)
        return H
    H = np.empty_like(P)
    for ch in es.chunks:
        pre = P[ch.dst]
        pre += Q[ch.src]
        np.maximum(pre, 0.0, out=pre)
        H[ch.v0:ch.v1] = ch.scatter("dst_scatter", pre.dtype) @ pre
    return H


def relu_pair_sum_backward(P, Q, dH, es):
    """Adjoint of :func:`relu_pair_sum`; returns ``(dP, dQ)``."""
    dQ = np.zeros_like(Q)
    if USE_NUMBA:
        dP = np.empty_like(P)
        _relu_sum_back_nb(P, Q, np.ascontiguousarray(dH), es.indptr, es.src, dP, dQ)
        return dP, dQ
    dP = np.empty_like(P)
    for ch in es.chunks:
        pre = P[ch.dst]
        pre += Q[ch.src]
        grad = dH[ch.dst]
        grad *= pre > 0.0
        dP[ch.v0:ch.v1] = ch.scatter("dst_scatter", grad.dtype) @ grad
        dQ += ch.scatter("src_scatter", grad.dtype) @ grad
    return dP, dQ
