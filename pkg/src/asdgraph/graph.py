"""Spatial-temporal graph construction over a chunk of face records.

Nodes are face occurrences.  Two nodes are linked when they belong to the
same identity and lie within ``tau`` seconds of each other, or when they
share a frame.  Three edge sets are built from one node list:

* undirected: temporal edges in both directions
* forward:    same-identity edges point from past to future
* backward:   same-identity edges point from future to past

Same-frame edges between different identities are kept in both directions
in all three sets (switchable with ``directed_same_frame``), and every node
carries a self-loop.  An edge ``(src, dst)`` carries a message from ``src``
to ``dst``, so the neighbourhood of ``v`` is its in-neighbour set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .records import FaceRecord

STREAMS = ("fwd", "und", "bwd")

# Edge-chunk size for the per-edge message kernels; bounds peak memory.
CHUNK_EDGES = 200_000


class EdgeSet:
    """Directed edge list in (dst, src) order with a CSR in-adjacency index."""

    def __init__(self, src, dst, n_nodes: int):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if src.shape != dst.shape:
            raise ValueError("src and dst must have the same length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n_nodes):
            raise ValueError("edge index out of range")
        key = np.unique(dst * n_nodes + src)
        self.n_nodes = n_nodes
        self.dst = key // n_nodes
        self.src = key % n_nodes
        self.indptr = np.searchsorted(self.dst, np.arange(n_nodes + 1))
        for a in (self.src, self.dst, self.indptr):
            a.setflags(write=False)

    def __len__(self):
        return self.src.size

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def pairs(self) -> set[tuple[int, int]]:
        return set(self.edges)

    def in_neighbors(self, v: int) -> np.ndarray:
        return self.src[self.indptr[v]:self.indptr[v + 1]]

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def has_self_loops(self) -> bool:
        loops = self.src[self.src == self.dst]
        return loops.size == self.n_nodes

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Sparse matrix ``A`` with ``A[dst, src] = 1``."""
        data = np.ones(self.src.size)
        return sp.csr_matrix((data, self.src, self.indptr), shape=(self.n_nodes, self.n_nodes))

    @cached_property
    def adjacency_t(self) -> sp.csr_matrix:
        return self.adjacency.T.tocsr()

    @cached_property
    def chunks(self) -> list["EdgeChunk"]:
        """Contiguous destination ranges, each holding at most ~CHUNK_EDGES edges."""
        out = []
        v0 = 0
        n = self.n_nodes
        while v0 < n:
            limit = self.indptr[v0] + CHUNK_EDGES
            v1 = int(np.searchsorted(self.indptr, limit, side="right")) - 1
            v1 = min(max(v1, v0 + 1), n)
            out.append(EdgeChunk(self, v0, v1))
            v0 = v1
        return out

    def transpose(self) -> "EdgeSet":
        return EdgeSet(self.dst, self.src, self.n_nodes)

    def permuted(self, perm: np.ndarray) -> "EdgeSet":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return EdgeSet(perm[self.src], perm[self.dst], self.n_nodes)

    def __eq__(self, other):
        if not isinstance(other, EdgeSet):
            return NotImplemented
        return (self.n_nodes == other.n_nodes
                and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst))

    def __repr__(self):
        return f"EdgeSet(n_nodes={self.n_nodes}, n_edges={len(self)})"


class EdgeChunk:
    """Edges whose destination lies in ``[v0, v1)``; see :attr:`EdgeSet.chunks`."""

    def __init__(self, es: EdgeSet, v0: int, v1: int):
        self.v0, self.v1 = v0, v1
        self.e0, self.e1 = int(es.indptr[v0]), int(es.indptr[v1])
        self.src = es.src[self.e0:self.e1]
        self.dst = es.dst[self.e0:self.e1]
        m = self.e1 - self.e0
        # edges are sorted by destination, so the gather-to-destination matrix
        # has contiguous column blocks per row
        self.dst_scatter = sp.csr_matrix(
            (np.ones(m), np.arange(m), es.indptr[v0:v1 + 1] - self.e0), shape=(v1 - v0, m))
        self.src_scatter = sp.csr_matrix(
            (np.ones(m), (self.src, np.arange(m))), shape=(es.n_nodes, m))
        self._typed = {}

    def scatter(self, which: str, dtype) -> sp.csr_matrix:
        key = (which, np.dtype(dtype))
        mat = self._typed.get(key)
        if mat is None:
            mat = getattr(self, which).astype(dtype)
            self._typed[key] = mat
        return mat


@dataclass
class GraphSegment:
    """A chunk of face records with its three edge sets."""

    box: np.ndarray
    time: np.ndarray
    identity: list[str]
    visual: np.ndarray
    audio: np.ndarray
    labels: np.ndarray | None
    tau: float
    e_forward: EdgeSet
    e_backward: EdgeSet
    e_undirected: EdgeSet
    segment_id: str = ""
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.time.size

    @property
    def n_nodes(self) -> int:
        return self.time.size

    def edge_set(self, stream: str) -> EdgeSet:
        return {"fwd": self.e_forward, "bwd": self.e_backward, "und": self.e_undirected}[stream]

    @cached_property
    def self_loops(self) -> EdgeSet:
        idx = np.arange(self.n_nodes)
        return EdgeSet(idx, idx, self.n_nodes)

    @property
    def nodes(self) -> list[FaceRecord]:
        labels = self.labels
        return [
            FaceRecord(tuple(float(b) for b in self.box[i]), float(self.time[i]),
                       self.identity[i], self.visual[i], self.audio[i],
                       None if labels is None else int(labels[i]))
            for i in range(self.n_nodes)
        ]


def _node_arrays(nodes: Sequence[FaceRecord]):
    if not nodes:
        raise ValueError("cannot build a graph over zero nodes")
    time = np.array([r.time for r in nodes], dtype=np.float64)
    identity = [r.identity for r in nodes]
    return time, identity


def _temporal_pairs(time: np.ndarray, identity: Sequence[str], tau: float):
    """Same-identity pairs (i, j) with time[i] < time[j] and time[j] - time[i] <= tau."""
    _, id_code = np.unique(np.asarray(identity, dtype=str), return_inverse=True)
    order = np.lexsort((time, id_code))
    t = time[order]
    c = id_code[order]
    n = t.size
    # identity blocks are pushed far apart on one axis so a single sorted
    # search finds the candidate window; the exact test runs on raw differences
    span = float(t.max() - t.min()) + abs(tau) + 1.0
    shifted = t + c * (4.0 * span)
    slack = 1e-9 * (1.0 + float(np.abs(shifted).max()))
    hi = np.searchsorted(shifted, shifted + tau + slack, side="right")
    counts = np.maximum(hi - np.arange(n) - 1, 0)
    total = int(counts.sum())
    first = np.repeat(np.arange(n), counts)
    second = first + 1 + np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    ok = (c[first] == c[second]) & (t[second] - t[first] <= tau) & (t[second] > t[first])
    return order[first[ok]], order[second[ok]]


def _same_frame_pairs(time: np.ndarray):
    """Ordered pairs (i, j), i != j, sharing an identical timestamp."""
    _, frame, sizes = np.unique(time, return_inverse=True, return_counts=True)
    order = np.argsort(frame, kind="stable")
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    per_node = sizes[frame]
    i = np.repeat(np.arange(time.size), per_node)
    base = np.repeat(starts[frame], per_node)
    offs = np.arange(i.size) - np.repeat(np.cumsum(per_node) - per_node, per_node)
    j = order[base + offs]
    keep = i != j
    return i[keep], j[keep]


def _assemble(n, parts) -> EdgeSet:
    loops = np.arange(n)
    src = np.concatenate([p[0] for p in parts] + [loops])
    dst = np.concatenate([p[1] for p in parts] + [loops])
    return EdgeSet(src, dst, n)


def build_undirected(nodes: Sequence[FaceRecord], tau: float) -> EdgeSet:
    time, identity = _node_arrays(nodes)
    return _build(time, identity, tau, "und")


def build_forward(nodes: Sequence[FaceRecord], tau: float,
                  directed_same_frame: bool = True) -> EdgeSet:
    time, identity = _node_arrays(nodes)
    return _build(time, identity, tau, "fwd", directed_same_frame)


def build_backward(nodes: Sequence[FaceRecord], tau: float,
                   directed_same_frame: bool = True) -> EdgeSet:
    time, identity = _node_arrays(nodes)
    return _build(time, identity, tau, "bwd", directed_same_frame)


def _build(time, identity, tau, kind, directed_same_frame=True, cache=None):
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    n = time.size
    if cache is None:
        cache = {}
    if "temporal" not in cache:
        cache["temporal"] = _temporal_pairs(time, identity, tau)
        cache["frame"] = _same_frame_pairs(time)
    early, late = cache["temporal"]
    fi, fj = cache["frame"]
    if kind == "und":
        parts = [(early, late), (late, early), (fi, fj)]
    elif kind == "fwd":
        parts = [(early, late)]
    elif kind == "bwd":
        parts = [(late, early)]
    else:
        raise ValueError(kind)
    if kind != "und" and directed_same_frame:
        parts.append((fi, fj))
    return _assemble(n, parts)


def build_segment(nodes: Sequence[FaceRecord], tau: float, segment_id: str = "",
                  source_id: str = "", directed_same_frame: bool = True) -> GraphSegment:
    """Build all three edge sets over ``nodes`` (indices follow list order)."""
    time, identity = _node_arrays(nodes)
    box = np.array([r.box for r in nodes], dtype=np.float64)
    visual = np.stack([r.visual for r in nodes])
    audio = np.stack([r.audio for r in nodes])
    if all(r.label is not None for r in nodes):
        labels = np.array([r.label for r in nodes], dtype=np.int8)
    else:
        labels = None
    return segment_from_arrays(box, time, identity, visual, audio, labels, tau,
                               segment_id=segment_id, source_id=source_id,
                               directed_same_frame=directed_same_frame)


def segment_from_arrays(box, time, identity, visual, audio, labels, tau, segment_id="",
                        source_id="", directed_same_frame=True) -> GraphSegment:
    time = np.asarray(time, dtype=np.float64)
    identity = list(identity)
    cache = {}
    e_und = _build(time, identity, tau, "und", cache=cache)
    e_fwd = _build(time, identity, tau, "fwd", directed_same_frame, cache=cache)
    e_bwd = _build(time, identity, tau, "bwd", directed_same_frame, cache=cache)
    return GraphSegment(
        box=np.asarray(box, dtype=np.float64), time=time, identity=identity,
        visual=np.asarray(visual), audio=np.asarray(audio),
        labels=None if labels is None else np.asarray(labels, dtype=np.int8),
        tau=float(tau), e_forward=e_fwd, e_backward=e_bwd, e_undirected=e_und,
        segment_id=segment_id, source_id=source_id,
        meta={"directed_same_frame": directed_same_frame},
    )


@dataclass(frozen=True)
class SegmentStats:
    n_nodes: int
    n_edges: dict
    mean_in_degree: dict
    time_span: float
    n_frames: int

    def as_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_edges": dict(self.n_edges),
            "mean_in_degree": dict(self.mean_in_degree),
            "time_span": self.time_span,
            "n_frames": self.n_frames,
        }


def segment_stats(segment: GraphSegment) -> SegmentStats:
    n = segment.n_nodes
    n_edges = {s: len(segment.edge_set(s)) for s in STREAMS}
    return SegmentStats(
        n_nodes=n,
        n_edges=n_edges,
        mean_in_degree={s: n_edges[s] / n for s in STREAMS},
        time_span=float(segment.time.max() - segment.time.min()),
        n_frames=int(np.unique(segment.time).size),
    )


def edge_table(segment: GraphSegment):
    """Yield ``(src, dst, set_name)`` rows for CSV export."""
    names = {"fwd": "forward", "bwd": "backward", "und": "undirected"}
    for s in STREAMS:
        es = segment.edge_set(s)
        for a, b in zip(es.src.tolist(), es.dst.tolist()):
            yield a, b, names[s]


def segment_summary(segment: GraphSegment) -> dict:
    st = segment_stats(segment).as_dict()
    st.update(segment_id=segment.segment_id, source_id=segment.source_id, tau=segment.tau,
              labelled=segment.labels is not None)
    return st
