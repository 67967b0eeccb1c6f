"""Mixed-graph representation, bow-free penalty, graph prior and metrics.

Directed edges live in ``directed[i, j] = 1`` for ``x_i -> x_j``. Bidirected
edges are stored symmetrically in ``bidirected``. Node pairs ``i < j`` are
always enumerated in lexicographic order; the same order indexes the pair
latents of the magnified graph.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import diffnum as dn


class GraphError(ValueError):
    pass


@lru_cache(maxsize=None)
def node_pairs(num_nodes: int) -> tuple:
    return tuple(itertools.combinations(range(num_nodes), 2))


@lru_cache(maxsize=None)
def pair_incidence(num_nodes: int) -> np.ndarray:
    """(M, D) matrix with ones at both endpoints of each pair."""
    pairs = node_pairs(num_nodes)
    inc = np.zeros((len(pairs), num_nodes))
    for k, (i, j) in enumerate(pairs):
        inc[k, i] = inc[k, j] = 1.0
    inc.setflags(write=False)
    return inc


@dataclass(frozen=True, eq=False)
class AdmgGraph:
    directed: np.ndarray
    bidirected: np.ndarray

    def __post_init__(self):
        gd = np.asarray(self.directed, dtype=np.int64)
        gb = np.asarray(self.bidirected, dtype=np.int64)
        if gd.ndim != 2 or gd.shape[0] != gd.shape[1] or gb.shape != gd.shape:
            raise GraphError(f"adjacency matrices must be square and equal-sized, got {gd.shape} and {gb.shape}")
        if not np.isin(gd, (0, 1)).all() or not np.isin(gb, (0, 1)).all():
            raise GraphError("adjacency matrices must be binary")
        if np.diag(gd).any() or np.diag(gb).any():
            raise GraphError("self loops are not allowed")
        if not np.array_equal(gb, gb.T):
            raise GraphError("bidirected adjacency must be symmetric")
        gd.setflags(write=False)
        gb.setflags(write=False)
        object.__setattr__(self, "directed", gd)
        object.__setattr__(self, "bidirected", gb)

    @classmethod
    def empty(cls, num_nodes: int) -> "AdmgGraph":
        z = np.zeros((num_nodes, num_nodes), dtype=np.int64)
        return cls(z, z)

    @classmethod
    def from_edges(cls, num_nodes: int, directed=(), bidirected=()) -> "AdmgGraph":
        gd = np.zeros((num_nodes, num_nodes), dtype=np.int64)
        gb = np.zeros((num_nodes, num_nodes), dtype=np.int64)
        for i, j in directed:
            gd[i, j] = 1
        for i, j in bidirected:
            gb[i, j] = gb[j, i] = 1
        return cls(gd, gb)

    @property
    def num_nodes(self) -> int:
        return self.directed.shape[0]

    def directed_edges(self) -> list:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.directed))]

    def bidirected_edges(self) -> list:
        return [(i, j) for i, j in node_pairs(self.num_nodes) if self.bidirected[i, j]]

    def __eq__(self, other):
        if not isinstance(other, AdmgGraph):
            return NotImplemented
        return np.array_equal(self.directed, other.directed) and np.array_equal(self.bidirected, other.bidirected)

    def __hash__(self):
        return hash((self.directed.tobytes(), self.bidirected.tobytes()))

    def __repr__(self):
        return (f"AdmgGraph(num_nodes={self.num_nodes}, directed={self.directed_edges()}, "
                f"bidirected={self.bidirected_edges()})")

    def to_json(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "directed_edges": [list(e) for e in self.directed_edges()],
            "bidirected_edges": [list(e) for e in self.bidirected_edges()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AdmgGraph":
        n = int(obj["num_nodes"])
        for i, j in obj.get("bidirected_edges", []):
            if not i < j:
                raise GraphError(f"bidirected edge [{i}, {j}] must be listed with i < j")
        return cls.from_edges(n, obj.get("directed_edges", []), obj.get("bidirected_edges", []))


def topological_order(directed: np.ndarray) -> Optional[list]:
    """Kahn's algorithm; ``None`` when the directed part has a cycle."""
    adj = np.asarray(directed) != 0
    indeg = adj.sum(axis=0).astype(int)
    ready = [i for i in range(adj.shape[0]) if indeg[i] == 0]
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for j in np.nonzero(adj[i])[0]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(int(j))
    return order if len(order) == adj.shape[0] else None


def is_acyclic(directed: np.ndarray) -> bool:
    return topological_order(directed) is not None


def is_bow_free_admg(g: AdmgGraph) -> bool:
    if topological_order(g.directed) is None:
        return False
    return not np.any(g.directed * g.bidirected)


def bow_free_penalty(directed, bidirected) -> dn.Value:
    """trace(exp(G_D)) - D + sum(G_D * G_B) on binary or soft adjacencies.

    Accepts arrays or diffnum Values (optionally with leading batch axes) and
    stays differentiable in both arguments.
    """
    gd, gb = dn.as_value(directed), dn.as_value(bidirected)
    if gd.ndim < 2 or gd.shape[-1] != gd.shape[-2]:
        raise GraphError(f"directed adjacency must be square, got {gd.shape}")
    if gb.shape != gd.shape:
        raise GraphError(f"bidirected adjacency shape {gb.shape} does not match {gd.shape}")
    d = gd.shape[-1]
    acyc = dn.trace(dn.expm(gd)) - float(d)
    bows = dn.sum(dn.sum(gd * gb, axis=-1), axis=-1)
    return acyc + bows


@dataclass(frozen=True)
class PriorHyperparams:
    lambda_directed: float = 5.0
    lambda_bidirected: float = 5.0
    rho: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        for name in ("lambda_directed", "lambda_bidirected", "rho", "alpha"):
            if getattr(self, name) < 0:
                raise GraphError(f"{name} must be non-negative")


def graph_log_prior(directed, bidirected, hp: PriorHyperparams, penalty: Optional[dn.Value] = None) -> dn.Value:
    """Unnormalised log prior; the normalising constant is dropped."""
    gd, gb = dn.as_value(directed), dn.as_value(bidirected)
    h = bow_free_penalty(gd, gb) if penalty is None else penalty
    sparsity = hp.lambda_directed * dn.sum(dn.square(gd)) + hp.lambda_bidirected * dn.sum(dn.square(gb))
    return -(sparsity + hp.rho * dn.square(h) + hp.alpha * h)


@dataclass(frozen=True)
class MagnifiedGraph:
    """Observed nodes ``0..D-1`` followed by one latent per pair ``i < j``."""

    num_observed: int
    adjacency: np.ndarray

    @property
    def num_latent(self) -> int:
        return self.adjacency.shape[0] - self.num_observed

    @property
    def pairs(self) -> tuple:
        return node_pairs(self.num_observed)

    def active_latents(self) -> list:
        d = self.num_observed
        return [k for k in range(self.num_latent) if self.adjacency[d + k].any()]

    def observed_block(self) -> np.ndarray:
        d = self.num_observed
        return self.adjacency[:d, :d]


def magnify(g: AdmgGraph) -> MagnifiedGraph:
    gb = np.asarray(g.bidirected)
    if not np.array_equal(gb, gb.T):
        raise GraphError("bidirected adjacency must be symmetric")
    d = g.num_nodes
    pairs = node_pairs(d)
    adj = np.zeros((d + len(pairs), d + len(pairs)), dtype=np.int64)
    adj[:d, :d] = g.directed
    for k, (i, j) in enumerate(pairs):
        if gb[i, j]:
            adj[d + k, i] = adj[d + k, j] = 1
    return MagnifiedGraph(d, adj)


def _f1(pred: set, truth: set) -> float:
    if not pred and not truth:
        return 1.0
    tp = len(pred & truth)
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(truth) if truth else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_scores(predicted: AdmgGraph, truth: AdmgGraph) -> tuple:
    """(directed F1 over ordered pairs, bidirected F1 over unordered pairs)."""
    if predicted.num_nodes != truth.num_nodes:
        raise GraphError(f"graph sizes differ: {predicted.num_nodes} vs {truth.num_nodes}")
    f1_d = _f1(set(predicted.directed_edges()), set(truth.directed_edges()))
    f1_b = _f1(set(predicted.bidirected_edges()), set(truth.bidirected_edges()))
    return f1_d, f1_b


def enumerate_bow_free_admgs(num_nodes: int) -> list:
    """Every acyclic bow-free ADMG on ``num_nodes`` labelled nodes."""
    if num_nodes > 4:
        raise GraphError("exhaustive enumeration is limited to 4 nodes")
    if num_nodes < 1:
        raise GraphError("need at least one node")
    pairs = node_pairs(num_nodes)
    out = []
    # each pair is independently: none, i->j, j->i or i<->j
    for states in itertools.product(range(4), repeat=len(pairs)):
        gd = np.zeros((num_nodes, num_nodes), dtype=np.int64)
        gb = np.zeros_like(gd)
        for (i, j), s in zip(pairs, states):
            if s == 1:
                gd[i, j] = 1
            elif s == 2:
                gd[j, i] = 1
            elif s == 3:
                gb[i, j] = gb[j, i] = 1
        if is_acyclic(gd):
            out.append(AdmgGraph(gd, gb))
    return out


def all_mixed_graphs(num_nodes: int):
    """Stacked arrays of every binary (G_D, symmetric G_B) pair, no self loops."""
    off = [(i, j) for i in range(num_nodes) for j in range(num_nodes) if i != j]
    pairs = node_pairs(num_nodes)
    n_d, n_b = 2 ** len(off), 2 ** len(pairs)
    bits_d = ((np.arange(n_d)[:, None] >> np.arange(len(off))) & 1).astype(float)
    bits_b = ((np.arange(n_b)[:, None] >> np.arange(len(pairs))) & 1).astype(float)
    gd = np.zeros((n_d, num_nodes, num_nodes))
    for k, (i, j) in enumerate(off):
        gd[:, i, j] = bits_d[:, k]
    gb = np.zeros((n_b, num_nodes, num_nodes))
    for k, (i, j) in enumerate(pairs):
        gb[:, i, j] = gb[:, j, i] = bits_b[:, k]
    gd_all = np.repeat(gd, n_b, axis=0)
    gb_all = np.tile(gb, (n_d, 1, 1))
    return gd_all, gb_all


def write_edge_probabilities(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"to_{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])


def read_edge_probabilities(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)
