"""Interventional queries: mutilation, posterior-averaged ATE and its ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .admg import AdmgGraph, GraphError, topological_order
from .datagen import Dataset, ExpSem
from .scm import simulate_batch
from .variational import edge_probability_vectors, pairs_to_matrices, sample_graph


class AteError(RuntimeError):
    pass


def mutilate(g: AdmgGraph, target: int) -> AdmgGraph:
    """Drop directed edges into ``target`` and bidirected edges touching it."""
    if not 0 <= target < g.num_nodes:
        raise GraphError(f"treatment index {target} out of range for {g.num_nodes} nodes")
    gd = g.directed.copy()
    gb = g.bidirected.copy()
    gd[:, target] = 0
    gb[:, target] = 0
    gb[target, :] = 0
    return AdmgGraph(gd, gb)


@dataclass(frozen=True)
class InterventionQuery:
    treatment: int
    a: float
    b: float
    responses: tuple
    num_graphs: int = 1000
    samples_per_graph: int = 2

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(int(r) for r in self.responses))
        if self.treatment in self.responses:
            raise ValueError("treatment cannot also be a response")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("intervention values must be finite")
        if self.num_graphs < 1 or self.samples_per_graph < 1:
            raise ValueError("need at least one graph and one sample per graph")


@dataclass
class AteEstimate:
    responses: tuple
    ate: np.ndarray
    stderr: np.ndarray
    num_samples: int
    cyclic_rejections: int = 0

    def as_dict(self) -> dict:
        return {int(r): float(v) for r, v in zip(self.responses, self.ate)}


def _find_cycle(adj: np.ndarray) -> Optional[list]:
    """Edges of one directed cycle, or None."""
    d = adj.shape[0]
    color = [0] * d
    parent = [-1] * d

    for root in range(d):
        if color[root]:
            continue
        stack = [(root, iter(np.nonzero(adj[root])[0]))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                continue
            nxt = int(nxt)
            if color[nxt] == 0:
                color[nxt] = 1
                parent[nxt] = node
                stack.append((nxt, iter(np.nonzero(adj[nxt])[0])))
            elif color[nxt] == 1:
                cycle = [(node, nxt)]
                cur = node
                while cur != nxt:
                    cycle.append((parent[cur], cur))
                    cur = parent[cur]
                return cycle
    return None


def break_cycles(directed: np.ndarray, marginals: np.ndarray) -> np.ndarray:
    """Greedily drop the least probable edge on each remaining cycle."""
    adj = np.array(directed, dtype=float)
    while True:
        cycle = _find_cycle(adj)
        if cycle is None:
            return adj
        i, j = min(cycle, key=lambda e: marginals[e])
        adj[i, j] = 0.0


def draw_acyclic_graphs(q, num_graphs: int, temperature: float, rng: np.random.Generator,
                        max_attempts: int = 100, abort_fraction: float = 0.9):
    """Hard posterior draws with cyclic ones redrawn; returns (directed, gates, rejections)."""
    first = sample_graph(q, temperature, rng, batch=num_graphs)
    directed = first.directed.data.copy()
    gates = first.gates.data.copy()
    cyclic = [k for k in range(num_graphs) if topological_order(directed[k]) is None]
    if len(cyclic) > abort_fraction * num_graphs:
        raise AteError(f"{len(cyclic)} of {num_graphs} posterior graphs are cyclic; the posterior has not converged")
    pfwd, pbwd, _ = (v.data for v in edge_probability_vectors(q))
    marg = None
    for k in cyclic:
        for _ in range(max_attempts):
            s = sample_graph(q, temperature, rng)
            if topological_order(s.directed.data) is not None:
                directed[k], gates[k] = s.directed.data, s.gates.data
                break
        else:
            if marg is None:
                marg = pairs_to_matrices(pfwd, pbwd, np.zeros_like(pfwd))[0].data
            directed[k] = break_cycles(directed[k], marg)
    return directed, gates, len(cyclic)


def _to_normalized(value: float, index: int, means, stds) -> float:
    if means is None:
        return float(value)
    return (float(value) - means[index]) / stds[index]


def estimate_ate(model, query: InterventionQuery, rng: np.random.Generator, temperature: float = 0.25) -> AteEstimate:
    """Posterior-averaged ATE of do(x_T = b) versus do(x_T = a), in original units.

    Both arms share latents and exogenous noise per sample (common random numbers).
    """
    scm = model.scm
    d, m = scm.num_observed, scm.num_latent
    t = query.treatment
    if not 0 <= t < d or any(not 0 <= r < d for r in query.responses):
        raise GraphError(f"query indices out of range for {d} variables")
    directed, gates, rejected = draw_acyclic_graphs(model.q, query.num_graphs, temperature, rng)
    s = query.samples_per_graph
    directed = np.repeat(directed, s, axis=0)
    gates = np.repeat(gates, s, axis=0)
    n = directed.shape[0]
    latents = rng.standard_normal((n, m))
    noise = rng.standard_normal((n, d))
    a = _to_normalized(query.a, t, model.means, model.stds)
    b = _to_normalized(query.b, t, model.means, model.stds)
    xa = simulate_batch(scm, directed, gates, noise, latents, {t: a})
    xb = simulate_batch(scm, directed, gates, noise, latents, {t: b}) if b != a else xa
    resp = list(query.responses)
    diff = xb[:, resp] - xa[:, resp]
    if model.stds is not None:
        diff = diff * model.stds[resp]
    se = diff.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(resp))
    return AteEstimate(query.responses, diff.mean(axis=0), se, n, rejected)


def true_ate(sem: Optional[ExpSem], query: InterventionQuery, rng: np.random.Generator, n: int = 100_000):
    """Monte Carlo ATE under the generating SEM with common random numbers."""
    if sem is None:
        raise AteError("dataset carries no generating SEM")
    state = rng.bit_generator.state
    xa, _ = sem.sample(n, rng, {query.treatment: query.a})
    rng.bit_generator.state = state
    xb, _ = sem.sample(n, rng, {query.treatment: query.b})
    diff = xb[:, list(query.responses)] - xa[:, list(query.responses)]
    return AteEstimate(query.responses, diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(n), n)


def ate_rmse(estimates: AteEstimate, truths: AteEstimate) -> float:
    if tuple(estimates.responses) != tuple(truths.responses):
        raise ValueError(f"response sets differ: {estimates.responses} vs {truths.responses}")
    err = np.asarray(estimates.ate) - np.asarray(truths.ate)
    return float(np.sqrt(np.mean(err ** 2)))


def rmse(errors: Sequence[float]) -> float:
    err = np.asarray(errors, dtype=float)
    if err.size == 0:
        raise ValueError("no responses")
    return float(np.sqrt(np.mean(err ** 2)))


def dataset_query(ds: Dataset, num_graphs: int = 1000, samples_per_graph: int = 2) -> InterventionQuery:
    """The dataset's recorded contrast expressed in original units.

    Contrasts recorded in normalised units are mapped through the raw data's
    column mean and std of the treatment.
    """
    c = ds.spec.get("ate_contrast")
    if c is None:
        raise AteError("dataset records no ATE contrast")
    t = int(c["treatment"])
    a, b = float(c["a"]), float(c["b"])
    if c.get("units") == "normalized":
        raw = ds.x if ds.means is None else ds.x * ds.stds + ds.means
        mu, sd = raw[:, t].mean(), raw[:, t].std()
        a, b = mu + sd * a, mu + sd * b
    return InterventionQuery(t, a, b, tuple(c["responses"]), num_graphs, samples_per_graph)


def ate_report(query: InterventionQuery, est: AteEstimate, truth: Optional[AteEstimate] = None) -> dict:
    out = {
        "treatment": query.treatment,
        "a": query.a,
        "b": query.b,
        "responses": [{"index": int(r), "ate": float(v), "stderr": float(s)}
                      for r, v, s in zip(est.responses, est.ate, est.stderr)],
    }
    if truth is not None:
        out["rmse_vs_truth"] = ate_rmse(est, truth)
        out["true_ate"] = [float(v) for v in truth.ate]
    return out
