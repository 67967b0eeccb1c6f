"""Approximate posterior over mixed graphs and pair latents.

The graph posterior is factorised per unordered pair ``i < j``:

    P(i -> j) = s(gamma) s(theta),  P(j -> i) = s(gamma) s(-theta),
    P(i <-> j) = s(beta)

with ``s`` the logistic function. Latents get an amortised diagonal Gaussian
``q(u | x)`` produced by a small tanh MLP.

Variational parameters live in one flat dict: ``gamma``, ``theta``, ``beta``
(each of length M) and the encoder weights under ``enc.*``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from . import diffnum as dn
from .admg import AdmgGraph, f1_scores, node_pairs

GRAPH_KEYS = ("gamma", "theta", "beta")
LOG_2PI = float(np.log(2 * np.pi))


def init_variational_params(num_observed: int, rng: np.random.Generator, hidden_dim: int = 80) -> dict:
    m = num_observed * (num_observed - 1) // 2
    d, h = num_observed, hidden_dim
    return {
        "gamma": np.zeros(m),
        "theta": np.zeros(m),
        "beta": np.zeros(m),
        "enc.w0": rng.normal(scale=1 / np.sqrt(d), size=(d, h)),
        "enc.b0": np.zeros(h),
        "enc.w1": rng.normal(scale=1 / np.sqrt(h), size=(h, h)),
        "enc.b1": np.zeros(h),
        "enc.w2": rng.normal(scale=0.1 / np.sqrt(h), size=(h, 2 * m)),
        "enc.b2": np.zeros(2 * m),
    }


@lru_cache(maxsize=None)
def _scatter(num_nodes: int):
    """(M, D*D) maps sending pair k=(i, j) to the flat (i, j) and (j, i) cells."""
    pairs = node_pairs(num_nodes)
    fwd = np.zeros((len(pairs), num_nodes * num_nodes))
    bwd = np.zeros_like(fwd)
    for k, (i, j) in enumerate(pairs):
        fwd[k, i * num_nodes + j] = 1.0
        bwd[k, j * num_nodes + i] = 1.0
    for a in (fwd, bwd):
        a.setflags(write=False)
    return fwd, bwd


def num_nodes_from_pairs(m: int) -> int:
    d = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
    if d * (d - 1) // 2 != m:
        raise ValueError(f"{m} is not a pair count")
    return d


def pairs_to_matrices(forward, backward, both):
    """Build (directed, bidirected) adjacencies from per-pair vectors (..., M)."""
    forward, backward, both = dn.as_value(forward), dn.as_value(backward), dn.as_value(both)
    m = forward.shape[-1]
    d = num_nodes_from_pairs(m)
    fwd, bwd = _scatter(d)
    lead = forward.shape[:-1]
    if not lead:
        forward, backward, both = (dn.reshape(v, (1, m)) for v in (forward, backward, both))
    directed = dn.reshape(forward @ fwd + backward @ bwd, lead + (d, d))
    bidirected = dn.reshape(both @ (fwd + bwd), lead + (d, d))
    return directed, bidirected


def edge_probability_vectors(q: Mapping):
    pe = dn.sigmoid(q["gamma"])
    po = dn.sigmoid(q["theta"])
    return pe * po, pe * (1.0 - po), dn.sigmoid(q["beta"])


def graph_edge_probabilities(q: Mapping):
    """Marginal (P_directed, P_bidirected) matrices; differentiable in the logits."""
    return pairs_to_matrices(*edge_probability_vectors(q))


def binary_entropy_from_logit(x) -> dn.Value:
    # H(s(x)) = softplus(x) - x s(x), stable for large |x|
    x = dn.as_value(x)
    return dn.softplus(x) - x * dn.sigmoid(x)


def graph_entropy(q: Mapping) -> dn.Value:
    """Entropy of q(G) in nats: 3-way directed state plus bidirected state per pair."""
    directed = binary_entropy_from_logit(q["gamma"]) + dn.sigmoid(q["gamma"]) * binary_entropy_from_logit(q["theta"])
    return dn.sum(directed + binary_entropy_from_logit(q["beta"]))


@dataclass
class GraphSample:
    """Hard forward graph with straight-through relaxed backward.

    ``directed`` and ``bidirected`` are (..., D, D); ``gates`` is (..., M).
    """

    directed: dn.Value
    bidirected: dn.Value
    gates: dn.Value

    def hard(self) -> AdmgGraph:
        if self.directed.ndim != 2:
            raise ValueError("hard() needs a single (unbatched) sample")
        return AdmgGraph(self.directed.data.astype(np.int64), self.bidirected.data.astype(np.int64))

    def hard_graphs(self) -> list:
        gd = self.directed.data.reshape((-1,) + self.directed.shape[-2:]).astype(np.int64)
        gb = self.bidirected.data.reshape((-1,) + self.bidirected.shape[-2:]).astype(np.int64)
        return [AdmgGraph(a, b) for a, b in zip(gd, gb)]


def sample_graph(q: Mapping, temperature: float, rng: np.random.Generator,
                 batch: Optional[int] = None, hard: bool = True) -> GraphSample:
    """Draw one graph, or ``batch`` independent graphs stacked on axis 0.

    ``hard=False`` keeps the relaxed values in the forward pass (used by
    gradient checks); random draws are identical either way.
    """
    logits = [dn.as_value(q[k]) for k in GRAPH_KEYS]
    if batch is not None:
        logits = [dn.broadcast_to(v, (batch,) + v.shape) for v in logits]
    exist = dn.gumbel_sigmoid_st(logits[0], temperature, rng, hard=hard)
    orient = dn.gumbel_sigmoid_st(logits[1], temperature, rng, hard=hard)
    gates = dn.gumbel_sigmoid_st(logits[2], temperature, rng, hard=hard)
    directed, bidirected = pairs_to_matrices(exist * orient, exist * (1.0 - orient), gates)
    return GraphSample(directed, bidirected, gates)


def mode_graph(q: Mapping) -> AdmgGraph:
    """Threshold marginals at 0.5; a present directed edge takes its likelier orientation."""
    gamma, theta, beta = (np.asarray(dn.as_value(q[k]).data) for k in GRAPH_KEYS)
    d = num_nodes_from_pairs(gamma.size)
    exist = (gamma > 0).astype(float)
    fwd = exist * (theta >= 0)
    directed, bidirected = pairs_to_matrices(fwd, exist - fwd, (beta > 0).astype(float))
    return AdmgGraph(directed.data.astype(np.int64).reshape(d, d), bidirected.data.astype(np.int64).reshape(d, d))


def expected_f1(q: Mapping, truth: AdmgGraph, rng: np.random.Generator, num_samples: int = 100):
    """Mean (directed, bidirected) F1 over hard posterior samples."""
    sample = sample_graph(q, 1.0, rng, batch=num_samples)
    scores = np.array([f1_scores(g, truth) for g in sample.hard_graphs()])
    return float(scores[:, 0].mean()), float(scores[:, 1].mean())


def encode(q: Mapping, x):
    """Amortised posterior parameters (mean, log_std), each (B, M)."""
    h = dn.tanh(dn.as_value(x) @ q["enc.w0"] + q["enc.b0"])
    h = dn.tanh(h @ q["enc.w1"] + q["enc.b1"])
    out = h @ q["enc.w2"] + q["enc.b2"]
    m = out.shape[-1] // 2
    return out[:, :m], out[:, m:]


def gaussian_log_density(z, log_std) -> dn.Value:
    """Per-sample log density of ``mean + exp(log_std) * z`` evaluated at itself."""
    return dn.sum(-0.5 * LOG_2PI - dn.as_value(log_std) - 0.5 * dn.square(z), axis=-1)


def sample_latents(q: Mapping, x, rng: np.random.Generator, noise: Optional[np.ndarray] = None):
    """Reparameterised draw ``u = mean + std * z`` and its log density per sample."""
    mean, log_std = encode(q, x)
    z = rng.standard_normal(mean.shape) if noise is None else np.asarray(noise, dtype=float)
    u = mean + dn.exp(log_std) * z
    return u, gaussian_log_density(z, log_std)


def kl_gaussian(mean, log_std) -> dn.Value:
    """KL(N(mean, std^2) || N(0, 1)) summed over the last axis."""
    mean, log_std = dn.as_value(mean), dn.as_value(log_std)
    return dn.sum(0.5 * (dn.square(mean) + dn.exp(2.0 * log_std) - 1.0) - log_std, axis=-1)


def kl_latent(q: Mapping, x) -> dn.Value:
    return kl_gaussian(*encode(q, x))
