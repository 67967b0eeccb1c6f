"""Magnified additive-noise SCM with shared-weight structural networks.

Node ``i`` of the magnified state ``v = (x, u)`` is predicted as

    f_i(v) = xi1(e_i, sum_{j observed} G[j, i] * ell(e_j, v_j))
           + xi2(e_i, sum_{k latent}  G[k, i] * ell(e_k, v_k))

where ``ell``, ``xi1`` and ``xi2`` are MLPs shared across nodes and ``e_i`` is
a learned node embedding. Latent nodes are parentless with a standard normal
prior; observed residuals are Gaussian with a learned per-node scale.

All functions accept a parameter mapping whose entries are either numpy
arrays or diffnum Values, and are batched over a leading sample axis.
Graphs may be shared by the batch (``(D, D)`` / ``(M,)``) or drawn per sample
(``(B, D, D)`` / ``(B, M)``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import diffnum as dn
from .admg import AdmgGraph, GraphError, node_pairs, pair_incidence, topological_order

LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class ScmConfig:
    num_observed: int
    embedding_dim: int = 32
    hidden_dim: int = 80
    summary_dim: int = 32

    @property
    def num_latent(self) -> int:
        return self.num_observed * (self.num_observed - 1) // 2

    @property
    def num_nodes(self) -> int:
        return self.num_observed + self.num_latent


def _dense(rng, fan_in, fan_out):
    return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_scm_params(config: ScmConfig, rng: np.random.Generator) -> dict:
    e, h, s = config.embedding_dim, config.hidden_dim, config.summary_dim
    p = {
        "embeddings": rng.normal(size=(config.num_nodes, e)),
        "ell.w0e": _dense(rng, e + 1, h)[:e],
        "ell.w0v": _dense(rng, e + 1, h)[:1],
        "ell.b0": np.zeros(h),
        "ell.w1": _dense(rng, h, h),
        "ell.b1": np.zeros(h),
        "ell.w2": _dense(rng, h, s),
        "ell.b2": np.zeros(s),
    }
    for name in ("xi1", "xi2"):
        p.update({
            f"{name}.w0e": _dense(rng, e + s, h)[:e],
            f"{name}.w0a": _dense(rng, e + s, h)[:s],
            f"{name}.b0": np.zeros(h),
            f"{name}.w1": _dense(rng, h, h),
            f"{name}.b1": np.zeros(h),
            f"{name}.w2": _dense(rng, h, 1) * 0.1,
            f"{name}.b2": np.zeros(1),
        })
    p["log_std"] = np.zeros(config.num_observed)
    return p


def mlp_ell(p: Mapping, values, node_slice: slice) -> dn.Value:
    """Per-node summaries ``ell(e_j, v_j)``; ``values`` is (B, n) -> (B, n, S)."""
    values = dn.as_value(values)
    b, n = values.shape
    emb = p["embeddings"][node_slice]
    pre = dn.reshape(values, (b, n, 1)) * p["ell.w0v"] + (emb @ p["ell.w0e"] + p["ell.b0"])
    h = dn.reshape(dn.tanh(pre), (b * n, -1))
    h = dn.tanh(h @ p["ell.w1"] + p["ell.b1"])
    out = h @ p["ell.w2"] + p["ell.b2"]
    return dn.reshape(out, (b, n, -1))


def mlp_xi(p: Mapping, name: str, summary, num_observed: int) -> dn.Value:
    """Node predictions ``xi(e_i, summary_i)``; ``summary`` is (B, D, S) -> (B, D)."""
    summary = dn.as_value(summary)
    b, d, s = summary.shape
    emb = p["embeddings"][:num_observed]
    pre = dn.reshape(dn.reshape(summary, (b * d, s)) @ p[f"{name}.w0a"], (b, d, -1))
    pre = pre + (emb @ p[f"{name}.w0e"] + p[f"{name}.b0"])
    h = dn.reshape(dn.tanh(pre), (b * d, -1))
    h = dn.tanh(h @ p[f"{name}.w1"] + p[f"{name}.b1"])
    out = h @ p[f"{name}.w2"] + p[f"{name}.b2"]
    return dn.reshape(out, (b, d))


class FlowScm:
    """Parameters plus the structural components that consume them.

    ``ell`` and ``xi`` default to the shared MLPs; tests inject closed-form
    components through the same interface.
    """

    def __init__(self, config: ScmConfig, params: dict,
                 ell: Optional[Callable] = None, xi: Optional[Callable] = None):
        self.config = config
        self.params = params
        self.ell = ell or mlp_ell
        self.xi = xi or mlp_xi

    @classmethod
    def create(cls, num_observed: int, rng: np.random.Generator, **config) -> "FlowScm":
        cfg = ScmConfig(num_observed=num_observed, **config)
        return cls(cfg, init_scm_params(cfg, rng))

    @property
    def num_observed(self) -> int:
        return self.config.num_observed

    @property
    def num_latent(self) -> int:
        return self.config.num_latent

    def noise_std(self) -> np.ndarray:
        return np.exp(self.params["log_std"])

    def config_dict(self) -> dict:
        return asdict(self.config)


def latent_gate_matrix(gates, num_observed: int) -> dn.Value:
    """Latent -> observed adjacency block, (M, D) or (B, M, D), from pair gates."""
    gates = dn.as_value(gates)
    inc = pair_incidence(num_observed)
    return dn.reshape(gates, gates.shape + (1,)) * inc


def structural_fn(scm: FlowScm, x, u, directed, gates, params: Optional[Mapping] = None) -> dn.Value:
    """Predictions ``f_i(v)`` for the observed nodes, shape (B, D).

    Latent nodes are parentless, so their structural function is identically
    zero; :func:`structural_fn_full` returns the padded (B, D + M) vector.
    """
    p = scm.params if params is None else params
    x, u = dn.as_value(x), dn.as_value(u)
    d, m = scm.num_observed, scm.num_latent
    directed = dn.as_value(directed)
    if x.ndim != 2 or x.shape[1] != d:
        raise dn.ShapeError("structural_fn", x.shape, (None, d))
    if u.ndim != 2 or u.shape != (x.shape[0], m):
        raise dn.ShapeError("structural_fn", u.shape, (x.shape[0], m))
    if directed.shape[-2:] != (d, d):
        raise dn.ShapeError("structural_fn", directed.shape, (d, d))
    ell_obs = scm.ell(p, x, slice(0, d))
    obs_summary = dn.transpose(directed) @ ell_obs
    pred = scm.xi(p, "xi1", obs_summary, d)
    if m:
        ell_lat = scm.ell(p, u, slice(d, d + m))
        lat_summary = dn.transpose(latent_gate_matrix(gates, d)) @ ell_lat
        pred = pred + scm.xi(p, "xi2", lat_summary, d)
    else:
        pred = pred + scm.xi(p, "xi2", np.zeros(obs_summary.shape), d)
    return pred


def structural_fn_full(scm: FlowScm, x, u, directed, gates, params=None) -> dn.Value:
    pred = structural_fn(scm, x, u, directed, gates, params)
    return dn.concat([pred, np.zeros((pred.shape[0], scm.num_latent))], axis=1)


def noise_log_density(log_std, residual) -> dn.Value:
    """Gaussian log density of residuals, elementwise, with scale exp(log_std)."""
    log_std, residual = dn.as_value(log_std), dn.as_value(residual)
    z = residual * dn.exp(-log_std)
    return -0.5 * LOG_2PI - log_std - 0.5 * dn.square(z)


def standard_normal_log_density(u) -> dn.Value:
    return -0.5 * LOG_2PI - 0.5 * dn.square(u)


def _check_finite(per_node: dn.Value, names):
    bad = ~np.isfinite(per_node.data)
    if bad.any():
        node = int(np.nonzero(bad.any(axis=0))[0][0])
        raise FloatingPointError(f"non-finite log-likelihood at node {names[node]}")


def conditional_log_likelihood(scm: FlowScm, x, u, directed, gates, params=None) -> dn.Value:
    """log p(x | u, G) per sample, shape (B,)."""
    p = scm.params if params is None else params
    x = dn.as_value(x)
    pred = structural_fn(scm, x, u, directed, gates, p)
    per_node = noise_log_density(p["log_std"], x - pred)
    _check_finite(per_node, [f"x{i}" for i in range(scm.num_observed)])
    return dn.sum(per_node, axis=1)


def joint_log_likelihood(scm: FlowScm, x, u, directed, gates, params=None) -> dn.Value:
    """log p(x, u | G) per sample; the Jacobian term is one for acyclic graphs."""
    cond = conditional_log_likelihood(scm, x, u, directed, gates, params)
    u = dn.as_value(u)
    if scm.num_latent == 0:
        return cond
    prior = standard_normal_log_density(u)
    _check_finite(prior, [f"u{k}" for k in range(scm.num_latent)])
    return cond + dn.sum(prior, axis=1)


def gates_from_graph(g: AdmgGraph) -> np.ndarray:
    return np.array([g.bidirected[i, j] for i, j in node_pairs(g.num_nodes)], dtype=float)


def simulate_batch(scm: FlowScm, directed: np.ndarray, gates: np.ndarray, noise: np.ndarray,
                   latents: np.ndarray, interventions: Optional[Mapping[int, float]] = None,
                   params=None) -> np.ndarray:
    """Solve ``x = f(x, u) + eps`` by D fixed-point sweeps.

    For an acyclic directed part the sweep reaches the ancestral-sampling
    solution exactly: after sweep ``t`` every node at depth < t is final.
    Intervened nodes are clamped, which removes their structural equation.
    """
    p = scm.params if params is None else params
    d = scm.num_observed
    std = np.exp(np.asarray(dn.as_value(p["log_std"]).data))
    eps = noise * std
    x = eps.copy()
    interventions = dict(interventions or {})
    for node, val in interventions.items():
        x[:, node] = val
    for _ in range(d):
        x = structural_fn(scm, x, latents, directed, gates, p).data + eps
        for node, val in interventions.items():
            x[:, node] = val
    return x


def simulate(scm: FlowScm, g: AdmgGraph, n: int, rng: np.random.Generator,
             interventions: Optional[Mapping[int, float]] = None, return_latents: bool = False):
    """Ancestral samples of the observed variables under ``g``."""
    if topological_order(g.directed) is None:
        raise GraphError("cannot simulate a cyclic graph")
    if g.num_nodes != scm.num_observed:
        raise GraphError(f"graph has {g.num_nodes} nodes, model has {scm.num_observed}")
    for node in (interventions or {}):
        if not 0 <= node < scm.num_observed:
            raise GraphError(f"intervention target {node} out of range")
    latents = rng.standard_normal((n, scm.num_latent))
    noise = rng.standard_normal((n, scm.num_observed))
    x = simulate_batch(scm, g.directed.astype(float), gates_from_graph(g), noise, latents, interventions)
    return (x, latents) if return_latents else x
