"""ELBO assembly and augmented-Lagrangian training.

The objective per minibatch is

    (N / B) sum_b [log p(x_b | u_b, G_b) - c * KL(q(u | x_b) || p(u))]
        + E_q[log p~(G)] + H[q(G)]

with one graph and one latent draw per datapoint. Sparsity terms of the
prior use exact edge marginals; the penalty terms ``rho h^2 + alpha h`` use a
single straight-through graph draw because ``h`` is nonlinear in ``G``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import diffnum as dn
from .admg import AdmgGraph, bow_free_penalty, f1_scores
from .datagen import Dataset, normalize
from .scm import FlowScm, ScmConfig, conditional_log_likelihood, init_scm_params
from .variational import (
    encode,
    expected_f1,
    graph_edge_probabilities,
    graph_entropy,
    init_variational_params,
    kl_gaussian,
    mode_graph,
    sample_graph,
)

CHECKPOINT_FORMAT = "nadmg-ckpt-v1"
REPORT_FORMAT = "nadmg-report-v1"
# "threshold": alpha moves only on sufficient progress (P2 < threshold * P1), else rho grows.
# "literal": alpha moves on any decrease; rho grows when P2 >= threshold * P1.
LAGRANGIAN_RULES = ("threshold", "literal")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model_lr: float = 1e-3
    variational_lr: float = 5e-3
    max_inner_steps: int = 5000
    inner_patience: int = 1500
    lr_decay_patience: int = 1000
    lr_decay_factor: float = 10.0
    max_lr_decays: int = 2
    max_outer_loops: int = 30
    penalty_cap: float = 1e3
    rho_init: float = 1.0
    alpha_init: float = 0.0
    rho_growth: float = 10.0
    progress_threshold: float = 0.65
    lagrangian_rule: str = "threshold"
    gumbel_temperature: float = 0.25
    lambda_directed: float = 5.0
    lambda_bidirected: float = 5.0
    batch_size: int = 128
    seed: int = 0
    kl_anneal_steps: int = 1000
    loss_window: int = 100
    penalty_tol: float = 1e-8
    divergence_limit: float = 1e8
    embedding_dim: int = 32
    hidden_dim: int = 80
    summary_dim: int = 32

    def __post_init__(self):
        if self.lagrangian_rule not in LAGRANGIAN_RULES:
            raise ValueError(f"lagrangian_rule must be one of {LAGRANGIAN_RULES}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lagrangian_rule":
                continue
            if f.name in ("seed", "alpha_init", "kl_anneal_steps", "max_inner_steps", "penalty_tol"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0 < self.progress_threshold <= 1:
            raise ValueError("progress_threshold must lie in (0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(obj) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for k, v in obj.items():
            typ = {"int": int, "str": str}.get(known[k].type, float)
            out[k] = typ(v)
        return cls(**out)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    rho: float = 1.0
    alpha: float = 0.0
    loop: int = 0
    global_step: int = 0
    converged: bool = False
    best_losses: list = field(default_factory=list)

    def anneal(self, config: TrainConfig) -> float:
        if config.kl_anneal_steps == 0:
            return 1.0
        return min(1.0, self.global_step / config.kl_anneal_steps)


@dataclass
class Model:
    """Trainable pieces: SCM parameters plus variational parameters."""

    scm: FlowScm
    q: dict
    means: Optional[np.ndarray] = None
    stds: Optional[np.ndarray] = None

    @property
    def num_observed(self) -> int:
        return self.scm.num_observed

    def edge_probabilities(self):
        pd, pb = graph_edge_probabilities(self.q)
        return pd.data, pb.data

    def mode_graph(self) -> AdmgGraph:
        return mode_graph(self.q)


def init_model(num_observed: int, config: TrainConfig) -> Model:
    ss = np.random.SeedSequence(config.seed)
    r_model, r_var = (np.random.default_rng(s) for s in ss.spawn(2))
    scfg = ScmConfig(num_observed, config.embedding_dim, config.hidden_dim, config.summary_dim)
    return Model(FlowScm(scfg, init_scm_params(scfg, r_model)),
                 init_variational_params(num_observed, r_var, config.hidden_dim))


def marginal_penalty(q) -> float:
    """Bow-free penalty of the edge-marginal matrices (the schedule's P1/P2)."""
    pd, pb = graph_edge_probabilities(q)
    return float(bow_free_penalty(pd.data, pb.data).item())


def elbo_batch(scm: FlowScm, model_p, q, x, num_total: int, rho: float, alpha: float,
               kl_weight: float, config: TrainConfig, rng: np.random.Generator, hard: bool = True) -> dict:
    """Single-sample ELBO estimate and its terms, as diffnum Values.

    ``hard=False`` evaluates the relaxed graph samples instead of the hard
    ones; the straight-through gradient is then the exact gradient.
    """
    x = np.asarray(x, dtype=float)
    b = x.shape[0]
    temp = config.gumbel_temperature
    graphs = sample_graph(q, temp, rng, batch=b, hard=hard)
    mean, log_std = encode(q, x)
    u = mean + dn.exp(log_std) * rng.standard_normal(mean.shape)
    loglik = conditional_log_likelihood(scm, x, u, graphs.directed, graphs.gates, model_p)
    kl = kl_gaussian(mean, log_std)
    scale = num_total / b
    recon = scale * dn.sum(loglik)
    kl_term = scale * dn.sum(kl)
    pd, pb = graph_edge_probabilities(q)
    sparsity = config.lambda_directed * dn.sum(pd) + config.lambda_bidirected * dn.sum(pb)
    draw = sample_graph(q, temp, rng, hard=hard)
    h = bow_free_penalty(draw.directed, draw.bidirected)
    prior = -(sparsity + rho * dn.square(h) + alpha * h)
    entropy = graph_entropy(q)
    elbo = recon - kl_weight * kl_term + prior + entropy
    terms = {"elbo": elbo, "reconstruction": recon, "kl_latent": kl_term, "prior": prior,
             "entropy": entropy, "penalty": h}
    for name, v in terms.items():
        if not np.all(np.isfinite(v.data)):
            raise TrainingError(f"non-finite ELBO term: {name}")
    return terms


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


@dataclass
class InnerResult:
    steps: int
    final_loss: float
    stop_reason: str


def inner_optimize(params: dict, loss_fn: Callable, config: TrainConfig,
                   groups: Optional[dict] = None, on_step: Optional[Callable] = None) -> InnerResult:
    """Adam on ``loss_fn(leaves, step) -> scalar Value`` with plateau handling.

    ``groups`` maps a learning rate to the parameter names it drives; all
    names default to ``config.model_lr``. A moving average of the loss over
    ``config.loss_window`` steps decides improvement. After
    ``lr_decay_patience`` stalled steps the rates drop by ``lr_decay_factor``
    (at most ``max_lr_decays`` times, one more trigger stops); after
    ``inner_patience`` stalled steps the loop stops.
    """
    names = sorted(params)
    if groups is None:
        groups = {config.model_lr: names}
    states = [(dn.AdamState.create([params[k] for k in ks], lr=lr), list(ks)) for lr, ks in groups.items()]
    window = deque(maxlen=config.loss_window)
    best = math.inf
    stall = since_decay = decays = 0
    loss_val = math.nan
    for step in range(config.max_inner_steps):
        tape = dn.Tape()
        leaves = {k: tape.leaf(params[k]) for k in names}
        loss = loss_fn(leaves, step)
        loss_val = loss.item()
        if not math.isfinite(loss_val) or abs(loss_val) > config.divergence_limit:
            raise TrainingError(f"inner loop diverged at step {step}: loss={loss_val!r}")
        grads = dict(zip(names, dn.grad(loss, [leaves[k] for k in names])))
        for st, ks in states:
            dn.adam_step(st, [params[k] for k in ks], [grads[k] for k in ks])
        if on_step is not None:
            on_step(step, loss_val)
        window.append(loss_val)
        avg = sum(window) / len(window)
        if avg < best:
            best = avg
            stall = since_decay = 0
            continue
        stall += 1
        since_decay += 1
        if stall >= config.inner_patience:
            return InnerResult(step + 1, loss_val, "patience")
        if since_decay >= config.lr_decay_patience:
            if decays >= config.max_lr_decays:
                return InnerResult(step + 1, loss_val, "lr_decays_exhausted")
            decays += 1
            since_decay = 0
            for st, _ in states:
                st.lr /= config.lr_decay_factor
    return InnerResult(config.max_inner_steps, loss_val, "max_steps")


def update_lagrangian(state: TrainState, p1: float, p2: float, config: TrainConfig) -> TrainState:
    """Return the next (rho, alpha) state given penalties before and after an inner loop."""
    if p1 < 0 or p2 < 0:
        raise ValueError(f"penalties must be non-negative, got P1={p1!r}, P2={p2!r}")
    rho, alpha = state.rho, state.alpha
    bound = config.progress_threshold * p1 if config.lagrangian_rule == "threshold" else p1
    if p2 < bound:
        alpha = min(alpha + rho * p2, config.penalty_cap)
    elif p2 >= config.progress_threshold * p1:
        rho = min(rho * config.rho_growth, config.penalty_cap)
    converged = rho >= config.penalty_cap or alpha >= config.penalty_cap
    return TrainState(rho, alpha, state.loop + 1, state.global_step, converged, list(state.best_losses))


def lagrangian_trajectory(penalties, config: TrainConfig) -> list:
    """(rho, alpha) after each outer loop for a sequence of (P1, P2) pairs.

    Stops at a cap or after ``max_outer_loops`` loops, like :func:`train`.
    """
    state = TrainState(config.rho_init, config.alpha_init)
    out = []
    for p1, p2 in penalties:
        if state.loop >= config.max_outer_loops or state.converged:
            break
        state = update_lagrangian(state, p1, p2, config)
        out.append((state.rho, state.alpha))
    return out


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    report: list

    @property
    def penalty_zero(self) -> bool:
        return bool(self.report) and self.report[-1]["penalty"] < 1e-8


def evaluate_elbo(model: Model, x: np.ndarray, state: TrainState, config: TrainConfig, seed: int) -> float:
    """Full-data single-sample ELBO (unnormalised prior), per datapoint."""
    rng = np.random.default_rng(seed)
    terms = elbo_batch(model.scm, model.scm.params, model.q, x, x.shape[0], state.rho, state.alpha,
                       1.0, config, rng)
    return terms["elbo"].item() / x.shape[0]


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), log: Optional[Callable] = None) -> TrainResult:
    """Augmented-Lagrangian training on a (re)normalised copy of ``dataset``."""
    ds = normalize(dataset)
    x = ds.x
    n, d = x.shape
    model = init_model(d, config)
    model.means, model.stds = ds.means, ds.stds
    params = {**{f"model/{k}": v for k, v in model.scm.params.items()},
              **{f"q/{k}": v for k, v in model.q.items()}}
    groups = {config.model_lr: [k for k in params if k.startswith("model/")],
              config.variational_lr: [k for k in params if k.startswith("q/")]}
    ss = np.random.SeedSequence(config.seed).spawn(4)
    batch_rng = np.random.default_rng(ss[2])
    noise_rng = np.random.default_rng(ss[3])
    batches = _batches(n, min(config.batch_size, n), batch_rng)
    state = TrainState(config.rho_init, config.alpha_init)
    report = []

    for loop in range(config.max_outer_loops):
        p1 = marginal_penalty(model.q)

        def loss_fn(leaves, step, state=state):
            mp = {k[6:]: v for k, v in leaves.items() if k.startswith("model/")}
            qp = {k[2:]: v for k, v in leaves.items() if k.startswith("q/")}
            idx = next(batches)
            terms = elbo_batch(model.scm, mp, qp, x[idx], n, state.rho, state.alpha,
                               state.anneal(config), config, noise_rng)
            state.global_step += 1
            return terms["elbo"] * (-1.0 / n)

        inner = inner_optimize(params, loss_fn, config, groups)
        p2 = marginal_penalty(model.q)
        record = {"loop": loop, "rho": state.rho, "alpha": state.alpha,
                  "elbo": evaluate_elbo(model, x, state, config, seed=config.seed * 1000 + loop),
                  "penalty": p2, "inner_steps": inner.steps}
        if dataset.truth is not None:
            f1_d, f1_b = expected_f1(model.q, dataset.truth, np.random.default_rng([config.seed, loop]))
            record.update(f1_d=f1_d, f1_b=f1_b)
        report.append(record)
        if log is not None:
            log(record)
        state.best_losses.append(inner.final_loss)
        nxt = update_lagrangian(state, p1, p2, config)
        nxt.global_step = state.global_step
        state = nxt
        if state.converged:
            break
        if p2 < config.penalty_tol and inner.stop_reason != "max_steps":
            state.converged = True
            break
    return TrainResult(model, state, report)


def write_report(path, report: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report:
            fh.write(json.dumps(rec) + "\n")


def _pack(arrays: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in sorted(arrays.items())}


def _unpack(obj: dict) -> dict:
    return {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in obj.items()}


def save_checkpoint(path, model: Model, config: TrainConfig, state: Optional[TrainState] = None) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "scm_config": asdict(model.scm.config),
        "normalization": None if model.means is None else {"means": model.means.tolist(), "stds": model.stds.tolist()},
        "model": _pack(model.scm.params),
        "variational": _pack(model.q),
        "state": None if state is None else {"rho": state.rho, "alpha": state.alpha, "loop": state.loop,
                                             "global_step": state.global_step, "converged": state.converged},
    }
    Path(path).write_text(json.dumps(obj) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return (model, config, state-dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {obj.get('format')!r}")
    scfg = ScmConfig(**obj["scm_config"])
    norm = obj.get("normalization")
    model = Model(FlowScm(scfg, _unpack(obj["model"])), _unpack(obj["variational"]),
                  None if norm is None else np.asarray(norm["means"]),
                  None if norm is None else np.asarray(norm["stds"]))
    return model, TrainConfig.from_dict(obj["config"]), obj.get("state")


def mode_f1(model: Model, truth: AdmgGraph):
    return f1_scores(model.mode_graph(), truth)
