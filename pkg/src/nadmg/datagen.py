"""Synthetic datasets with known mixed-graph ground truth, plus dataset I/O."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .admg import AdmgGraph, is_bow_free_admg, node_pairs, topological_order

SQRT6 = float(np.sqrt(6.0))


class DatasetError(ValueError):
    pass


@dataclass
class ExpSem:
    """x_i = sum_j W[j, i] exp(-x_j^2) + sum_k L[k, i] exp(-u_k^2) + noise_std[i] * eps_i.

    Latents are independent ``N(0, latent_std[k]^2)``. Works as the ground-truth
    handle for both generators and supports hard interventions.
    """

    weights: np.ndarray
    latent_weights: np.ndarray
    noise_std: np.ndarray
    latent_std: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.latent_weights = np.asarray(self.latent_weights, dtype=float).reshape(-1, self.weights.shape[0])
        self.noise_std = np.asarray(self.noise_std, dtype=float)
        self.latent_std = np.asarray(self.latent_std, dtype=float)
        if topological_order(self.weights != 0) is None:
            raise DatasetError("structural weights must form an acyclic graph")

    @property
    def num_observed(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng: np.random.Generator, interventions: Optional[Mapping[int, float]] = None):
        d = self.num_observed
        u = rng.standard_normal((n, self.latent_weights.shape[0])) * self.latent_std
        eps = rng.standard_normal((n, d)) * self.noise_std
        base = np.exp(-u ** 2) @ self.latent_weights + eps
        x = np.zeros((n, d))
        interventions = dict(interventions or {})
        for i in topological_order(self.weights != 0):
            if i in interventions:
                x[:, i] = interventions[i]
                continue
            x[:, i] = np.exp(-x ** 2) @ self.weights[:, i] + base[:, i]
        return x, u

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "latent_weights": self.latent_weights.tolist(),
            "noise_std": self.noise_std.tolist(),
            "latent_std": self.latent_std.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExpSem":
        return cls(**{k: np.asarray(obj[k], dtype=float) for k in ("weights", "latent_weights", "noise_std", "latent_std")})


@dataclass
class Dataset:
    x: np.ndarray
    truth: Optional[AdmgGraph] = None
    sem: Optional[ExpSem] = None
    means: Optional[np.ndarray] = None
    stds: Optional[np.ndarray] = None
    seed: Optional[int] = None
    generator: str = "external"
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise DatasetError(f"data must be a matrix, got shape {self.x.shape}")
        if np.isnan(self.x).any():
            raise DatasetError("data contains NaN")

    @property
    def num_samples(self) -> int:
        return self.x.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.x.shape[1]

    @property
    def normalized(self) -> bool:
        return self.means is not None

    def metadata(self) -> dict:
        spec = dict(self.spec)
        if self.sem is not None:
            spec["sem"] = self.sem.to_json()
        return {
            "seed": self.seed,
            "truth_graph": None if self.truth is None else self.truth.to_json(),
            "normalization": None if self.means is None else {"means": self.means.tolist(), "stds": self.stds.tolist()},
            "generator": self.generator,
            "spec": spec,
        }


def gen_fork_collider(n: int = 2000, seed: int = 0) -> Dataset:
    if n < 1:
        raise DatasetError("n must be at least 1")
    w = np.zeros((5, 5))
    w[0, 3] = w[0, 4] = SQRT6
    lat = np.zeros((2, 5))
    lat[0, [1, 2]] = SQRT6
    lat[1, [2, 3]] = SQRT6
    sem = ExpSem(w, lat, np.array([1.0, 0.1, 0.2, 0.1, 0.1]), np.ones(2))
    x, _ = sem.sample(n, np.random.default_rng(seed))
    truth = AdmgGraph.from_edges(5, directed=[(0, 3), (0, 4)], bidirected=[(1, 2), (2, 3)])
    spec = {"n": n, "ate_contrast": {"treatment": 3, "responses": [1, 2, 4], "a": -1.0, "b": 1.0,
                                     "units": "normalized"}}
    return Dataset(x, truth, sem, seed=seed, generator="fork-collider", spec=spec)


@dataclass(frozen=True)
class ErSpec:
    d: int
    e: float
    m: float
    n: int = 5000
    seed: int = 0

    def __post_init__(self):
        pairs = self.d * (self.d - 1) / 2
        if self.d < 2:
            raise DatasetError("d must be at least 2")
        if not 0 <= self.e <= pairs:
            raise DatasetError(f"e must lie in [0, {pairs:g}]")
        if not 0 <= self.m <= pairs:
            raise DatasetError(f"m must lie in [0, {pairs:g}]")
        if self.n < 1:
            raise DatasetError("n must be at least 1")


def _signed_uniform(rng, size):
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(0.5, 2.0, size=size)


def sample_er_graph(spec: ErSpec, rng: np.random.Generator):
    """(graph, number of bidirected draws skipped because they would form a bow)."""
    d = spec.d
    pairs = d * (d - 1) / 2
    perm = rng.permutation(d)
    gd = np.zeros((d, d), dtype=np.int64)
    for a in range(d):
        for b in range(a + 1, d):
            if rng.random() < spec.e / pairs:
                gd[perm[a], perm[b]] = 1
    gb = np.zeros_like(gd)
    skipped = 0
    for i, j in node_pairs(d):
        if rng.random() < spec.m / pairs:
            if gd[i, j] or gd[j, i]:
                skipped += 1
                continue
            gb[i, j] = gb[j, i] = 1
    return AdmgGraph(gd, gb), skipped


def gen_er_admg(spec: ErSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    g, skipped = sample_er_graph(spec, rng)
    d = spec.d
    w = g.directed * _signed_uniform(rng, (d, d))
    bidir = g.bidirected_edges()
    lat = np.zeros((len(bidir), d))
    for k, (i, j) in enumerate(bidir):
        lat[k, [i, j]] = _signed_uniform(rng, 2)
    sem = ExpSem(w, lat, np.full(d, 0.1), np.full(len(bidir), 0.1))
    x, _ = sem.sample(spec.n, rng)
    meta = {"d": d, "e": spec.e, "m": spec.m, "n": spec.n, "bow_skipped": skipped,
            "bow_policy": "skip bidirected draws on pairs with a directed edge"}
    assert is_bow_free_admg(g)
    return Dataset(x, g, sem, seed=spec.seed, generator="er", spec=meta)


def normalize(ds: Dataset) -> Dataset:
    """Zero mean, unit std per column; stats compose with any earlier normalisation."""
    if ds.num_samples < 2:
        raise DatasetError("need at least two samples to normalize")
    mu = ds.x.mean(axis=0)
    sd = ds.x.std(axis=0)
    bad = np.nonzero(~(sd > 0))[0]
    if bad.size:
        raise DatasetError(f"column x_{int(bad[0])} has zero variance")
    x = (ds.x - mu) / sd
    if ds.means is not None:
        mu, sd = ds.means + ds.stds * mu, ds.stds * sd
    return replace(ds, x=x, means=mu, stds=sd)


def denormalize(x: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    return np.asarray(x) * stds + means


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{j}" for j in range(ds.num_nodes)])
        for row in ds.x:
            w.writerow([format(float(v), ".17g") for v in row])
    meta = ds.metadata()
    meta["num_nodes"] = ds.num_nodes
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: line 1: missing header")
    header = rows[0]
    if header != [f"x_{j}" for j in range(len(header))]:
        raise DatasetError(f"{path}: line 1: header must be x_0..x_{{D-1}}")
    d = len(header)
    data = np.zeros((len(rows) - 1, d))
    for k, row in enumerate(rows[1:]):
        if len(row) != d:
            raise DatasetError(f"{path}: line {k + 2}: expected {d} fields, got {len(row)}")
        try:
            data[k] = [float(v) for v in row]
        except ValueError as exc:
            raise DatasetError(f"{path}: line {k + 2}: {exc}") from None
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
    spec = dict(meta.get("spec") or {})
    sem = ExpSem.from_json(spec.pop("sem")) if "sem" in spec else None
    norm = meta.get("normalization")
    truth = meta.get("truth_graph")
    return Dataset(
        data,
        truth=None if truth is None else AdmgGraph.from_json(truth),
        sem=sem,
        means=None if norm is None else np.asarray(norm["means"], dtype=float),
        stds=None if norm is None else np.asarray(norm["stds"], dtype=float),
        seed=meta.get("seed"),
        generator=meta.get("generator", "external"),
        spec=spec,
    )
