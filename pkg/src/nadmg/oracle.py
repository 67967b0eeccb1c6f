"""Pairwise residual-independence tests for mixed-graph structure.

For a pair ``(i, j)`` with the remaining variables ``x_-ij``:

* none:        resid(x_i | x_-ij) is independent of resid(x_j | x_-ij)
* j -> i:      resid(x_i | x_-i)  is independent of resid(x_j | x_-ij)
* i -> j:      resid(x_j | x_-j)  is independent of resid(x_i | x_-ij)
* bidirected:  every one of the above is rejected

Regression is an affine trend plus Gaussian kernel ridge regression with
2-fold cross-fitting; independence is a permutation HSIC test.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .admg import AdmgGraph, node_pairs

VERDICTS = ("bidirected", "none", "i_causes_j", "j_causes_i", "ambiguous")


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class TestConfig:
    __test__ = False  # not a pytest class

    alpha: float = 0.01
    permutations: int = 500
    ridge: float = 1e-3
    sample_cap: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise OracleError("alpha must lie in (0, 1)")
        if self.permutations < 1 or self.sample_cap < 50:
            raise OracleError("need at least one permutation and a sample cap of at least 50")


def _median_bandwidth(z: np.ndarray) -> float:
    d = pdist(z[:2000])
    med = np.median(d[d > 0]) if np.any(d > 0) else 0.0
    return float(med) if med > 0 else 1.0


def _gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2 * bandwidth ** 2))


def nonparam_regress(target, predictors, ridge: float = 1e-3, seed: int = 0) -> np.ndarray:
    """Cross-fitted residuals of ``target`` on ``predictors``.

    Each fold fits an affine least-squares trend, then Gaussian kernel ridge
    regression on what the trend leaves; the trend keeps out-of-fold
    predictions sensible where the kernel alone would decay to the mean.
    """
    y = np.asarray(target, dtype=float).ravel()
    n = y.size
    if n < 50:
        raise OracleError(f"need at least 50 samples, got {n}")
    x = np.asarray(predictors, dtype=float).reshape(n, -1)
    if x.shape[1] == 0:
        return y - y.mean()
    if not np.all(np.isfinite(x)):
        raise OracleError("predictors contain non-finite values")
    sd = x.std(axis=0)
    if np.any(sd == 0):
        raise OracleError(f"predictor column {int(np.argmin(sd))} is constant")
    x = (x - x.mean(axis=0)) / sd
    design = np.column_stack([np.ones(n), x])
    folds = np.random.default_rng(seed).permutation(n) % 2
    resid = np.empty(n)
    for k in (0, 1):
        tr, te = folds != k, folds == k
        beta = np.linalg.lstsq(design[tr], y[tr], rcond=None)[0]
        rest = y[tr] - design[tr] @ beta
        bw = _median_bandwidth(x[tr])
        kern = _gaussian_kernel(x[tr], x[tr], bw)
        kern[np.diag_indices_from(kern)] += ridge
        coef = cho_solve(cho_factor(kern), rest)
        resid[te] = y[te] - design[te] @ beta - _gaussian_kernel(x[te], x[tr], bw) @ coef
    return resid


def _centered_kernel_dense(z: np.ndarray) -> np.ndarray:
    """Full ``H K H``; reference for the low-rank factor."""
    z = z.reshape(len(z), -1)
    k = _gaussian_kernel(z, z, _median_bandwidth(z))
    return k - k.mean(axis=0) - k.mean(axis=1, keepdims=True) + k.mean()


def _kernel_factor(z: np.ndarray, tol: float = 1e-8, max_rank: int = 200) -> np.ndarray:
    """Centred low-rank factor ``F`` with ``H K H ~= F F^T`` (pivoted incomplete Cholesky)."""
    z = z.reshape(len(z), -1)
    n = z.shape[0]
    bw = _median_bandwidth(z)
    resid = np.ones(n)
    cols = []
    for _ in range(min(max_rank, n)):
        j = int(np.argmax(resid))
        if resid[j] <= tol:
            break
        col = _gaussian_kernel(z, z[j:j + 1], bw)[:, 0]
        if cols:
            f = np.column_stack(cols)
            col = col - f @ f[j]
        col = col / np.sqrt(resid[j])
        cols.append(col)
        resid = np.maximum(resid - col ** 2, 0.0)
    f = np.column_stack(cols)
    return f - f.mean(axis=0)


def hsic_test(a, b, config: TestConfig = TestConfig(), seed: Optional[int] = None):
    """(p-value, statistic) of a permutation HSIC test with Gaussian kernels.

    The statistic is ``tr(H K H L) / n^2`` evaluated through low-rank kernel
    factors; permuting ``b`` keeps the test exact whatever the factor error.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise OracleError("inputs must have equal length")
    n = a.shape[0]
    if n < 50:
        raise OracleError(f"need at least 50 samples, got {n}")
    for name, v in (("a", a), ("b", b)):
        if np.all(v.reshape(n, -1).std(axis=0) == 0):
            raise OracleError(f"input {name} is constant")
    fa = _kernel_factor(a)
    fb = _kernel_factor(b)
    stat = float(np.sum((fa.T @ fb) ** 2)) / n ** 2
    rng = np.random.default_rng(config.seed if seed is None else seed)
    perms = np.stack([rng.permutation(n) for _ in range(config.permutations)])
    exceed = 0
    for start in range(0, len(perms), 64):
        cross = np.matmul(fa.T, fb[perms[start:start + 64]])
        exceed += int(np.sum(np.sum(cross ** 2, axis=(1, 2)) / n ** 2 >= stat))
    return (1 + exceed) / (1 + config.permutations), stat


@dataclass
class PairVerdict:
    i: int
    j: int
    verdict: str
    p_values: dict = field(default_factory=dict)
    statistics: dict = field(default_factory=dict)

    def flipped(self) -> "PairVerdict":
        swap = {"i_causes_j": "j_causes_i", "j_causes_i": "i_causes_j"}
        p = {swap.get(k, k): v for k, v in self.p_values.items()}
        s = {swap.get(k, k): v for k, v in self.statistics.items()}
        return PairVerdict(self.j, self.i, swap.get(self.verdict, self.verdict), p, s)

    def to_json(self) -> dict:
        return asdict(self)


def decide(p_none: float, p_i_to_j: float, p_j_to_i: float, alpha: float) -> str:
    if p_none > alpha:
        return "none"
    fwd, bwd = p_i_to_j > alpha, p_j_to_i > alpha
    if fwd and not bwd:
        return "i_causes_j"
    if bwd and not fwd:
        return "j_causes_i"
    if not fwd and not bwd:
        return "bidirected"
    return "ambiguous"


def _subsample(data: np.ndarray, config: TestConfig) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if not np.all(np.isfinite(data)):
        raise OracleError("data contains non-finite values")
    if data.shape[0] <= config.sample_cap:
        return data
    idx = np.sort(np.random.default_rng(config.seed).choice(data.shape[0], config.sample_cap, replace=False))
    return data[idx]


def classify_pair(data, i: int, j: int, config: TestConfig = TestConfig()) -> PairVerdict:
    data = _subsample(data, config)
    d = data.shape[1]
    if not (0 <= i < d and 0 <= j < d) or i == j:
        raise OracleError(f"invalid pair ({i}, {j}) for {d} variables")
    rest = [k for k in range(d) if k not in (i, j)]
    seed = config.seed
    r_i_rest = nonparam_regress(data[:, i], data[:, rest], config.ridge, seed)
    r_j_rest = nonparam_regress(data[:, j], data[:, rest], config.ridge, seed)
    r_i_all = nonparam_regress(data[:, i], data[:, [k for k in range(d) if k != i]], config.ridge, seed)
    r_j_all = nonparam_regress(data[:, j], data[:, [k for k in range(d) if k != j]], config.ridge, seed)
    p_none, s_none = hsic_test(r_i_rest, r_j_rest, config)
    p_fwd, s_fwd = hsic_test(r_j_all, r_i_rest, config)
    p_bwd, s_bwd = hsic_test(r_i_all, r_j_rest, config)
    verdict = decide(p_none, p_fwd, p_bwd, config.alpha)
    return PairVerdict(i, j, verdict,
                       {"none": p_none, "i_causes_j": p_fwd, "j_causes_i": p_bwd},
                       {"none": s_none, "i_causes_j": s_fwd, "j_causes_i": s_bwd})


def classify_graph(data, config: TestConfig = TestConfig()):
    """Assemble pair verdicts into a mixed graph; ambiguous pairs get no edge."""
    data = _subsample(data, config)
    d = data.shape[1]
    verdicts = [classify_pair(data, i, j, config) for i, j in node_pairs(d)]
    directed, bidirected = [], []
    for v in verdicts:
        if v.verdict == "i_causes_j":
            directed.append((v.i, v.j))
        elif v.verdict == "j_causes_i":
            directed.append((v.j, v.i))
        elif v.verdict == "bidirected":
            bidirected.append((v.i, v.j))
    return AdmgGraph.from_edges(d, directed, bidirected), verdicts


def verdict_report(graph: AdmgGraph, verdicts: list, config: TestConfig) -> dict:
    return {
        "config": asdict(config),
        "graph": graph.to_json(),
        "pairs": [v.to_json() for v in verdicts],
        "ambiguous": [[v.i, v.j] for v in verdicts if v.verdict == "ambiguous"],
    }
