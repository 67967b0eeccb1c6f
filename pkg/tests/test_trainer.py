import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import central_difference, max_rel_err
from nadmg import diffnum as dn
from nadmg.admg import AdmgGraph
from nadmg.datagen import Dataset, gen_fork_collider
from nadmg.trainer import (
    TrainConfig,
    TrainingError,
    TrainState,
    elbo_batch,
    init_model,
    inner_optimize,
    lagrangian_trajectory,
    load_checkpoint,
    marginal_penalty,
    save_checkpoint,
    train,
    update_lagrangian,
)
from nadmg.variational import kl_latent

SMALL = dict(embedding_dim=4, hidden_dim=6, summary_dim=3)
LOG2PI = math.log(2 * math.pi)


def small_model(d=3, seed=0, **kw):
    cfg = TrainConfig(seed=seed, **SMALL, **kw)
    return init_model(d, cfg), cfg


def saturate(q, gamma, theta, beta):
    q["gamma"][:] = gamma
    q["theta"][:] = theta
    q["beta"][:] = beta


def elbo_value(model, cfg, x, rho=1.0, alpha=0.0, kl_weight=1.0, seed=0, num_total=None):
    terms = elbo_batch(model.scm, model.scm.params, model.q, x, num_total or x.shape[0], rho, alpha,
                       kl_weight, cfg, np.random.default_rng(seed))
    return {k: v.item() for k, v in terms.items()}


# --- configuration ---------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.model_lr, c.variational_lr) == (1e-3, 5e-3)
    assert (c.max_inner_steps, c.inner_patience, c.lr_decay_patience) == (5000, 1500, 1000)
    assert (c.lr_decay_factor, c.max_lr_decays, c.max_outer_loops) == (10.0, 2, 30)
    assert (c.penalty_cap, c.rho_growth, c.progress_threshold) == (1e3, 10.0, 0.65)
    assert c.gumbel_temperature == 0.25
    assert c.lambda_directed == c.lambda_bidirected == 5.0
    assert (c.rho_init, c.alpha_init) == (1.0, 0.0)


@pytest.mark.parametrize("kw", [{"model_lr": 0.0}, {"batch_size": -1}, {"progress_threshold": 1.5},
                                {"penalty_cap": 0.0}])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    c = TrainConfig(seed=7, batch_size=64, model_lr=2e-3, lagrangian_rule="literal")
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        TrainConfig.from_dict({"bogus": 1})


# --- Lagrangian schedule -----------------------------------------------------

def test_lagrangian_progress_raises_alpha():
    s = update_lagrangian(TrainState(1.0, 0.0), 1.0, 0.5, TrainConfig())
    assert (s.rho, s.alpha, s.converged) == (1.0, 0.5, False)


def test_lagrangian_stall_raises_rho():
    s = update_lagrangian(TrainState(1.0, 0.25), 1.0, 0.9, TrainConfig())
    assert (s.rho, s.alpha) == (10.0, 0.25)


def test_lagrangian_literal_rule_prefers_alpha():
    # 0.65 * P1 <= P2 < P1 satisfies both written conditions; the literal rule moves alpha
    s = update_lagrangian(TrainState(1.0, 0.0), 1.0, 0.8, TrainConfig(lagrangian_rule="literal"))
    assert (s.rho, s.alpha) == (1.0, 0.8)
    s = update_lagrangian(TrainState(1.0, 0.0), 1.0, 1.2, TrainConfig(lagrangian_rule="literal"))
    assert (s.rho, s.alpha) == (10.0, 0.0)


def test_lagrangian_rule_validated():
    with pytest.raises(ValueError, match="lagrangian_rule"):
        TrainConfig(lagrangian_rule="other")


def test_lagrangian_cap_flags_convergence():
    s = update_lagrangian(TrainState(100.0, 0.0), 1.0, 1.0, TrainConfig())
    assert s.rho == 1e3 and s.converged
    s = update_lagrangian(TrainState(500.0, 900.0), 1.0, 0.5, TrainConfig())
    assert s.alpha == 1e3 and s.converged


def test_lagrangian_rejects_negative_penalty():
    with pytest.raises(ValueError, match="non-negative"):
        update_lagrangian(TrainState(), -1e-3, 0.0, TrainConfig())


def test_lagrangian_trajectory_hand_computed():
    pens = [(1.0, 0.5), (0.5, 0.45), (0.45, 0.25), (0.25, 0.25), (0.25, 0.1)]
    assert lagrangian_trajectory(pens, TrainConfig()) == [
        (1.0, 0.5), (10.0, 0.5), (10.0, 3.0), (100.0, 3.0), (100.0, 13.0)]


def test_lagrangian_trajectory_stops_at_cap_and_loop_limit():
    traj = lagrangian_trajectory([(1.0, 1.0)] * 10, TrainConfig())
    assert [r for r, _ in traj] == [10.0, 100.0, 1000.0]
    traj = lagrangian_trajectory([(1.0, 1e-6)] * 50, TrainConfig(lagrangian_rule="literal"))
    assert len(traj) == 30


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=40),
       st.sampled_from(["threshold", "literal"]))
def test_lagrangian_monotone_and_capped(pens, rule):
    traj = lagrangian_trajectory(pens, TrainConfig(lagrangian_rule=rule))
    prev = (1.0, 0.0)
    for rho, alpha in traj:
        assert rho >= prev[0] and alpha >= prev[1]
        assert 1.0 <= rho <= 1e3 and 0.0 <= alpha <= 1e3
        prev = (rho, alpha)


def test_kl_anneal_schedule():
    cfg = TrainConfig(kl_anneal_steps=100)
    assert [TrainState(global_step=s).anneal(cfg) for s in (0, 50, 100, 500)] == [0.0, 0.5, 1.0, 1.0]
    assert TrainState().anneal(TrainConfig(kl_anneal_steps=0)) == 1.0


# --- inner loop --------------------------------------------------------------

def test_inner_optimize_quadratic_minimum():
    target = np.array([1.5, -2.0, 0.25])
    scale = np.array([1.0, 3.0, 0.5])
    params = {"w": np.zeros(3)}

    def loss_fn(leaves, step):
        return dn.sum(scale * dn.square(leaves["w"] - target))

    res = inner_optimize(params, loss_fn, TrainConfig(model_lr=0.05, max_inner_steps=5000))
    assert np.max(np.abs(params["w"] - target)) < 1e-6
    assert res.final_loss < 1e-10


def test_inner_optimize_zero_steps_leaves_params():
    model, cfg = small_model(max_inner_steps=0)
    before = {k: v.copy() for k, v in model.scm.params.items()}
    x = np.random.default_rng(0).standard_normal((16, 3))

    def loss_fn(leaves, step):
        raise AssertionError("no step should run")

    res = inner_optimize(model.scm.params, loss_fn, cfg)
    assert res.steps == 0
    for k, v in model.scm.params.items():
        assert np.array_equal(v, before[k])


def test_inner_optimize_lr_decay_then_stop():
    # a constant loss never improves after the first step: decay twice, stop on the third trigger
    cfg = TrainConfig(max_inner_steps=10_000, inner_patience=50, lr_decay_patience=10, loss_window=1)
    params = {"w": np.ones(2)}
    res = inner_optimize(params, lambda lv, s: dn.sum(lv["w"] * 0.0) + 1.0, cfg)
    assert res.stop_reason == "lr_decays_exhausted"
    assert res.steps == 31


def test_inner_optimize_patience_stop():
    cfg = TrainConfig(inner_patience=20, lr_decay_patience=1000, loss_window=1)
    res = inner_optimize({"w": np.ones(2)}, lambda lv, s: dn.sum(lv["w"] * 0.0) + 1.0, cfg)
    assert (res.stop_reason, res.steps) == ("patience", 21)


def test_inner_optimize_divergence_aborts():
    with pytest.raises(TrainingError, match="diverged"):
        inner_optimize({"w": np.ones(1)}, lambda lv, s: dn.sum(lv["w"]) * 1e9, TrainConfig())


def test_inner_optimize_uses_group_rates():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    inner_optimize(params, lambda lv, s: dn.sum(lv["a"]) + dn.sum(lv["b"]),
                   TrainConfig(max_inner_steps=1), groups={0.1: ["a"], 0.01: ["b"]})
    np.testing.assert_allclose([params["a"][0], params["b"][0]], [-0.1, -0.01], rtol=1e-6)


# --- ELBO --------------------------------------------------------------------

def zero_structural(model):
    for name in ("xi1", "xi2"):
        model.scm.params[f"{name}.w2"][:] = 0.0
        model.scm.params[f"{name}.b2"][:] = 0.0
    model.scm.params["log_std"][:] = 0.0


def test_elbo_factorised_oracle():
    model, cfg = small_model()
    zero_structural(model)
    saturate(model.q, -50.0, 0.0, -50.0)
    x = np.random.default_rng(1).standard_normal((200, 3))
    got = elbo_value(model, cfg, x)
    loglik = np.sum(-0.5 * x ** 2 - 0.5 * LOG2PI)
    kl = float(np.sum(kl_latent(model.q, x).data))
    assert got["elbo"] == pytest.approx(loglik - kl, abs=1e-6)


def test_elbo_kl_weight_zero_removes_kl():
    model, cfg = small_model()
    x = np.random.default_rng(2).standard_normal((32, 3))
    full = elbo_value(model, cfg, x, kl_weight=1.0, seed=5)
    off = elbo_value(model, cfg, x, kl_weight=0.0, seed=5)
    assert off["elbo"] - full["elbo"] == pytest.approx(full["kl_latent"], rel=1e-12)
    assert full["kl_latent"] == pytest.approx(float(np.sum(kl_latent(model.q, x).data)), rel=1e-12)


def test_elbo_doubling_rho_lowers_elbo_on_cyclic_posterior():
    model, cfg = small_model()
    # pairs (0,1), (0,2), (1,2): 0->1, 2->0, 1->2 is a 3-cycle
    saturate(model.q, 50.0, np.array([50.0, -50.0, 50.0]), -50.0)
    x = np.random.default_rng(3).standard_normal((16, 3))
    lo = elbo_value(model, cfg, x, rho=1.0, seed=9)
    hi = elbo_value(model, cfg, x, rho=2.0, seed=9)
    assert lo["penalty"] > 0
    assert hi["elbo"] < lo["elbo"]
    assert lo["elbo"] - hi["elbo"] == pytest.approx(lo["penalty"] ** 2, rel=1e-9)


def test_elbo_scales_minibatch_to_dataset():
    model, cfg = small_model()
    zero_structural(model)
    saturate(model.q, -50.0, 0.0, -50.0)
    x = np.random.default_rng(4).standard_normal((10, 3))
    kl_w = 0.0
    a = elbo_value(model, cfg, x, kl_weight=kl_w, num_total=10)
    b = elbo_value(model, cfg, x, kl_weight=kl_w, num_total=40)
    assert b["reconstruction"] == pytest.approx(4 * a["reconstruction"], rel=1e-12)


def test_elbo_nan_names_term():
    model, cfg = small_model()
    x = np.random.default_rng(0).standard_normal((4, 3))
    model.q["enc.b2"][:] = np.nan
    with pytest.raises((TrainingError, FloatingPointError)):
        elbo_value(model, cfg, x)


def test_gradient_reaches_every_group():
    model, cfg = small_model(d=3, seed=1)
    x = np.random.default_rng(5).standard_normal((32, 3))
    tape = dn.Tape()
    mp = {k: tape.leaf(v) for k, v in model.scm.params.items()}
    qp = {k: tape.leaf(v) for k, v in model.q.items()}
    terms = elbo_batch(model.scm, mp, qp, x, 32, 1.0, 1.0, 1.0, cfg, np.random.default_rng(0))
    names = list(mp) + list(qp)
    grads = dn.grad(terms["elbo"], list(mp.values()) + list(qp.values()))
    norms = dict(zip(names, (float(np.abs(g).sum()) for g in grads)))
    groups = {"embeddings": ["embeddings"], "ell": [k for k in mp if k.startswith("ell.")],
              "xi1": [k for k in mp if k.startswith("xi1.")], "xi2": [k for k in mp if k.startswith("xi2.")],
              "log_std": ["log_std"], "gamma": ["gamma"], "theta": ["theta"], "beta": ["beta"],
              "encoder": [k for k in qp if k.startswith("enc.")]}
    for group, keys in groups.items():
        assert keys and sum(norms[k] for k in keys) > 0, group


def test_elbo_gradient_matches_finite_differences():
    model, cfg = small_model(d=3, seed=2)
    x = np.random.default_rng(6).standard_normal((5, 3))
    keys = ["xi1.w2", "xi2.w0a", "ell.w1", "log_std", "enc.w2", "embeddings"]
    leaves_src = {**{("m", k): v for k, v in model.scm.params.items()},
                  **{("q", k): v for k, v in model.q.items()}}
    chosen = [leaves_src[("m", k)] if ("m", k) in leaves_src else leaves_src[("q", k)] for k in keys]

    def value(_arrays):
        return elbo_value(model, cfg, x, rho=1.0, alpha=0.5, seed=11)["elbo"]

    tape = dn.Tape()
    mp = {k: tape.leaf(v) for k, v in model.scm.params.items()}
    qp = {k: tape.leaf(v) for k, v in model.q.items()}
    terms = elbo_batch(model.scm, mp, qp, x, 5, 1.0, 0.5, 1.0, cfg, np.random.default_rng(11))
    lv = [mp[k] if k in mp else qp[k] for k in keys]
    analytic = dn.grad(terms["elbo"], lv)
    numeric = central_difference(value, chosen)
    for k, a, n in zip(keys, analytic, numeric):
        assert max_rel_err(a, n) < 1e-4, k


def test_single_sample_estimator_unbiased():
    model, cfg = small_model(d=3, seed=3)
    x = np.random.default_rng(7).standard_normal((4, 3))
    singles = np.array([elbo_value(model, cfg, x, seed=1000 + s)["reconstruction"] for s in range(1000)])
    pooled = elbo_value(model, cfg, np.repeat(x, 1000, axis=0), num_total=4, seed=1)["reconstruction"]
    se = singles.std(ddof=1) / math.sqrt(len(singles))
    assert abs(singles.mean() - pooled) < 3 * math.sqrt(se ** 2 + se ** 2)


def test_marginal_penalty_at_init():
    model, _ = small_model()
    # all directed marginals 0.25, bidirected 0.5: positive but finite
    assert 0 < marginal_penalty(model.q) < 10


# --- full training -----------------------------------------------------------

def tiny_dataset(n=64, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(n)
    b = np.tanh(a) + 0.3 * rng.standard_normal(n)
    truth = AdmgGraph.from_edges(2, [(0, 1)], [])
    return Dataset(np.column_stack([a, b]), truth, seed=seed, generator="test")


def tiny_config(**kw):
    base = dict(max_inner_steps=15, max_outer_loops=2, batch_size=16, **SMALL)
    return TrainConfig(**{**base, **kw})


def test_train_is_deterministic():
    ds = tiny_dataset()
    r1 = train(ds, tiny_config(seed=3))
    r2 = train(ds, tiny_config(seed=3))
    assert json.dumps(r1.report) == json.dumps(r2.report)
    for k in r1.model.q:
        assert np.array_equal(r1.model.q[k], r2.model.q[k])
    r3 = train(ds, tiny_config(seed=4))
    assert json.dumps(r1.report) != json.dumps(r3.report)


def test_train_report_fields_and_schedule():
    res = train(tiny_dataset(), tiny_config())
    assert len(res.report) == 2
    for rec in res.report:
        assert {"loop", "rho", "alpha", "elbo", "penalty", "f1_d", "f1_b", "inner_steps"} <= set(rec)
        assert math.isfinite(rec["elbo"]) and rec["penalty"] >= 0
    assert res.report[0]["rho"] == 1.0 and res.report[0]["alpha"] == 0.0
    assert res.state.global_step == sum(r["inner_steps"] for r in res.report)


def test_train_without_truth_omits_f1():
    ds = tiny_dataset()
    ds = Dataset(ds.x, None, seed=0, generator="test")
    res = train(ds, tiny_config(max_outer_loops=1))
    assert "f1_d" not in res.report[0]


def test_checkpoint_round_trip(tmp_path):
    res = train(tiny_dataset(), tiny_config(max_outer_loops=1))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, res.model, tiny_config(max_outer_loops=1), res.state)
    model, cfg, state = load_checkpoint(path)
    assert cfg == tiny_config(max_outer_loops=1)
    assert state["rho"] == res.state.rho
    for src, dst in ((res.model.scm.params, model.scm.params), (res.model.q, model.q)):
        assert set(src) == set(dst)
        for k in src:
            assert np.array_equal(src[k], dst[k])
    np.testing.assert_array_equal(model.means, res.model.means)
    assert model.mode_graph() == res.model.mode_graph()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.json"):
        load_checkpoint(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        load_checkpoint(bad)


@pytest.mark.slow
def test_training_loss_decreases_on_fork_collider():
    ds = gen_fork_collider(seed=0)
    cfg = TrainConfig(max_inner_steps=600, max_outer_loops=1)
    losses = []
    from nadmg import trainer as tr

    orig = tr.inner_optimize

    def spy(params, loss_fn, config, groups=None, on_step=None):
        return orig(params, loss_fn, config, groups, on_step=lambda s, v: losses.append(v))

    tr.inner_optimize = spy
    try:
        train(ds, cfg)
    finally:
        tr.inner_optimize = orig
    start, end = np.mean(losses[:200]), np.mean(losses[-200:])
    assert end <= start
