import itertools
import json

import numpy as np
import pytest

from nadmg import diffnum as dn
from nadmg.admg import (
    AdmgGraph,
    GraphError,
    PriorHyperparams,
    all_mixed_graphs,
    bow_free_penalty,
    enumerate_bow_free_admgs,
    f1_scores,
    graph_log_prior,
    is_bow_free_admg,
    magnify,
    node_pairs,
    read_edge_probabilities,
    write_edge_probabilities,
)
from helpers import central_difference, max_rel_err

TWO_CYCLE = 2 * np.cosh(1.0) - 2  # trace(exp([[0,1],[1,0]])) - 2


def fork_collider_truth():
    # x1..x5 -> indices 0..4
    return AdmgGraph.from_edges(5, directed=[(0, 3), (0, 4)], bidirected=[(1, 2), (2, 3)])


class TestPenalty:
    @pytest.mark.parametrize("d", [1, 3, 6])
    def test_empty_graph_is_zero(self, d):
        z = np.zeros((d, d))
        assert bow_free_penalty(z, z).item() == 0.0

    def test_two_cycle(self):
        gd = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert bow_free_penalty(gd, np.zeros((2, 2))).item() == pytest.approx(1.086161, abs=1e-6)
        assert bow_free_penalty(gd, np.zeros((2, 2))).item() == pytest.approx(TWO_CYCLE, abs=1e-12)

    def test_bow_counts_once(self):
        gd = np.array([[0.0, 1.0], [0.0, 0.0]])
        gb = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert bow_free_penalty(gd, gb).item() == pytest.approx(1.0, abs=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(GraphError):
            bow_free_penalty(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_gradient_on_soft_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            gd = rng.uniform(0, 1, (3, 3)) * (1 - np.eye(3))
            b = rng.uniform(0, 1, (3, 3))
            gb = np.triu(b, 1) + np.triu(b, 1).T
            tape = dn.Tape()
            lv = [tape.leaf(gd), tape.leaf(gb)]
            ga = dn.grad(bow_free_penalty(*lv), lv)
            fd = central_difference(lambda a: bow_free_penalty(a[0], a[1]).item(), [gd.copy(), gb.copy()])
            for x, y in zip(ga, fd):
                assert max_rel_err(x, y) < 1e-5

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_zero_iff_bow_free_admg_exhaustive(self, d):
        gd, gb = all_mixed_graphs(d)
        h = bow_free_penalty(gd, gb).data
        valid = set(enumerate_bow_free_admgs(d))
        assert np.all(h >= -1e-12)
        hits = 0
        for k in range(gd.shape[0]):
            g = AdmgGraph(gd[k].astype(int), gb[k].astype(int))
            is_valid = g in valid
            assert (h[k] <= 1e-9) == is_valid
            hits += is_valid
        assert hits == len(valid)


class TestPrior:
    def test_empty(self):
        z = np.zeros((3, 3))
        assert graph_log_prior(z, z, PriorHyperparams(rho=1, alpha=1)).item() == 0.0

    def test_single_edge(self):
        gd = np.zeros((3, 3))
        gd[0, 1] = 1
        assert graph_log_prior(gd, np.zeros((3, 3)), PriorHyperparams()).item() == pytest.approx(-5.0)

    def test_two_cycle_with_penalties(self):
        gd = np.array([[0.0, 1.0], [1.0, 0.0]])
        value = graph_log_prior(gd, np.zeros((2, 2)), PriorHyperparams(rho=1.0, alpha=1.0)).item()
        assert value == pytest.approx(-10 - TWO_CYCLE ** 2 - TWO_CYCLE, abs=1e-9)
        assert value == pytest.approx(-12.2659, abs=1e-4)

    def test_negative_hyperparameters_rejected(self):
        with pytest.raises(GraphError):
            PriorHyperparams(rho=-1.0)


class TestMagnify:
    def test_empty(self):
        m = magnify(AdmgGraph.empty(3))
        assert m.adjacency.shape == (6, 6)
        assert not m.adjacency.any()

    def test_fork_collider(self):
        m = magnify(fork_collider_truth())
        pairs = node_pairs(5)
        active = [pairs[k] for k in m.active_latents()]
        assert active == [(1, 2), (2, 3)]
        for k in m.active_latents():
            assert m.adjacency[5 + k].sum() == 2
        assert not m.adjacency[:, 5:].any()

    def test_fully_bidirected(self):
        m = magnify(AdmgGraph.from_edges(3, bidirected=[(0, 1), (0, 2), (1, 2)]))
        assert len(m.active_latents()) == 3
        assert m.adjacency[3:].sum() == 6

    def test_restriction_and_latent_count(self):
        for g in enumerate_bow_free_admgs(3):
            m = magnify(g)
            np.testing.assert_array_equal(m.observed_block(), g.directed)
            assert len(m.active_latents()) == len(g.bidirected_edges())
            assert not m.adjacency[:, 3:].any()


class TestValidity:
    def test_examples(self):
        assert is_bow_free_admg(AdmgGraph.empty(3))
        assert not is_bow_free_admg(AdmgGraph.from_edges(2, directed=[(0, 1), (1, 0)]))
        assert not is_bow_free_admg(AdmgGraph.from_edges(2, directed=[(0, 1)], bidirected=[(0, 1)]))

    def test_constructor_checks(self):
        with pytest.raises(GraphError):
            AdmgGraph(np.eye(2, dtype=int), np.zeros((2, 2), dtype=int))
        with pytest.raises(GraphError):
            AdmgGraph(np.zeros((2, 2), dtype=int), np.array([[0, 1], [0, 0]]))


class TestEnumerate:
    def test_sizes(self):
        assert enumerate_bow_free_admgs(1) == [AdmgGraph.empty(1)]
        two = enumerate_bow_free_admgs(2)
        assert len(two) == 4
        assert set(two) == {
            AdmgGraph.empty(2),
            AdmgGraph.from_edges(2, directed=[(0, 1)]),
            AdmgGraph.from_edges(2, directed=[(1, 0)]),
            AdmgGraph.from_edges(2, bidirected=[(0, 1)]),
        }

    def test_three_nodes_have_zero_penalty(self):
        for g in enumerate_bow_free_admgs(3):
            assert abs(bow_free_penalty(g.directed.astype(float), g.bidirected.astype(float)).item()) <= 1e-9

    def test_too_large(self):
        with pytest.raises(GraphError):
            enumerate_bow_free_admgs(5)


class TestF1:
    def test_identical(self):
        g = fork_collider_truth()
        assert f1_scores(g, g) == (1.0, 1.0)

    def test_disjoint(self):
        a = AdmgGraph.from_edges(3, directed=[(0, 1)], bidirected=[(1, 2)])
        b = AdmgGraph.from_edges(3, directed=[(1, 2)], bidirected=[(0, 1)])
        assert f1_scores(a, b) == (0.0, 0.0)

    def test_half_overlap(self):
        truth = AdmgGraph.from_edges(4, directed=[(1, 2), (2, 3)])
        pred = AdmgGraph.from_edges(4, directed=[(1, 2), (3, 1)])
        assert f1_scores(pred, truth)[0] == pytest.approx(0.5)

    def test_empty_sets_score_one(self):
        assert f1_scores(AdmgGraph.empty(3), AdmgGraph.empty(3)) == (1.0, 1.0)
        assert f1_scores(AdmgGraph.empty(3), fork_collider_truth().__class__.from_edges(3, [(0, 1)]))[0] == 0.0

    def test_size_mismatch(self):
        with pytest.raises(GraphError):
            f1_scores(AdmgGraph.empty(2), AdmgGraph.empty(3))

    def test_relabelling_symmetry(self):
        rng = np.random.default_rng(0)
        graphs = enumerate_bow_free_admgs(3)
        for _ in range(50):
            a, b = (graphs[k] for k in rng.integers(len(graphs), size=2))
            perm = rng.permutation(3)

            def relabel(g):
                return AdmgGraph(g.directed[np.ix_(perm, perm)], g.bidirected[np.ix_(perm, perm)])

            assert f1_scores(a, b) == f1_scores(relabel(a), relabel(b))


def test_json_round_trip():
    g = fork_collider_truth()
    obj = json.loads(json.dumps(g.to_json()))
    assert obj["bidirected_edges"] == [[1, 2], [2, 3]]
    assert AdmgGraph.from_json(obj) == g


def test_edge_probability_csv(tmp_path):
    m = np.random.default_rng(0).uniform(size=(3, 3))
    path = tmp_path / "p.csv"
    write_edge_probabilities(path, m)
    assert path.read_text().splitlines()[0] == "to_0,to_1,to_2"
    np.testing.assert_array_equal(read_edge_probabilities(path), m)


def test_penalty_nonnegative_on_binary_graphs():
    for gd_bits in itertools.product([0, 1], repeat=6):
        gd = np.zeros((3, 3))
        gd[~np.eye(3, dtype=bool)] = gd_bits
        assert bow_free_penalty(gd, np.zeros((3, 3))).item() >= 0
