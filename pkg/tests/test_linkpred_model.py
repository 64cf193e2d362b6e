import numpy as np
import pytest

from stationflow import synth
from stationflow.errors import NumericError
from stationflow.linkpred import (
    Checkpoint,
    TrainConfig,
    embed_pair,
    init_model,
    predict_pairs,
    score_link,
    train,
)
from stationflow.linkpred.graph import TransitionGraph, _adjacency_from_edges
from stationflow.linkpred.model import (
    PARAM_NAMES,
    _forward,
    build_batch_structure,
    fit_head,
    get_param_vector,
    loss_and_grads,
    set_param_vector,
)

from conftest import graph_from_edges


def tiny_graph():
    edges = {(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)}
    return graph_from_edges(6, edges)


class TestEmbedding:
    def test_isolated_node_uses_zero_neighbor_mean(self):
        g = graph_from_edges(3, [(0, 1)])  # node 2 isolated
        feats = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        model = init_model(2, widths=(3, 3), seed=0)
        h_iso, _ = embed_pair(model, g, feats, (2, 0))
        st = build_batch_structure(g, np.array([(2, 0)]), None, None)
        f = _forward(model, feats, st)
        # layer-1 mean for the isolated node is exactly zero
        iso_row = list(st.l1_nodes).index(2)
        np.testing.assert_array_equal(f["c1"][iso_row, 2:], 0.0)
        assert np.all(np.isfinite(h_iso))

    def test_identical_nodes_get_identical_embeddings(self):
        # a 4-cycle is vertex-transitive; identical features => equal output
        g = graph_from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        feats = np.tile([[0.5, -1.0]], (4, 1))
        model = init_model(2, seed=1)
        e0, e2 = embed_pair(model, g, feats, (0, 2))
        np.testing.assert_allclose(e0, e2, atol=1e-12)

    def test_layer1_with_identity_weights_concatenates(self):
        g = graph_from_edges(2, [(0, 1)])
        feats = np.array([[0.3, 0.7], [0.9, 0.1]])
        model = init_model(2, widths=(4, 4), seed=0)
        model.w1[...] = np.eye(4)
        model.b1[...] = 0.0
        st = build_batch_structure(g, np.array([(0, 1)]), None, None)
        f = _forward(model, feats, st)
        row = list(st.l1_nodes).index(0)
        np.testing.assert_allclose(f["h1"][row], np.maximum([0.3, 0.7, 0.9, 0.1], 0.0))

    def test_unit_norm_output(self):
        g = tiny_graph()
        feats = np.random.default_rng(0).normal(size=(6, 3))
        model = init_model(3, seed=2)
        e1, e2 = embed_pair(model, g, feats, (0, 3))
        assert np.linalg.norm(e1) == pytest.approx(1.0)
        assert np.linalg.norm(e2) == pytest.approx(1.0)


class TestScore:
    def test_zero_embeddings_give_sigmoid_offset(self):
        model = init_model(2, seed=0)
        model.head[...] = [1.0, 0.4]
        z = np.zeros(4)
        expected = 1.0 / (1.0 + np.exp(-0.4))
        assert score_link(model, z, z) == pytest.approx(expected)

    def test_orthogonal_embeddings_give_half(self):
        model = init_model(2, seed=0)
        model.head[...] = [1.0, 0.0]
        assert score_link(model, np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.5)

    def test_symmetric_in_arguments(self):
        g = tiny_graph()
        feats = np.random.default_rng(3).normal(size=(6, 3))
        model = init_model(3, seed=4)
        e1, e2 = embed_pair(model, g, feats, (1, 4))
        assert score_link(model, e1, e2) == pytest.approx(score_link(model, e2, e1))
        p = predict_pairs(model, g, feats, np.array([(1, 4), (4, 1)]))
        assert p[0] == pytest.approx(p[1])


class TestGradients:
    @pytest.mark.parametrize("pair_mode", ["dot", "elementwise"])
    def test_analytic_matches_finite_differences(self, pair_mode):
        g = tiny_graph()
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(6, 5))
        model = init_model(5, widths=(4, 3), seed=7, pair_mode=pair_mode)
        pairs = np.array([(0, 2), (1, 3), (5, 2), (0, 4)])
        labels = np.array([1.0, 0.0, 1.0, 0.0])
        st = build_batch_structure(g, pairs, None, None)
        _, grads, _ = loss_and_grads(model, feats, st, labels)
        flat = np.concatenate([grads[n].ravel() for n in PARAM_NAMES])
        vec = get_param_vector(model)
        fd = np.zeros_like(vec)
        h = 1e-5
        for i in range(len(vec)):
            for sign in (+1, -1):
                probe = vec.copy()
                probe[i] += sign * h
                set_param_vector(model, probe)
                loss, _, _ = loss_and_grads(model, feats, st, labels)
                fd[i] += sign * loss / (2 * h)
        set_param_vector(model, vec)
        denom = np.maximum(np.maximum(np.abs(flat), np.abs(fd)), 1e-8)
        assert np.max(np.abs(flat - fd) / denom) <= 1e-4


class TestElementwiseHead:
    def test_unit_weights_match_dot_head(self):
        g = tiny_graph()
        feats = np.random.default_rng(8).normal(size=(6, 4))
        dot = init_model(4, widths=(3, 3), seed=9, pair_mode="dot")
        elem = init_model(4, widths=(3, 3), seed=9, pair_mode="elementwise")
        pairs = np.array([(0, 3), (1, 5), (2, 4)])
        np.testing.assert_allclose(
            predict_pairs(dot, g, feats, pairs), predict_pairs(elem, g, feats, pairs)
        )

    def test_symmetric_in_arguments(self):
        g = tiny_graph()
        feats = np.random.default_rng(9).normal(size=(6, 4))
        model = init_model(4, seed=10, pair_mode="elementwise")
        model.head[:-1] = np.random.default_rng(10).normal(size=model.widths[1])
        p = predict_pairs(model, g, feats, np.array([(1, 4), (4, 1)]))
        assert p[0] == pytest.approx(p[1])

    def test_trains_and_roundtrips(self, tmp_path):
        edges, comm = synth.planted_partition_graph(40, 2, 0.5, 0.1, seed=3)
        g = graph_from_edges(40, edges)
        feats = synth.community_feature_matrix(comm, seed=3)
        from stationflow.linkpred import split_edges

        sp = split_edges(g, 0.1, 0.1, seed=3)
        model = init_model(feats.shape[1], seed=3, pair_mode="elementwise")
        model, history = train(model, sp.g_train, feats, sp.train_pairs, sp.train_labels,
                               TrainConfig(epochs=5, seed=3))
        assert history[-1] < history[0]
        ckpt = Checkpoint(
            model=model, num_samples=(20, 10), feature_means=np.zeros(feats.shape[1]),
            feature_stds=np.ones(feats.shape[1]), station_order=g.stations,
            with_clustering=True, master_seed=3, config_hash="x", extra={"trained": True},
        )
        path = tmp_path / "elem.json"
        ckpt.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.model.pair_mode == "elementwise"
        pairs = sp.test_pairs[:8]
        np.testing.assert_array_equal(
            predict_pairs(model, sp.g_test, feats, pairs),
            predict_pairs(loaded.model, sp.g_test, feats, pairs),
        )

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            init_model(4, pair_mode="hadamard")


class TestTraining:
    def test_head_only_separable_reaches_perfect_accuracy(self):
        rng = np.random.default_rng(0)
        scores = np.concatenate([rng.uniform(0.5, 2.0, 50), rng.uniform(-2.0, -0.5, 50)])
        labels = np.concatenate([np.ones(50), np.zeros(50)])
        head = fit_head(scores, labels, epochs=200, lr=0.5)
        pred = (head[0] * scores + head[1]) > 0
        assert np.mean(pred == labels) == 1.0

    def test_training_is_deterministic(self):
        edges, labels_comm = synth.planted_partition_graph(40, 2, 0.5, 0.1, seed=0)
        g = graph_from_edges(40, edges)
        feats = synth.community_feature_matrix(labels_comm, seed=0)
        pairs = np.array(sorted(g.edges)[:40])
        y = np.ones(40)
        neg = np.array([(0, 39), (1, 38), (2, 37), (3, 36)] * 10)
        pairs = np.vstack([pairs, neg])
        y = np.concatenate([y, np.zeros(40)])
        cfg = TrainConfig(epochs=3, seed=5)
        m1, h1 = train(init_model(34, seed=5), g, feats, pairs, y, cfg)
        m2, h2 = train(init_model(34, seed=5), g, feats, pairs, y, cfg)
        assert h1 == h2
        np.testing.assert_array_equal(get_param_vector(m1), get_param_vector(m2))

    def test_loss_decreases_on_learnable_problem(self):
        edges, comm = synth.planted_partition_graph(60, 2, 0.5, 0.05, seed=1)
        g = graph_from_edges(60, edges)
        feats = synth.community_feature_matrix(comm, seed=1)
        from stationflow.linkpred import split_edges

        sp = split_edges(g, 0.1, 0.1, seed=1)
        model, history = train(
            init_model(feats.shape[1], seed=1), sp.g_train, feats,
            sp.train_pairs, sp.train_labels, TrainConfig(epochs=10, seed=1),
        )
        assert history[-1] < history[0]

    def test_non_finite_features_abort(self):
        g = tiny_graph()
        feats = np.zeros((6, 3))
        feats[0, 0] = np.nan
        pairs = np.array([(0, 2)])
        with pytest.raises(NumericError):
            train(init_model(3, seed=0), g, feats, pairs, np.array([1.0]), TrainConfig(epochs=1))


class TestInductive:
    def test_embedding_new_node_without_retraining(self):
        edges, comm = synth.planted_partition_graph(30, 2, 0.5, 0.1, seed=2)
        g = graph_from_edges(30, edges)
        feats = synth.community_feature_matrix(comm, seed=2)
        model = init_model(feats.shape[1], seed=3)
        # extend: one unseen node wired to nodes 0 and 1
        new_edges = set(g.edges) | {(0, 30), (1, 30)}
        g_ext = TransitionGraph(
            stations=g.stations + ["N30"],
            edges=new_edges,
            adjacency=_adjacency_from_edges(31, new_edges),
            directed_counts={},
        )
        feats_ext = np.vstack([feats, feats[0]])
        e_new, e_old = embed_pair(model, g_ext, feats_ext, (30, 5))
        assert np.all(np.isfinite(e_new))
        prob = predict_pairs(model, g_ext, feats_ext, np.array([(30, 5)]))[0]
        assert 0.0 <= prob <= 1.0

    def test_far_nodes_unaffected_by_extension(self):
        # a path graph: adding a leaf at node 0 cannot change embeddings
        # of nodes more than two hops away
        edges = {(i, i + 1) for i in range(7)}
        g = graph_from_edges(8, edges)
        feats = np.random.default_rng(4).normal(size=(8, 3))
        model = init_model(3, seed=4)
        before = embed_pair(model, g, feats, (6, 7))
        new_edges = set(edges) | {(0, 8)}
        g_ext = TransitionGraph(
            stations=g.stations + ["N8"],
            edges=new_edges,
            adjacency=_adjacency_from_edges(9, new_edges),
            directed_counts={},
        )
        feats_ext = np.vstack([feats, np.ones(3)])
        after = embed_pair(model, g_ext, feats_ext, (6, 7))
        np.testing.assert_allclose(before[0], after[0])
        np.testing.assert_allclose(before[1], after[1])


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        g = tiny_graph()
        feats = np.random.default_rng(6).normal(size=(6, 4))
        model = init_model(4, seed=6)
        pairs = np.array([(0, 2), (1, 5)])
        before = predict_pairs(model, g, feats, pairs)
        ckpt = Checkpoint(
            model=model,
            num_samples=(20, 10),
            feature_means=np.zeros(4),
            feature_stds=np.ones(4),
            station_order=g.stations,
            with_clustering=False,
            master_seed=6,
            config_hash="abc",
            extra={"trained": True},
        )
        path = tmp_path / "ckpt.json"
        ckpt.save(path)
        loaded = Checkpoint.load(path)
        after = predict_pairs(loaded.model, g, feats, pairs)
        np.testing.assert_array_equal(before, after)
        assert loaded.station_order == g.stations
        assert loaded.extra["trained"] is True
