import math

import numpy as np
import pytest

from graphmot.core import BoundingBox, Detection, Trajectory
from graphmot.graph import AssocGraph, build_graph
from graphmot.motion import kf_init
from graphmot.mpn import (
    TrainConfig,
    classify_edges,
    create_model,
    encode,
    load_model,
    mpn_backward,
    mpn_forward,
    propagate,
    save_model,
    train_model,
)
from graphmot.nn import Mlp, grad_check, weighted_bce
from graphmot.synth import generate, preset


def unit_vec(dim, axis):
    v = np.zeros(dim)
    v[axis] = 1.0
    return v


def make_traj(tid, box, feature, last_seen=1):
    return Trajectory(tid, np.asarray(feature, float), box, last_seen, kf_init(box))


def make_det(box, feature, frame=2, conf=0.9, gt_id=None):
    return Detection(frame, box, conf, np.asarray(feature, float), gt_id)


def grid_graph(n_traj, n_det, dim=6, seed=0, spread=120.0, **build_kw):
    rng = np.random.default_rng(seed)
    trajs, dets = [], []
    for i in range(n_traj):
        f = rng.normal(size=dim)
        b = BoundingBox(spread * i, 80.0, 28, 56)
        trajs.append(make_traj(i + 1, b, f / np.linalg.norm(f)))
    for j in range(n_det):
        f = rng.normal(size=dim)
        b = BoundingBox(spread * j + rng.uniform(-4, 4), 82.0, 28, 56)
        dets.append(make_det(b, f / np.linalg.norm(f), gt_id=j + 1))
    build_kw.setdefault("k_neighbors", 20)
    build_kw.setdefault("ratio_variant", "none")
    return build_graph(trajs, dets, **build_kw)


def tiny_linear_model(d_feat=2, rounds=1):
    """Single-layer (purely linear) components with hand-set weights."""
    dn = de = 2
    model = create_model(d_feat, d_node=dn, d_edge=de, rounds=rounds, seed=0)
    model.node_encoder = Mlp([d_feat, dn])
    model.node_encoder.weights[0][...] = np.eye(dn)
    model.edge_encoder = Mlp([6, de])
    model.edge_encoder.weights[0][...] = 0.1 * np.arange(12).reshape(de, 6)
    model.edge_update = Mlp([2 * dn + de, de])
    model.edge_update.weights[0][...] = 0.05 * (np.arange(12).reshape(de, 6) - 5)
    model.edge_update.biases[0][...] = np.array([0.01, -0.02])
    model.node_update = Mlp([dn + de, dn])
    model.node_update.weights[0][...] = 0.1 * np.array(
        [[1.0, -1.0, 0.5, 0.25], [0.0, 2.0, -0.5, 1.0]]
    )
    model.node_update.biases[0][...] = np.array([0.03, -0.01])
    model.classifier = Mlp([de, 1])
    model.classifier.weights[0][...] = np.array([[0.7, -0.4]])
    model.classifier.biases[0][...] = np.array([0.05])
    return model


class TestEncode:
    def test_identity_encoders_pass_through(self):
        model = tiny_linear_model()
        g = grid_graph(2, 2, dim=2)
        state = encode(model, g)
        feats = np.array([t.integrated_feature for t in g.trajectories])
        assert np.allclose(state.traj_layers[0], feats)

    def test_identical_detections_identical_embeddings(self):
        model = create_model(4, d_node=8, d_edge=8, seed=1)
        f = unit_vec(4, 1)
        dets = [make_det(BoundingBox(0, 0, 10, 20), f), make_det(BoundingBox(100, 0, 10, 20), f)]
        trajs = [make_traj(1, BoundingBox(50, 0, 10, 20), unit_vec(4, 0))]
        g = build_graph(trajs, dets, k_neighbors=5)
        state = encode(model, g)
        assert np.array_equal(state.det_layers[0][0], state.det_layers[0][1])

    def test_re_encode_bit_identical(self):
        model = create_model(6, seed=2)
        g = grid_graph(3, 3)
        s1, s2 = encode(model, g), encode(model, g)
        assert np.array_equal(s1.traj_layers[0], s2.traj_layers[0])
        assert np.array_equal(s1.edge_layers[0], s2.edge_layers[0])

    def test_requires_edge_features(self):
        model = create_model(6, seed=0)
        g = grid_graph(2, 2)
        g.edge_features = None
        with pytest.raises(ValueError):
            encode(model, g)


class TestPropagate:
    def test_zero_rounds_is_identity(self):
        model = create_model(6, rounds=0, seed=3)
        g = grid_graph(3, 2)
        state = propagate(model, encode(model, g))
        assert len(state.traj_layers) == 1
        probs = classify_edges(model, state)
        assert probs.shape == (g.n_edges,)

    def test_single_edge_mean_equals_message(self):
        model = tiny_linear_model()
        trajs = [make_traj(1, BoundingBox(0, 0, 10, 20), unit_vec(2, 0))]
        dets = [make_det(BoundingBox(2, 0, 10, 20), unit_vec(2, 1))]
        g = build_graph(trajs, dets, k_neighbors=5)
        state = propagate(model, encode(model, g))
        t0 = state.traj_layers[0][0]
        h1 = state.edge_layers[1][0]
        expected, _ = model.node_update.forward(np.concatenate([t0, h1]))
        assert np.allclose(state.traj_layers[1][0], expected, atol=1e-12)

    def test_two_by_two_matches_hand_loop(self):
        # Independent scalar re-computation of one propagation round over
        # the complete 2x2 bipartite graph, using explicit per-edge loops.
        model = tiny_linear_model()
        g = grid_graph(2, 2, dim=2, seed=5)
        assert g.n_edges == 4
        state = propagate(model, encode(model, g))

        t0, d0, h0 = state.traj_layers[0], state.det_layers[0], state.edge_layers[0]
        we, be = model.edge_update.weights[0], model.edge_update.biases[0]
        wv, bv = model.node_update.weights[0], model.node_update.biases[0]
        edges = list(zip(g.edge_traj.tolist(), g.edge_det.tolist()))
        h1 = {}
        for e, (i, j) in enumerate(edges):
            h1[e] = we @ np.concatenate([t0[i], d0[j], h0[e]]) + be
        t1, d1 = {}, {}
        for i in range(2):
            msgs = [wv @ np.concatenate([t0[i], h1[e]]) + bv
                    for e, (ti, _) in enumerate(edges) if ti == i]
            t1[i] = np.mean(msgs, axis=0)
        for j in range(2):
            msgs = [wv @ np.concatenate([d0[j], h1[e]]) + bv
                    for e, (_, dj) in enumerate(edges) if dj == j]
            d1[j] = np.mean(msgs, axis=0)
        for e in range(4):
            assert np.allclose(state.edge_layers[1][e], h1[e], atol=1e-12)
        for i in range(2):
            assert np.allclose(state.traj_layers[1][i], t1[i], atol=1e-12)
        for j in range(2):
            assert np.allclose(state.det_layers[1][j], d1[j], atol=1e-12)

    def test_empty_neighborhood_keeps_embedding(self):
        # Detection 1 has its only candidate stolen by a conclusive pick,
        # leaving it edgeless; its embedding must persist across rounds.
        model = create_model(4, d_node=8, d_edge=8, rounds=2, seed=4)
        trajs = [make_traj(1, BoundingBox(0, 0, 10, 20), unit_vec(4, 0))]
        dets = [
            make_det(BoundingBox(1, 0, 10, 20), unit_vec(4, 0), gt_id=1),
            make_det(BoundingBox(300, 0, 10, 20), unit_vec(4, 2), gt_id=2),
        ]
        g = build_graph(trajs, dets, k_neighbors=5, ratio_variant="app", alpha=0.3)
        assert g.n_edges == 1
        state = propagate(model, encode(model, g))
        assert np.array_equal(state.det_layers[0][1], state.det_layers[-1][1])

    def test_sum_aggregation_runs(self):
        model = create_model(6, rounds=2, aggregation="sum", seed=6)
        g = grid_graph(3, 3)
        probs, _ = mpn_forward(model, g)
        assert probs.shape == (g.n_edges,)


class TestClassify:
    def test_zero_classifier_gives_half(self):
        model = create_model(6, seed=7)
        for p in model.classifier.params():
            p[...] = 0.0
        g = grid_graph(3, 3)
        probs, _ = mpn_forward(model, g)
        assert np.array_equal(probs, np.full(g.n_edges, 0.5))

    def test_edge_storage_order_invariance(self):
        model = create_model(6, rounds=3, seed=8)
        g = grid_graph(3, 4)
        probs, _ = mpn_forward(model, g)
        rng = np.random.default_rng(0)
        perm = rng.permutation(g.n_edges)
        shuffled = AssocGraph(
            g.trajectories, g.detections, g.traj_boxes,
            g.edge_traj[perm], g.edge_det[perm],
            edge_features=g.edge_features[perm], n_candidates=g.n_candidates,
        )
        probs_shuffled, _ = mpn_forward(model, shuffled)
        assert np.allclose(probs_shuffled, probs[perm], atol=1e-10)

    def test_node_relabeling_equivariance(self):
        model = create_model(6, rounds=3, seed=9)
        g = grid_graph(4, 4)
        probs, _ = mpn_forward(model, g)
        scores = {(g.trajectories[i].id, g.detections[j].gt_id): p
                  for i, j, p in zip(g.edge_traj, g.edge_det, probs)}
        pt = [2, 0, 3, 1]
        pd = [1, 3, 0, 2]
        trajs2 = [g.trajectories[i] for i in pt]
        dets2 = [g.detections[j] for j in pd]
        g2 = build_graph(trajs2, dets2, k_neighbors=20, ratio_variant="none")
        probs2, _ = mpn_forward(model, g2)
        scores2 = {(g2.trajectories[i].id, g2.detections[j].gt_id): p
                   for i, j, p in zip(g2.edge_traj, g2.edge_det, probs2)}
        assert scores.keys() == scores2.keys()
        for key in scores:
            assert scores2[key] == pytest.approx(scores[key], abs=1e-10)

    def test_bipartite_separation_without_edge_channel(self):
        # Killing the edge update output removes the only path between
        # trajectories: another trajectory's input must not matter.
        model = create_model(4, d_node=8, d_edge=8, rounds=3, seed=10)
        model.edge_update.weights[-1][...] = 0.0
        model.edge_update.biases[-1][...] = 0.0
        g1 = grid_graph(3, 3, dim=4, seed=11)
        state1 = propagate(model, encode(model, g1))
        g1.trajectories[2].integrated_feature = unit_vec(4, 3)
        state2 = propagate(model, encode(model, g1))
        assert np.allclose(state1.traj_layers[-1][0], state2.traj_layers[-1][0], atol=1e-12)
        assert np.allclose(state1.traj_layers[-1][1], state2.traj_layers[-1][1], atol=1e-12)


class TestGradients:
    def test_full_loss_matches_finite_differences(self):
        model = create_model(6, d_node=8, d_edge=8, rounds=4, seed=12)
        g = grid_graph(3, 3, dim=6, seed=13)
        labels = np.array(
            [1.0 if g.detections[j].gt_id == g.trajectories[i].id else 0.0
             for i, j in zip(g.edge_traj, g.edge_det)]
        )
        omega = 2.0

        def loss():
            probs, _ = mpn_forward(model, g)
            return float(weighted_bce(probs, labels, omega)[0].mean())

        probs, state = mpn_forward(model, g)
        _, dp = weighted_bce(probs, labels, omega)
        dlogits = dp * probs * (1.0 - probs) / labels.size
        grads, _ = mpn_backward(model, state, dlogits)
        report = grad_check(loss, model.param_arrays(), grads)
        assert report.passed, (report.max_rel_error, report.worst_param, report.worst_coord)

    def test_gradients_with_empty_neighborhood(self):
        # Ratio filtering can strand a detection without edges; its
        # pass-through embedding path must backpropagate correctly too.
        model = create_model(4, d_node=6, d_edge=6, rounds=3, seed=22)
        trajs = [make_traj(1, BoundingBox(0, 0, 10, 20), unit_vec(4, 0))]
        dets = [
            make_det(BoundingBox(1, 0, 10, 20), unit_vec(4, 0), gt_id=1),
            make_det(BoundingBox(300, 0, 10, 20), unit_vec(4, 2), gt_id=2),
        ]
        g = build_graph(trajs, dets, k_neighbors=5, ratio_variant="app", alpha=0.3)
        assert g.n_edges == 1 and len(g.detections) == 2
        labels = np.array([1.0])

        def loss():
            probs, _ = mpn_forward(model, g)
            return float(weighted_bce(probs, labels, 1.5)[0].mean())

        probs, state = mpn_forward(model, g)
        _, dp = weighted_bce(probs, labels, 1.5)
        dlogits = dp * probs * (1.0 - probs) / labels.size
        grads, _ = mpn_backward(model, state, dlogits)
        report = grad_check(loss, model.param_arrays(), grads)
        assert report.passed, report.max_rel_error


class TestTraining:
    def test_initial_loss_is_log_two_with_zero_classifier(self):
        model = create_model(6, seed=14)
        for p in model.classifier.params():
            p[...] = 0.0
        g = grid_graph(3, 3, seed=15)
        labels = np.array([1.0, 0.0] * (g.n_edges // 2) + [1.0] * (g.n_edges % 2))
        probs, _ = mpn_forward(model, g)
        loss = weighted_bce(probs, labels, 1.0)[0].mean()
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_separable_toy_converges(self):
        # A 30-frame toy gives only ~4 batches per epoch, so hold the
        # learning rate flat instead of decaying it mid-run.
        scene = generate(preset("easy", seed=21, n_frames=30))
        model = create_model(scene.config.feature_dim, d_node=16, d_edge=16, seed=16)
        cfg = TrainConfig(epochs=25, seed=1, node_dropout=0.05, lr=0.005, lr_decay_every=25)
        history = train_model(model, [scene.frames], cfg)
        assert len(history) == 25
        assert history[-1]["loss"] < 0.1
        # Held-out scene: true edges must outscore false ones on average.
        held_out = generate(preset("easy", seed=22, n_frames=20))
        frames = sorted(held_out.frames)
        true_p, false_p = [], []
        for prev_f, cur_f in zip(frames, frames[1:]):
            trajs = [
                make_traj(d.gt_id, d.box, d.feature, last_seen=prev_f)
                for d in held_out.frames[prev_f]
                if d.gt_id is not None
            ]
            dets = held_out.frames[cur_f]
            g = build_graph(trajs, dets, k_neighbors=20)
            if g is None:
                continue
            probs, _ = mpn_forward(model, g)
            for i, j, p in zip(g.edge_traj, g.edge_det, probs):
                target = true_p if g.detections[j].gt_id == g.trajectories[i].id else false_p
                target.append(p)
        assert np.mean(true_p) > np.mean(false_p) + 0.2

    def test_training_without_labels_errors(self):
        scene = generate(preset("easy", seed=23, n_frames=10))
        stripped = {
            f: [Detection(d.frame, d.box, d.confidence, d.feature, None) for d in dets]
            for f, dets in scene.frames.items()
        }
        model = create_model(scene.config.feature_dim, seed=17)
        with pytest.raises(ValueError):
            train_model(model, [stripped], TrainConfig(epochs=1, seed=0))

    def test_lstm_mode_trains_the_cell(self):
        scene = generate(preset("easy", seed=24, n_frames=15))
        model = create_model(scene.config.feature_dim, d_node=8, d_edge=8, seed=18)
        before = [p.copy() for p in model.lstm.params()]
        history = train_model(
            model, [scene.frames], TrainConfig(epochs=2, seed=2), integration="lstm"
        )
        assert all(math.isfinite(row["loss"]) for row in history)
        assert any(
            not np.array_equal(b, p) for b, p in zip(before, model.lstm.params())
        )

    def test_step_counter_resumes(self):
        scene = generate(preset("easy", seed=25, n_frames=12))
        model = create_model(scene.config.feature_dim, d_node=8, d_edge=8, seed=19)
        train_model(model, [scene.frames], TrainConfig(epochs=1, seed=3))
        first = model.step_count
        assert first > 0
        train_model(model, [scene.frames], TrainConfig(epochs=1, seed=4))
        assert model.step_count > first


class TestCheckpointRoundTrip:
    def test_save_load_forward_identical(self, tmp_path):
        model = create_model(6, rounds=3, seed=20)
        model.step_count = 17
        g = grid_graph(3, 3, seed=26)
        probs, _ = mpn_forward(model, g)
        path = tmp_path / "model.npz"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.step_count == 17
        assert loaded.rounds == 3
        for p1, p2 in zip(model.param_arrays(), loaded.param_arrays()):
            assert np.array_equal(p1, p2)
            assert p1.tobytes() == p2.tobytes()
        probs2, _ = mpn_forward(loaded, g)
        assert np.array_equal(probs, probs2)

    def test_shared_node_update(self):
        # One shared node-update function serves both sides: perturbing it
        # moves trajectory and detection embeddings alike.
        model = create_model(4, d_node=8, d_edge=8, rounds=1, seed=21)
        g = grid_graph(2, 2, dim=4, seed=27)
        state_a = propagate(model, encode(model, g))
        model.node_update.biases[-1][...] += 1.0
        state_b = propagate(model, encode(model, g))
        assert not np.allclose(state_a.traj_layers[-1], state_b.traj_layers[-1])
        assert not np.allclose(state_a.det_layers[-1], state_b.det_layers[-1])
