"""Message passing network over the association graph.

Node and edge encoders lift raw features into embedding space; L rounds of
propagation then alternate a node->edge update (every edge embedding is
recomputed from its endpoints and its previous value) with an edge->node
update (every node aggregates a per-edge message computed from the node
and the fresh edge embedding). Trajectory and detection embeddings are
updated separately so the graph stays bipartite, but both sides share the
same node-update parameters. A small classifier head turns final edge
embeddings into match probabilities.

Gradients are hand-derived reverse-mode, mirroring the forward pass layer
by layer; training minimizes a positive-weighted binary cross-entropy over
edges with teacher-forced trajectory features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox, Detection, Trajectory, max_overlap
from .graph import AssocGraph, build_graph
from .integration import integrate_average, integrate_iou_guided
from .motion import kf_init, kf_predict, kf_update, state_to_box
from .nn import AdamOptimizer, LstmCell, Mlp, sigmoid, weighted_bce
from .nn import load_checkpoint, save_checkpoint

AGGREGATIONS = ("mean", "sum")


@dataclass
class MpnModel:
    """Parameters of the encoders, propagation functions and classifier.

    node_update is shared between the trajectory-side and detection-side
    updates by construction. The LSTM cell backs the recurrent integration
    mode and rides along in every checkpoint; it only receives gradient
    when training runs with integration="lstm".
    """

    node_encoder: Mlp
    edge_encoder: Mlp
    edge_update: Mlp
    node_update: Mlp
    classifier: Mlp
    lstm: LstmCell
    rounds: int = 4
    aggregation: str = "mean"
    step_count: int = 0

    @property
    def feature_dim(self) -> int:
        return self.node_encoder.in_dim

    def components(self):
        return [
            ("node_encoder", self.node_encoder),
            ("edge_encoder", self.edge_encoder),
            ("edge_update", self.edge_update),
            ("node_update", self.node_update),
            ("classifier", self.classifier),
            ("lstm", self.lstm),
        ]

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for _, comp in self.components():
            out.extend(comp.params())
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.param_arrays()]


def create_model(
    feature_dim: int,
    *,
    d_node: int = 32,
    d_edge: int = 32,
    rounds: int = 4,
    aggregation: str = "mean",
    seed: int = 0,
) -> MpnModel:
    """Fresh model with two-layer ReLU MLPs throughout."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    rng = np.random.default_rng(seed)
    return MpnModel(
        node_encoder=Mlp([feature_dim, d_node, d_node], rng),
        edge_encoder=Mlp([6, d_edge, d_edge], rng),
        edge_update=Mlp([2 * d_node + d_edge, d_edge, d_edge], rng),
        node_update=Mlp([d_node + d_edge, d_node, d_node], rng),
        classifier=Mlp([d_edge, d_edge, 1], rng),
        lstm=LstmCell(feature_dim, feature_dim, rng),
        rounds=rounds,
        aggregation=aggregation,
    )


@dataclass
class _RoundCache:
    edge_cache: object
    traj_cache: object
    det_cache: object


@dataclass
class MpnState:
    """Per-layer embeddings plus the caches the backward pass needs."""

    graph: AssocGraph
    traj_layers: list[np.ndarray]
    det_layers: list[np.ndarray]
    edge_layers: list[np.ndarray]
    traj_counts: np.ndarray
    det_counts: np.ndarray
    encoder_caches: tuple | None = None
    round_caches: list[_RoundCache] = field(default_factory=list)
    classifier_cache: object = None
    logits: np.ndarray | None = None


def encode(model: MpnModel, graph: AssocGraph) -> MpnState:
    """Layer-0 embeddings from the node and edge encoders."""
    if graph.edge_features is None:
        raise ValueError("graph has no edge features; run init_edge_features first")
    traj_feats = np.array([t.integrated_feature for t in graph.trajectories])
    det_feats = np.array([d.feature for d in graph.detections])
    t0, t_cache = model.node_encoder.forward(traj_feats)
    d0, d_cache = model.node_encoder.forward(det_feats)
    h0, h_cache = model.edge_encoder.forward(graph.edge_features)
    return MpnState(
        graph=graph,
        traj_layers=[t0],
        det_layers=[d0],
        edge_layers=[h0],
        traj_counts=np.bincount(graph.edge_traj, minlength=len(graph.trajectories)),
        det_counts=np.bincount(graph.edge_det, minlength=len(graph.detections)),
        encoder_caches=(t_cache, d_cache, h_cache),
    )


def _aggregate(messages, index, counts, previous, aggregation):
    out = np.zeros_like(previous)
    np.add.at(out, index, messages)
    occupied = counts > 0
    if aggregation == "mean":
        out[occupied] /= counts[occupied, None]
    out[~occupied] = previous[~occupied]
    return out


def propagate(model: MpnModel, state: MpnState) -> MpnState:
    """Run the model's propagation rounds, extending the layer lists."""
    ti, dj = state.graph.edge_traj, state.graph.edge_det
    for _ in range(model.rounds):
        t_prev, d_prev, h_prev = state.traj_layers[-1], state.det_layers[-1], state.edge_layers[-1]
        e_in = np.concatenate([t_prev[ti], d_prev[dj], h_prev], axis=1)
        h_new, e_cache = model.edge_update.forward(e_in)
        x_in = np.concatenate([t_prev[ti], h_new], axis=1)
        x_msg, x_cache = model.node_update.forward(x_in)
        t_new = _aggregate(x_msg, ti, state.traj_counts, t_prev, model.aggregation)
        y_in = np.concatenate([d_prev[dj], h_new], axis=1)
        y_msg, y_cache = model.node_update.forward(y_in)
        d_new = _aggregate(y_msg, dj, state.det_counts, d_prev, model.aggregation)
        state.traj_layers.append(t_new)
        state.det_layers.append(d_new)
        state.edge_layers.append(h_new)
        state.round_caches.append(_RoundCache(e_cache, x_cache, y_cache))
    return state


def classify_edges(model: MpnModel, state: MpnState) -> np.ndarray:
    """Match probability per edge from the final edge embeddings."""
    logits, cache = model.classifier.forward(state.edge_layers[-1])
    state.classifier_cache = cache
    state.logits = logits[:, 0]
    return sigmoid(state.logits)


def mpn_forward(model: MpnModel, graph: AssocGraph) -> tuple[np.ndarray, MpnState]:
    state = encode(model, graph)
    propagate(model, state)
    probs = classify_edges(model, state)
    return probs, state


def score_graph(model: MpnModel, graph: AssocGraph) -> np.ndarray:
    """Inference-only edge scores."""
    return mpn_forward(model, graph)[0]


def _scatter_rows(target, index, rows):
    np.add.at(target, index, rows)


def mpn_backward(model: MpnModel, state: MpnState, dlogits: np.ndarray):
    """Reverse the full forward pass.

    dlogits is dLoss/dlogit per edge. Returns (grads, dtraj_features) where
    grads aligns with model.param_arrays() and dtraj_features is the
    gradient w.r.t. the trajectories' input appearance features (used to
    continue backprop into the recurrent integrator).
    """
    graph = state.graph
    ti, dj = graph.edge_traj, graph.edge_det
    dn = model.node_encoder.out_dim
    grads = {name: comp.zero_grads() for name, comp in model.components()}

    g_hl, cls_grads = model.classifier.backward(state.classifier_cache, dlogits[:, None])
    _acc(grads["classifier"], cls_grads)

    d_traj = np.zeros_like(state.traj_layers[-1])
    d_det = np.zeros_like(state.det_layers[-1])
    d_edge = g_hl
    for level in range(model.rounds, 0, -1):
        caches = state.round_caches[level - 1]
        t_prev = state.traj_layers[level - 1]
        d_prev = state.det_layers[level - 1]
        d_traj_prev = np.zeros_like(t_prev)
        d_det_prev = np.zeros_like(d_prev)

        # Aggregation adjoints; empty-neighborhood nodes pass straight through.
        t_occ = state.traj_counts > 0
        d_occ = state.det_counts > 0
        if model.aggregation == "mean":
            t_scale = np.where(t_occ, d_traj.T / np.maximum(state.traj_counts, 1), 0.0).T
            d_scale = np.where(d_occ, d_det.T / np.maximum(state.det_counts, 1), 0.0).T
        else:
            t_scale = np.where(t_occ[:, None], d_traj, 0.0)
            d_scale = np.where(d_occ[:, None], d_det, 0.0)
        d_traj_prev[~t_occ] = d_traj[~t_occ]
        d_det_prev[~d_occ] = d_det[~d_occ]

        gx_in, vx_grads = model.node_update.backward(caches.traj_cache, t_scale[ti])
        _acc(grads["node_update"], vx_grads)
        _scatter_rows(d_traj_prev, ti, gx_in[:, :dn])
        d_edge_total = d_edge + gx_in[:, dn:]

        gy_in, vy_grads = model.node_update.backward(caches.det_cache, d_scale[dj])
        _acc(grads["node_update"], vy_grads)
        _scatter_rows(d_det_prev, dj, gy_in[:, :dn])
        d_edge_total = d_edge_total + gy_in[:, dn:]

        ge_in, e_grads = model.edge_update.backward(caches.edge_cache, d_edge_total)
        _acc(grads["edge_update"], e_grads)
        _scatter_rows(d_traj_prev, ti, ge_in[:, :dn])
        _scatter_rows(d_det_prev, dj, ge_in[:, dn : 2 * dn])

        d_traj, d_det, d_edge = d_traj_prev, d_det_prev, ge_in[:, 2 * dn :]

    t_cache, d_cache, h_cache = state.encoder_caches
    d_traj_feats, nt_grads = model.node_encoder.backward(t_cache, d_traj)
    _acc(grads["node_encoder"], nt_grads)
    _, nd_grads = model.node_encoder.backward(d_cache, d_det)
    _acc(grads["node_encoder"], nd_grads)
    _, ee_grads = model.edge_encoder.backward(h_cache, d_edge)
    _acc(grads["edge_encoder"], ee_grads)

    flat = []
    for name, _ in model.components():
        flat.extend(grads[name])
    return flat, d_traj_feats


def _acc(into: list[np.ndarray], add: list[np.ndarray]) -> None:
    for a, b in zip(into, add):
        a += b


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    batch_graphs: int = 8
    frames_per_graph: int = 15
    epochs: int = 25
    lr: float = 1e-3
    lr_decay_every: int = 7
    lr_decay_factor: float = 0.1
    pos_weight: float | None = None  # None: negatives/positives per batch
    node_dropout: float = 0.1
    box_jitter: float = 0.05  # detection shift, fraction of box height
    frame_stride: int = 1
    seed: int = 0


@dataclass
class _LstmChain:
    """Step caches for one teacher-forced trajectory, for backprop."""

    caches: list
    h_norm: float
    feature: np.ndarray  # renormalized output = integrated feature


@dataclass
class _TrainGraph:
    graph: AssocGraph
    labels: np.ndarray
    lstm_chains: dict[int, _LstmChain]  # trajectory row -> chain


def _integrate_teacher(feat, lstm_state, det, frame_dets, mode, cell, caches):
    """One teacher-forced integration step; mirrors the tracker's update."""
    if mode == "none":
        return det.feature.copy(), lstm_state
    if mode == "average":
        return integrate_average(feat, det.feature), lstm_state
    if mode == "iou":
        others = [d for d in frame_dets if d is not det]
        return integrate_iou_guided(feat, det.feature, max_overlap(det, others)), lstm_state
    if mode == "lstm":
        state = cell.init_state() if lstm_state is None else lstm_state
        h, new_state, cache = cell.step(state, det.feature)
        caches.append(cache)
        norm = float(np.linalg.norm(h))
        if norm < 1e-12:
            return det.feature.copy(), new_state
        return h / norm, new_state
    raise ValueError(f"unknown integration mode {mode!r}")


def build_training_graph(
    frames: dict[int, list[Detection]],
    target_frame: int,
    window_frames: list[int],
    model: MpnModel,
    *,
    integration: str = "average",
    k_neighbors: int = 20,
    ratio_variant: str = "none",
    alpha: float | None = None,
    fps: float = 30.0,
    rng: np.random.Generator | None = None,
    node_dropout: float = 0.0,
    box_jitter: float = 0.0,
) -> _TrainGraph | None:
    """One training graph: teacher-forced trajectories vs. one frame's detections.

    Trajectories are assembled from the ground-truth identities seen in the
    window frames before the target frame, with features integrated along
    their own labeled detections (so training never depends on earlier
    matching decisions). Edge labels are identity equality.
    """
    detections = list(frames.get(target_frame, []))
    tracks: dict[int, list[Detection]] = {}
    for f in window_frames:
        if f >= target_frame:
            continue
        for det in frames.get(f, []):
            if det.gt_id is not None:
                tracks.setdefault(det.gt_id, []).append(det)
    if rng is not None and node_dropout > 0.0:
        detections = [d for d in detections if rng.random() >= node_dropout]
        tracks = {g: dets for g, dets in tracks.items() if rng.random() >= node_dropout}
    if rng is not None and box_jitter > 0.0:
        jittered = []
        for det in detections:
            b = det.box
            dx, dy = rng.normal(0.0, box_jitter * b.h, size=2)
            jittered.append(
                Detection(det.frame, BoundingBox(b.x + dx, b.y + dy, b.w, b.h),
                          det.confidence, det.feature, det.gt_id)
            )
        detections = jittered
    if not detections or not tracks:
        return None

    trajectories: list[Trajectory] = []
    chains: dict[int, _LstmChain] = {}
    for gid in sorted(tracks):
        dets = sorted(tracks[gid], key=lambda d: d.frame)
        first = dets[0]
        feat = first.feature.copy()
        lstm_state = None
        caches: list = []
        kf = kf_init(first.box)
        last_frame = first.frame
        for det in dets[1:]:
            for _ in range(det.frame - last_frame):
                kf = kf_predict(kf)
            kf = kf_update(kf, det.box)
            feat, lstm_state = _integrate_teacher(
                feat, lstm_state, det, frames.get(det.frame, []), integration,
                model.lstm, caches,
            )
            last_frame = det.frame
        for _ in range(target_frame - last_frame):
            kf = kf_predict(kf)
        traj = Trajectory(
            id=gid,
            integrated_feature=feat,
            last_box=dets[-1].box,
            last_seen_frame=last_frame,
            motion=kf,
            frames_lost=target_frame - last_frame - 1,
        )
        if integration == "lstm" and caches:
            h_norm = float(np.linalg.norm(caches[-1].c_tanh * caches[-1].o))
            chains[len(trajectories)] = _LstmChain(caches, h_norm, feat)
        trajectories.append(traj)

    traj_boxes = np.array([state_to_box(t.motion).as_xywh() for t in trajectories])
    graph = build_graph(
        trajectories,
        detections,
        k_neighbors=k_neighbors,
        ratio_variant=ratio_variant,
        alpha=alpha,
        fps=fps,
        traj_boxes=traj_boxes,
    )
    if graph is None or graph.n_edges == 0:
        return None
    labels = np.array(
        [
            1.0 if graph.detections[j].gt_id == graph.trajectories[i].id else 0.0
            for i, j in zip(graph.edge_traj, graph.edge_det)
        ]
    )
    return _TrainGraph(graph, labels, chains)


def _backprop_lstm_chains(model, chains, d_traj_feats, grads_flat):
    """Continue gradients from trajectory input features into the LSTM."""
    if not chains:
        return
    lstm_offset = sum(len(comp.params()) for name, comp in model.components() if name != "lstm")
    lstm_grads = grads_flat[lstm_offset : lstm_offset + 3]
    for row, chain in chains.items():
        if chain.h_norm < 1e-12:
            continue
        df = d_traj_feats[row]
        # Through the renormalization F = h / |h|.
        dh = (df - chain.feature * float(chain.feature @ df)) / chain.h_norm
        dc = None
        for cache in reversed(chain.caches):
            _, dh, dc, step_grads = model.lstm.backward(cache, dh, dc)
            for g, s in zip(lstm_grads, step_grads):
                g += s
    return


def train_model(
    model: MpnModel,
    sequences: list[dict[int, list[Detection]]],
    cfg: TrainConfig,
    *,
    integration: str = "average",
    k_neighbors: int = 20,
    ratio_variant: str = "none",
    alpha: float | None = None,
    fps: float = 30.0,
) -> list[dict]:
    """Train in place; returns one telemetry row per epoch.

    Each sample pairs one target frame with trajectories teacher-forced
    from the preceding frames of its window. Batches average the weighted
    BCE over all edges; the positive weight defaults to the batch's
    negative/positive ratio.
    """
    if not any(
        det.gt_id is not None for seq in sequences for dets in seq.values() for det in dets
    ):
        raise ValueError("training requires ground-truth labels on the detections")
    samples = []
    for si, seq in enumerate(sequences):
        frames_sorted = sorted(seq)
        for t in frames_sorted:
            window = [
                f
                for f in frames_sorted
                if t - (cfg.frames_per_graph - 1) * cfg.frame_stride <= f < t
                and (t - f) % cfg.frame_stride == 0
            ]
            if seq.get(t) and any(
                det.gt_id is not None for f in window for det in seq.get(f, [])
            ):
                samples.append((si, t, window))
    if not samples:
        raise ValueError("no trainable samples in the given sequences")

    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(model.param_arrays())
    optimizer.step_count = model.step_count
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(samples))
        losses = []
        correct = 0
        seen = 0
        for start in range(0, len(order), cfg.batch_graphs):
            batch = []
            for oi in order[start : start + cfg.batch_graphs]:
                si, t, window = samples[oi]
                tg = build_training_graph(
                    sequences[si], t, window, model,
                    integration=integration, k_neighbors=k_neighbors,
                    ratio_variant=ratio_variant, alpha=alpha, fps=fps,
                    rng=rng, node_dropout=cfg.node_dropout, box_jitter=cfg.box_jitter,
                )
                if tg is not None:
                    batch.append(tg)
            if not batch:
                continue
            total_edges = sum(tg.labels.size for tg in batch)
            positives = sum(int(tg.labels.sum()) for tg in batch)
            if cfg.pos_weight is not None:
                omega = cfg.pos_weight
            elif positives > 0:
                omega = (total_edges - positives) / positives
            else:
                omega = 1.0
            if omega <= 0.0:  # all-positive batch
                omega = 1.0
            grads_total = model.zero_grads()
            batch_loss = 0.0
            for tg in batch:
                probs, state = mpn_forward(model, tg.graph)
                edge_losses, dp = weighted_bce(probs, tg.labels, omega)
                dlogits = dp * probs * (1.0 - probs) / total_edges
                flat, d_traj_feats = mpn_backward(model, state, dlogits)
                _backprop_lstm_chains(model, tg.lstm_chains, d_traj_feats, flat)
                for g_total, g in zip(grads_total, flat):
                    g_total += g
                batch_loss += float(edge_losses.sum())
                correct += int(((probs >= 0.5) == (tg.labels > 0.5)).sum())
                seen += tg.labels.size
            optimizer.step(grads_total, lr)
            losses.append(batch_loss / total_edges)
        model.step_count = optimizer.step_count
        history.append(
            {
                "epoch": epoch + 1,
                "lr": lr,
                "loss": float(np.mean(losses)) if losses else math.nan,
                "edge_accuracy": correct / seen if seen else math.nan,
            }
        )
    return history


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(path, model: MpnModel) -> None:
    arrays = {}
    sizes = {}
    for name, comp in model.components():
        if isinstance(comp, Mlp):
            sizes[name] = comp.layer_sizes
            for k, p in enumerate(comp.params()):
                arrays[f"{name}.{k}"] = p
        else:  # LstmCell
            sizes[name] = [comp.input_dim, comp.hidden_dim]
            for k, p in enumerate(comp.params()):
                arrays[f"{name}.{k}"] = p
    meta = {
        "layer_sizes": sizes,
        "rounds": model.rounds,
        "aggregation": model.aggregation,
        "step_count": model.step_count,
    }
    save_checkpoint(path, arrays, meta)


def load_model(path) -> MpnModel:
    arrays, meta = load_checkpoint(path)
    sizes = meta["layer_sizes"]
    rng = np.random.default_rng(0)
    parts = {}
    for name in ("node_encoder", "edge_encoder", "edge_update", "node_update", "classifier"):
        parts[name] = Mlp(sizes[name], rng)
    lstm = LstmCell(sizes["lstm"][0], sizes["lstm"][1], rng)
    model = MpnModel(
        node_encoder=parts["node_encoder"],
        edge_encoder=parts["edge_encoder"],
        edge_update=parts["edge_update"],
        node_update=parts["node_update"],
        classifier=parts["classifier"],
        lstm=lstm,
        rounds=int(meta["rounds"]),
        aggregation=meta["aggregation"],
        step_count=int(meta["step_count"]),
    )
    for name, comp in model.components():
        for k, p in enumerate(comp.params()):
            stored = arrays[f"{name}.{k}"]
            if stored.shape != p.shape:
                raise ValueError(f"checkpoint array {name}.{k} has shape {stored.shape}")
            p[...] = stored
    return model
