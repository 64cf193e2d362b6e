"""Two-layer mean-aggregator node embedder with a link scoring head.

Each layer maps the concatenation of a node's previous representation and
the mean representation of a sampled neighbor set through an affine map;
layer one applies a ReLU, layer two scales to unit norm. A candidate pair
is scored by the inner product of the two embeddings, pushed through an
affine-plus-sigmoid head. Training minimizes binary cross-entropy with
hand-rolled backpropagation and per-parameter adaptive (Adam) steps, so
gradients can be verified against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NumericError
from .graph import TransitionGraph

PARAM_NAMES = ("w1", "b1", "w2", "b2", "head")


PAIR_MODES = ("dot", "elementwise")


@dataclass
class LinkModel:
    """Embedder weights plus the link head.

    With pair_mode "dot" the head is (scale, offset) on the scalar inner
    product of the two embeddings. With "elementwise" the head is a weight
    per embedding dimension plus an offset, applied to the elementwise
    product, which generalizes the dot score (all-ones weights recover it).
    """

    w1: np.ndarray       # (h1, 2F)
    b1: np.ndarray       # (h1,)
    w2: np.ndarray       # (h2, 2*h1)
    b2: np.ndarray       # (h2,)
    head: np.ndarray     # (2,) for "dot"; (h2 + 1,) for "elementwise"
    pair_mode: str = "dot"

    @property
    def n_features(self) -> int:
        return self.w1.shape[1] // 2

    @property
    def widths(self) -> tuple[int, int]:
        return self.w1.shape[0], self.w2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "LinkModel":
        arrays = {k: v.copy() for k, v in self.params().items()}
        return LinkModel(pair_mode=self.pair_mode, **arrays)


def init_model(
    n_features: int,
    widths: tuple[int, int] = (32, 32),
    seed: int = 0,
    pair_mode: str = "dot",
) -> LinkModel:
    if pair_mode not in PAIR_MODES:
        raise ValueError(f"pair_mode must be one of {PAIR_MODES}, got {pair_mode!r}")
    rng = np.random.default_rng(seed)
    h1, h2 = widths
    if pair_mode == "dot":
        head = np.array([1.0, 0.0])
    else:
        head = np.concatenate([np.ones(h2), [0.0]])
    return LinkModel(
        w1=rng.normal(0.0, np.sqrt(2.0 / (2 * n_features)), size=(h1, 2 * n_features)),
        b1=np.zeros(h1),
        w2=rng.normal(0.0, np.sqrt(1.0 / (2 * h1)), size=(h2, 2 * h1)),
        b2=np.zeros(h2),
        head=head,
        pair_mode=pair_mode,
    )


def get_param_vector(model: LinkModel) -> np.ndarray:
    return np.concatenate([model.params()[n].ravel() for n in PARAM_NAMES])


def set_param_vector(model: LinkModel, vec: np.ndarray) -> None:
    offset = 0
    for name in PARAM_NAMES:
        arr = getattr(model, name)
        size = arr.size
        arr[...] = vec[offset : offset + size].reshape(arr.shape)
        offset += size


@dataclass
class BatchStructure:
    """Fixed neighbor sample for one batch of candidate pairs.

    ``l1_nodes`` lists every node needing a layer-1 representation (the
    pair endpoints followed by their sampled neighbors). Children are the
    sampled second-hop neighbors feeding each layer-1 mean.
    """

    l1_nodes: np.ndarray       # raw node ids
    child_idx: np.ndarray      # raw node ids, concatenated per l1 node
    child_seg: np.ndarray      # l1 row per child entry
    child_counts: np.ndarray   # children per l1 row
    l2_pos: np.ndarray         # l1 row of each layer-2 node (pair endpoints)
    neigh_idx: np.ndarray      # l1 rows, concatenated per l2 node
    neigh_seg: np.ndarray      # l2 row per neighbor entry
    neigh_counts: np.ndarray   # neighbors per l2 row
    pair_u: np.ndarray         # l2 row of each pair's first endpoint
    pair_v: np.ndarray


def _sample_neighbors(
    graph: TransitionGraph,
    node: int,
    size: int | None,
    rng: np.random.Generator | None,
) -> np.ndarray:
    adj = graph.adjacency[node]
    if size is None or rng is None or len(adj) <= size:
        return adj
    return rng.choice(adj, size=size, replace=False)


def build_batch_structure(
    graph: TransitionGraph,
    pairs: np.ndarray,
    num_samples: tuple[int, int] | None = None,
    rng: np.random.Generator | None = None,
) -> BatchStructure:
    """Resolve the two-hop neighbor sample needed to embed the given pairs.

    With ``num_samples`` None (or no rng) full neighborhoods are used and
    the structure is deterministic.
    """
    s1 = num_samples[0] if num_samples else None
    s2 = num_samples[1] if num_samples else None

    l2_ids: list[int] = []
    l2_map: dict[int, int] = {}
    for u, v in pairs:
        for w in (int(u), int(v)):
            if w not in l2_map:
                l2_map[w] = len(l2_ids)
                l2_ids.append(w)
    pair_u = np.array([l2_map[int(u)] for u, _ in pairs], dtype=np.int64)
    pair_v = np.array([l2_map[int(v)] for _, v in pairs], dtype=np.int64)

    hop1 = [_sample_neighbors(graph, w, s1, rng) for w in l2_ids]

    l1_ids: list[int] = []
    l1_map: dict[int, int] = {}

    def l1_row(w: int) -> int:
        if w not in l1_map:
            l1_map[w] = len(l1_ids)
            l1_ids.append(w)
        return l1_map[w]

    l2_pos = np.array([l1_row(w) for w in l2_ids], dtype=np.int64)
    neigh_idx_parts: list[int] = []
    neigh_seg_parts: list[int] = []
    for row, ns in enumerate(hop1):
        for w in ns:
            neigh_idx_parts.append(l1_row(int(w)))
            neigh_seg_parts.append(row)
    neigh_counts = np.array([len(ns) for ns in hop1], dtype=np.int64)

    child_idx_parts: list[int] = []
    child_seg_parts: list[int] = []
    child_counts = np.zeros(len(l1_ids), dtype=np.int64)
    for row, w in enumerate(l1_ids):
        children = _sample_neighbors(graph, w, s2, rng)
        child_counts[row] = len(children)
        child_idx_parts.extend(int(c) for c in children)
        child_seg_parts.extend([row] * len(children))

    return BatchStructure(
        l1_nodes=np.array(l1_ids, dtype=np.int64),
        child_idx=np.array(child_idx_parts, dtype=np.int64),
        child_seg=np.array(child_seg_parts, dtype=np.int64),
        child_counts=child_counts,
        l2_pos=l2_pos,
        neigh_idx=np.array(neigh_idx_parts, dtype=np.int64),
        neigh_seg=np.array(neigh_seg_parts, dtype=np.int64),
        neigh_counts=neigh_counts,
        pair_u=pair_u,
        pair_v=pair_v,
    )


def _segment_mean(values: np.ndarray, seg: np.ndarray, counts: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(counts), width))
    if len(seg):
        np.add.at(out, seg, values)
    have = counts > 0
    out[have] /= counts[have][:, None]
    return out


def _forward(model: LinkModel, features: np.ndarray, st: BatchStructure) -> dict:
    h1_width = model.w1.shape[0]
    x1 = features[st.l1_nodes]
    m1 = _segment_mean(features[st.child_idx], st.child_seg, st.child_counts, features.shape[1])
    c1 = np.hstack([x1, m1])
    a1 = c1 @ model.w1.T + model.b1
    h1 = np.maximum(a1, 0.0)

    h1_self = h1[st.l2_pos]
    m2 = _segment_mean(h1[st.neigh_idx], st.neigh_seg, st.neigh_counts, h1_width)
    c2 = np.hstack([h1_self, m2])
    a2 = c2 @ model.w2.T + model.b2
    r = np.linalg.norm(a2, axis=1)
    h2 = np.zeros_like(a2)
    pos = r > 0
    h2[pos] = a2[pos] / r[pos, None]

    prod = h2[st.pair_u] * h2[st.pair_v]
    if model.pair_mode == "dot":
        s = prod.sum(axis=1)
        logit = model.head[0] * s + model.head[1]
    else:
        s = prod @ model.head[:-1]
        logit = s + model.head[-1]
    return {
        "c1": c1, "a1": a1, "h1": h1, "c2": c2, "a2": a2, "r": r, "h2": h2,
        "prod": prod, "s": s, "logit": logit,
    }


def forward_probs(model: LinkModel, features: np.ndarray, st: BatchStructure) -> np.ndarray:
    return _sigmoid(_forward(model, features, st)["logit"])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grads(
    model: LinkModel,
    features: np.ndarray,
    st: BatchStructure,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean binary cross-entropy and its gradients for one batch."""
    f = _forward(model, features, st)
    z = f["logit"]
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    probs = _sigmoid(z)

    h1_width = model.w1.shape[0]
    n_pairs = len(z)
    dz = (probs - y) / n_pairs
    dh2 = np.zeros_like(f["h2"])
    if model.pair_mode == "dot":
        d_head = np.array([float(dz @ f["s"]), float(dz.sum())])
        ds = dz * model.head[0]
        np.add.at(dh2, st.pair_u, ds[:, None] * f["h2"][st.pair_v])
        np.add.at(dh2, st.pair_v, ds[:, None] * f["h2"][st.pair_u])
    else:
        w = model.head[:-1]
        d_head = np.concatenate([dz @ f["prod"], [dz.sum()]])
        np.add.at(dh2, st.pair_u, dz[:, None] * (w * f["h2"][st.pair_v]))
        np.add.at(dh2, st.pair_v, dz[:, None] * (w * f["h2"][st.pair_u]))

    da2 = np.zeros_like(dh2)
    pos = f["r"] > 0
    if np.any(pos):
        h2p = f["h2"][pos]
        proj = np.sum(dh2[pos] * h2p, axis=1, keepdims=True)
        da2[pos] = (dh2[pos] - proj * h2p) / f["r"][pos, None]

    d_w2 = da2.T @ f["c2"]
    d_b2 = da2.sum(axis=0)
    dc2 = da2 @ model.w2

    dh1 = np.zeros_like(f["h1"])
    np.add.at(dh1, st.l2_pos, dc2[:, :h1_width])
    if len(st.neigh_idx):
        dm2 = dc2[:, h1_width:]
        vals = dm2[st.neigh_seg] / st.neigh_counts[st.neigh_seg][:, None]
        np.add.at(dh1, st.neigh_idx, vals)

    da1 = dh1 * (f["a1"] > 0)
    d_w1 = da1.T @ f["c1"]
    d_b1 = da1.sum(axis=0)

    grads = {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "head": d_head}
    return loss, grads, probs


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3
    num_samples: tuple[int, int] = (20, 10)
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class _AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model: LinkModel) -> "_AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params().items()},
            v={k: np.zeros_like(p) for k, p in model.params().items()},
        )

    def update(self, model: LinkModel, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        for name, p in model.params().items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train(
    model: LinkModel,
    graph: TransitionGraph,
    features: np.ndarray,
    pairs: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig | None = None,
) -> tuple[LinkModel, list[float]]:
    """Mini-batch training; returns the trained model and per-epoch losses.

    Deterministic for a fixed config seed: the same rng drives example
    shuffling and neighbor sampling in a fixed order.
    """
    cfg = config or TrainConfig()
    if not np.all(np.isfinite(features)):
        raise NumericError("feature matrix contains non-finite values")
    rng = np.random.default_rng(cfg.seed)
    state = _AdamState.for_model(model)
    labels = np.asarray(labels, dtype=np.float64)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(pairs))
        total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            st = build_batch_structure(graph, pairs[sel], cfg.num_samples, rng)
            loss, grads, _ = loss_and_grads(model, features, st, labels[sel])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            state.update(model, grads, cfg)
            total += loss * len(sel)
        history.append(total / len(pairs))
    return model, history


def fit_head(scores: np.ndarray, labels: np.ndarray, epochs: int = 200, lr: float = 0.5) -> np.ndarray:
    """Logistic fit of the (scale, offset) head on frozen pair scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    head = np.array([1.0, 0.0])
    for _ in range(epochs):
        z = head[0] * s + head[1]
        dz = (_sigmoid(z) - y) / len(s)
        head -= lr * np.array([dz @ s, dz.sum()])
    return head


def embed_pair(
    model: LinkModel,
    graph: TransitionGraph,
    features: np.ndarray,
    pair: tuple[int, int],
    num_samples: tuple[int, int] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings of both endpoints; works for nodes unseen in training."""
    st = build_batch_structure(graph, np.array([pair], dtype=np.int64), num_samples, rng)
    h2 = _forward(model, features, st)["h2"]
    return h2[st.pair_u[0]].copy(), h2[st.pair_v[0]].copy()


def score_link(model: LinkModel, emb_h: np.ndarray, emb_k: np.ndarray) -> float:
    """Probability for one candidate pair from its two embeddings."""
    if model.pair_mode == "dot":
        logit = model.head[0] * float(np.dot(emb_h, emb_k)) + model.head[1]
    else:
        logit = float((emb_h * emb_k) @ model.head[:-1]) + model.head[-1]
    return float(_sigmoid(np.array([logit]))[0])


def predict_pairs(
    model: LinkModel,
    graph: TransitionGraph,
    features: np.ndarray,
    pairs: np.ndarray,
    batch_size: int = 4096,
) -> np.ndarray:
    """Deterministic probabilities using full neighborhoods."""
    out = np.empty(len(pairs))
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        st = build_batch_structure(graph, chunk, None, None)
        out[lo : lo + len(chunk)] = forward_probs(model, features, st)
    return out


@dataclass
class Checkpoint:
    """Self-describing model state: parameters, feature scaling, split, seed."""

    model: LinkModel
    num_samples: tuple[int, int]
    feature_means: np.ndarray
    feature_stds: np.ndarray
    station_order: list[str]
    with_clustering: bool
    master_seed: int
    config_hash: str
    calibrator_x: np.ndarray | None = None
    calibrator_y: np.ndarray | None = None
    test_pairs: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    val_pairs: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "format": "stationflow-link-model",
            "widths": list(self.model.widths),
            "n_features": self.model.n_features,
            "pair_mode": self.model.pair_mode,
            "params": {k: v.tolist() for k, v in self.model.params().items()},
            "num_samples": list(self.num_samples),
            "feature_means": arr(self.feature_means),
            "feature_stds": arr(self.feature_stds),
            "station_order": self.station_order,
            "with_clustering": self.with_clustering,
            "master_seed": self.master_seed,
            "config_hash": self.config_hash,
            "calibrator_x": arr(self.calibrator_x),
            "calibrator_y": arr(self.calibrator_y),
            "test_pairs": arr(self.test_pairs),
            "test_labels": arr(self.test_labels),
            "val_pairs": arr(self.val_pairs),
            "val_labels": arr(self.val_labels),
            "extra": self.extra,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Checkpoint":
        def arr(x, dtype=np.float64):
            return None if x is None else np.array(x, dtype=dtype)

        params = {k: np.array(v, dtype=np.float64) for k, v in d["params"].items()}
        return cls(
            model=LinkModel(pair_mode=d.get("pair_mode", "dot"), **params),
            num_samples=tuple(d["num_samples"]),
            feature_means=arr(d["feature_means"]),
            feature_stds=arr(d["feature_stds"]),
            station_order=list(d["station_order"]),
            with_clustering=bool(d["with_clustering"]),
            master_seed=int(d["master_seed"]),
            config_hash=d["config_hash"],
            calibrator_x=arr(d["calibrator_x"]),
            calibrator_y=arr(d["calibrator_y"]),
            test_pairs=arr(d["test_pairs"], np.int64),
            test_labels=arr(d["test_labels"]),
            val_pairs=arr(d["val_pairs"], np.int64),
            val_labels=arr(d["val_labels"]),
            extra=d.get("extra", {}),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))
