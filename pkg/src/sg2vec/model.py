"""Spatio-temporal scene-graph network.

Per frame: relational graph convolutions over one-hot node features, the
outputs of every layer concatenated, attention-scored top-k node pooling,
a graph readout, then an LSTM over the sequence of graph embeddings and a
linear head with log-softmax giving two class log-probabilities.

All frames of a clip are processed together as one disjoint graph; only the
recurrent part is sequential.
"""

import json
import re
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core_math as cm
from .scene_graph import DEFAULT_VOCAB, Relation, to_relation_tensors


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mrgcn_layers: int = 2
    mrgcn_dim: int = 64
    pooling: str = "sag"           # none | sag | topk
    pooling_ratio: float = 0.25
    readout: str = "add"           # add | mean | max
    temporal: str = "lstm"         # none | lstm
    lstm_hidden: int = 20
    mlp_out: int = 2
    dropout: float = 0.1
    history: str = "full"          # full | window<k>
    spatial: str = "mrgcn"         # mrgcn | mlp

    def __post_init__(self):
        if not 0.0 < self.pooling_ratio <= 1.0:
            raise ConfigurationError(f"pooling_ratio must be in (0, 1], got {self.pooling_ratio}")
        if self.mlp_out != 2:
            raise ConfigurationError("mlp_out must be 2")
        if self.pooling not in ("none", "sag", "topk"):
            raise ConfigurationError(f"unknown pooling {self.pooling!r}")
        if self.readout not in ("add", "mean", "max"):
            raise ConfigurationError(f"unknown readout {self.readout!r}")
        if self.temporal not in ("none", "lstm"):
            raise ConfigurationError(f"unknown temporal model {self.temporal!r}")
        if self.spatial not in ("mrgcn", "mlp"):
            raise ConfigurationError(f"unknown spatial model {self.spatial!r}")
        if self.mrgcn_layers < 0 or self.mrgcn_dim < 1 or self.lstm_hidden < 1:
            raise ConfigurationError("layer sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        self.window  # validates history

    @property
    def window(self):
        """History length in frames, or None for the full history."""
        if self.history == "full":
            return None
        m = re.fullmatch(r"window\(?(\d+)\)?", str(self.history))
        if not m or int(m.group(1)) < 1:
            raise ConfigurationError(f"history must be 'full' or 'window<k>' with k >= 1, "
                                     f"got {self.history!r}")
        return int(m.group(1))

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "default": {},
    "window5": {"history": "window5"},
    "620dash": {"mrgcn_layers": 1, "lstm_hidden": 100, "pooling": "none"},
}

# (spatial, pooling, temporal) rows of the ablation study
ABLATIONS = {
    "mlp": {"spatial": "mlp", "pooling": "none", "temporal": "none"},
    "mlp+lstm": {"spatial": "mlp", "pooling": "none", "temporal": "lstm"},
    "mrgcn": {"pooling": "none", "temporal": "none"},
    "mrgcn+lstm": {"pooling": "none", "temporal": "lstm"},
    "mrgcn+topk": {"pooling": "topk", "temporal": "none"},
    "mrgcn+sag": {"pooling": "sag", "temporal": "none"},
    "mrgcn+topk+lstm": {"pooling": "topk", "temporal": "lstm"},
    "mrgcn+sag+lstm": {"pooling": "sag", "temporal": "lstm"},
}


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------

def embedding_width(config, vocab_size):
    return vocab_size + config.mrgcn_layers * config.mrgcn_dim


def param_shapes(config, vocab_size):
    shapes = {}
    d_in = vocab_size
    for layer in range(config.mrgcn_layers):
        shapes[f"mrgcn.{layer}.self"] = (d_in, config.mrgcn_dim)
        if config.spatial == "mrgcn":
            for rel in Relation:
                shapes[f"mrgcn.{layer}.{rel.label}"] = (d_in, config.mrgcn_dim)
        d_in = config.mrgcn_dim
    width = embedding_width(config, vocab_size)
    if config.pooling == "sag":
        shapes["pool.self"] = (width, 1)
        shapes["pool.neighbor"] = (width, 1)
        shapes["pool.bias"] = (1, 1)
    elif config.pooling == "topk":
        shapes["pool.proj"] = (width, 1)
    head_in = width
    if config.temporal == "lstm":
        h = config.lstm_hidden
        shapes["lstm.w_input"] = (width, 4 * h)
        shapes["lstm.w_hidden"] = (h, 4 * h)
        shapes["lstm.bias"] = (1, 4 * h)
        head_in = h
    shapes["head.weight"] = (head_in, config.mlp_out)
    shapes["head.bias"] = (1, config.mlp_out)
    return shapes


class ModelParams:
    """Named parameter arrays backed by a single flat float64 buffer."""

    def __init__(self, shapes, flat=None):
        self.shapes = dict(shapes)
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        total = sum(sizes)
        self.flat = np.zeros(total) if flat is None else np.asarray(flat, dtype=np.float64)
        if self.flat.shape != (total,):
            raise ConfigurationError(f"expected {total} parameter values, got {self.flat.shape}")
        self.slices = {}
        self.arrays = {}
        offset = 0
        for (name, shape), size in zip(self.shapes.items(), sizes):
            self.slices[name] = slice(offset, offset + size)
            self.arrays[name] = self.flat[offset:offset + size].reshape(shape)
            offset += size

    def __len__(self):
        return self.flat.size

    def __getitem__(self, name):
        return self.arrays[name]

    def tensors(self):
        return {name: cm.param(arr, name) for name, arr in self.arrays.items()}

    def flatten_grads(self, grads):
        out = np.zeros_like(self.flat)
        for name, g in grads.items():
            out[self.slices[name]] = g.reshape(-1)
        return out

    def copy(self):
        return ModelParams(self.shapes, self.flat.copy())


def init_params(config, vocab_size, rng):
    params = ModelParams(param_shapes(config, vocab_size))
    for name, arr in params.arrays.items():
        if name.endswith("bias"):
            continue
        arr[...] = cm.glorot(rng, *arr.shape)
    if config.temporal == "lstm":
        h = config.lstm_hidden
        params["lstm.bias"][0, h:2 * h] = 1.0
    return params


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------

def mrgcn_layer(node_embs, graph, layer_params, activate=True):
    """One relational convolution: self transform plus, for each relation,
    the mean of the transformed in-neighbour embeddings.

    ``layer_params`` maps ``"self"`` and relation labels (or ``Relation``
    members) to weight Tensors. Relations absent from ``layer_params`` must
    not occur in ``graph``.
    """
    weights = {}
    for rel in graph.plan.relations:
        key = Relation(rel).label
        w = layer_params.get(key, layer_params.get(Relation(rel)))
        if w is None:
            raise ConfigurationError(f"no weights for relation {key}")
        weights[rel] = w
    out = cm.relational_conv(node_embs, layer_params["self"], weights, graph.plan)
    return cm.relu(out) if activate else out


def concat_layers(layers):
    return cm.concat_cols(layers)


def readout(x, kind="add", segments=None, n_segments=1):
    if x.value.shape[0] == 0:
        raise cm.ContractError("readout of an empty graph")
    if segments is None:
        segments = np.zeros(x.value.shape[0], dtype=np.intp)
    return cm.segment_reduce(x, segments, n_segments, kind)


def keep_count(n, ratio):
    """``ceil(ratio * n)``, at least 1; rounding guards e.g. 0.1 * 30."""
    return np.maximum(1, np.ceil(np.round(ratio * np.asarray(n), 9))).astype(np.intp)


def select_top_k(scores, segments, n_segments, ratio):
    """Sorted indices of the ``ceil(ratio * n)`` best-scoring nodes of each
    segment; ties go to the lower index. ``segments`` must be sorted."""
    n = len(scores)
    starts = np.searchsorted(segments, np.arange(n_segments))
    counts = np.diff(np.append(starts, n))
    order = np.lexsort((np.arange(n), -scores, segments))
    rank = np.arange(n) - starts[segments[order]]
    keep = rank < keep_count(counts, ratio)[segments[order]]
    return np.sort(order[keep])


def attention_scores(x, graph, tensors, config):
    if config.pooling == "sag":
        conv = cm.relational_conv(x, tensors["pool.self"], {0: tensors["pool.neighbor"]},
                                  graph.union_plan)
        return cm.tanh(cm.add(conv, tensors["pool.bias"]))
    return cm.tanh(cm.matmul(x, tensors["pool.proj"]))


@dataclass
class PoolResult:
    x_pool: object          # Tensor, kept rows gated by their score
    kept: np.ndarray
    alpha: np.ndarray       # scores of all nodes
    segments: np.ndarray    # frame of every kept row


def pool_nodes(x, graph, tensors, config):
    if config.pooling == "none":
        return PoolResult(x, np.arange(graph.n_nodes), np.ones(graph.n_nodes), graph.segments)
    alpha = attention_scores(x, graph, tensors, config)
    kept = select_top_k(alpha.value[:, 0], graph.segments, graph.n_frames, config.pooling_ratio)
    gated = cm.mul(cm.gather_rows(x, kept), cm.gather_rows(alpha, kept))
    return PoolResult(gated, kept, alpha.value[:, 0].copy(), graph.segments[kept])


def sag_pool(x_prop, graph, score_params, ratio):
    """Self-attention pooling of a single graph.

    Returns ``(x_pool, (src, dst, rel) of the induced subgraph, kept,
    alpha)``; induced edges are re-indexed to positions in ``kept``.
    """
    config = ModelConfig(pooling="sag", pooling_ratio=ratio)
    x = cm.constant(x_prop)
    tensors = {k: cm.constant(v) for k, v in score_params.items()}
    res = pool_nodes(x, graph, tensors, config)
    pos = np.full(graph.n_nodes, -1)
    pos[res.kept] = np.arange(len(res.kept))
    mask = (pos[graph.src] >= 0) & (pos[graph.dst] >= 0)
    induced = (pos[graph.src[mask]], pos[graph.dst[mask]], graph.rel[mask])
    return res.x_pool.value, induced, res.kept, res.alpha


def lstm_step(h_graph, state, tensors_or_arrays):
    """Single LSTM step in plain numpy: returns ``(z, (h, c))``."""
    p = {k: getattr(v, "value", v) for k, v in tensors_or_arrays.items()}
    wx, wh, b = p["lstm.w_input"], p["lstm.w_hidden"], p["lstm.bias"].reshape(-1)
    hidden = wh.shape[0]
    if state is None:
        state = (np.zeros(hidden), np.zeros(hidden))
    h, c = state
    if h.shape != (hidden,) or c.shape != (hidden,):
        raise cm.DimensionError(f"LSTM state {h.shape}/{c.shape} does not match hidden size {hidden}")
    a = cm.row_matmul(np.asarray(h_graph).reshape(1, -1), wx)[0] + b + cm.row_matmul(h.reshape(1, -1), wh)[0]
    H = hidden
    i = cm._stable_sigmoid(a[:H])
    f = cm._stable_sigmoid(a[H:2 * H])
    g = np.tanh(a[2 * H:3 * H])
    o = cm._stable_sigmoid(a[3 * H:])
    c = f * c + i * g
    h = o * np.tanh(c)
    return h, (h, c)


def predict_frame(z, tensors):
    logits = cm.linear(z, tensors["head.weight"], tensors["head.bias"])
    log_probs = cm.log_softmax_rows(logits)
    return log_probs, decide(log_probs.value)


def decide(log_probs):
    # ties resolve to class 0
    return (log_probs[:, 1] > log_probs[:, 0]).astype(np.int64)


# ----------------------------------------------------------------------
# clip forward
# ----------------------------------------------------------------------

@dataclass
class PredictionTrace:
    log_probs: np.ndarray          # frames x 2
    decisions: np.ndarray          # frames
    kept: list = field(default_factory=list)
    alpha: np.ndarray = None

    @property
    def collision_prob(self):
        return np.exp(self.log_probs[:, 1])

    def __len__(self):
        return len(self.decisions)


@dataclass
class ForwardResult:
    trace: PredictionTrace
    loss: object = None            # 1x1 Tensor when labels were given
    frame_losses: np.ndarray = None


def spatial_embeddings(graph, tensors, config, training=False, rng=None):
    """Node embeddings with every layer's output concatenated (one-hot first)."""
    h = cm.constant(graph.one_hot)
    layers = [h]
    for layer in range(config.mrgcn_layers):
        lp = {"self": tensors[f"mrgcn.{layer}.self"]}
        if config.spatial == "mrgcn":
            for rel in Relation:
                lp[rel.label] = tensors[f"mrgcn.{layer}.{rel.label}"]
            h = mrgcn_layer(h, graph, lp)
        else:
            h = cm.relu(cm.matmul(h, lp["self"]))
        if training and config.dropout > 0:
            h = cm.dropout(h, config.dropout, rng)
        layers.append(h)
    return concat_layers(layers) if len(layers) > 1 else layers[0]


def graph_embeddings(graph, tensors, config, training=False, rng=None):
    """Per-frame graph embeddings, one row per frame."""
    x = spatial_embeddings(graph, tensors, config, training, rng)
    pooled = pool_nodes(x, graph, tensors, config)
    h_graph = readout(pooled.x_pool, config.readout, pooled.segments, graph.n_frames)
    return h_graph, pooled


def temporal_embeddings(h_graph, tensors, config):
    if config.temporal == "none":
        return h_graph
    wx, wh, b = tensors["lstm.w_input"], tensors["lstm.w_hidden"], tensors["lstm.bias"]
    k = config.window
    if k is None:
        return cm.lstm_sequence(h_graph, wx, wh, b)
    n = h_graph.value.shape[0]
    rows = []
    for t in range(n):
        lo = max(0, t - k + 1)
        window = cm.gather_rows(h_graph, np.arange(lo, t + 1))
        out = cm.lstm_sequence(window, wx, wh, b)
        rows.append(cm.gather_rows(out, [t - lo]))
    return cm.concat_rows(rows)


def clip_forward(graph, params, config, mode="eval", labels=None, class_weights=None,
                 rng=None, tensors=None):
    """Run the network over every frame of one clip.

    ``graph`` is the stacked :class:`GraphTensors` of the clip (or a list of
    scene graphs). ``labels`` is a clip label or per-frame labels; when
    given, the result carries the mean (optionally class-weighted)
    per-frame negative log-likelihood.
    """
    if not hasattr(graph, "one_hot"):
        graph = to_relation_tensors(graph)
    if graph.n_frames < 1:
        raise cm.ContractError("clip has no frames")
    training = mode == "train"
    if training and config.dropout > 0 and rng is None:
        raise cm.ContractError("training with dropout needs an rng")
    if tensors is None:
        tensors = params.tensors() if hasattr(params, "tensors") else params
    h_graph, pooled = graph_embeddings(graph, tensors, config, training, rng)
    z = temporal_embeddings(h_graph, tensors, config)
    if training and config.temporal == "lstm" and config.dropout > 0:
        z = cm.dropout(z, config.dropout, rng)
    log_probs, decisions = predict_frame(z, tensors)
    trace = PredictionTrace(log_probs.value, decisions, alpha=pooled.alpha)
    if config.pooling != "none":
        trace.kept = [pooled.kept[pooled.segments == t] for t in range(graph.n_frames)]
    if labels is None:
        return ForwardResult(trace)
    targets = np.broadcast_to(np.asarray(labels, dtype=np.intp), (graph.n_frames,))
    if training and len(np.unique(targets)) != 1:
        raise cm.ContractError("every frame of a training clip must carry the clip label")
    loss = cm.weighted_nll(log_probs, targets, class_weights)
    frame_losses = -log_probs.value[np.arange(graph.n_frames), targets]
    return ForwardResult(trace, loss, frame_losses)


class StreamingPredictor:
    """Frame-by-frame inference with a carried LSTM state (batch size 1)."""

    def __init__(self, params, config):
        self.config = config
        self.arrays = {k: v for k, v in params.arrays.items()}
        self.tensors = {k: cm.constant(v) for k, v in self.arrays.items()}
        self.reset()

    def reset(self):
        self.state = None
        self.history = []

    def step(self, graph_tensors):
        h_graph, _ = graph_embeddings(graph_tensors, self.tensors, self.config)
        hg = h_graph.value[0]
        if self.config.temporal == "none":
            z = hg
        elif self.config.window is None:
            z, self.state = lstm_step(hg, self.state, self.arrays)
        else:
            self.history = (self.history + [hg])[-self.config.window:]
            state = None
            for row in self.history:
                z, state = lstm_step(row, state, self.arrays)
        w, b = self.arrays["head.weight"], self.arrays["head.bias"]
        logits = cm.row_matmul(z.reshape(1, -1), w)[0] + b.reshape(-1)
        logits = logits - logits.max()
        log_probs = logits - np.log(np.exp(logits).sum())
        return log_probs, int(log_probs[1] > log_probs[0])


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

MAGIC = b"SG2VCKPT"
FORMAT_VERSION = 1


def checkpoint_bytes(params, config, vocab=DEFAULT_VOCAB, meta=None):
    """Canonical serialisation: identical inputs give identical bytes."""
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "vocab": list(vocab),
        "params": [{"name": n, "shape": list(s)} for n, s in params.shapes.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = params.flat.astype("<f8").tobytes()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + body


def save_checkpoint(path, params, config, vocab=DEFAULT_VOCAB, meta=None):
    data = checkpoint_bytes(params, config, vocab, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: tuple
    meta: dict


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data)


def parse_checkpoint(data):
    if data[:len(MAGIC)] != MAGIC:
        raise ConfigurationError("not a checkpoint file")
    version, n_head = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + n_head])
    config = ModelConfig(**header["config"])
    vocab = tuple(header["vocab"])
    expected = param_shapes(config, len(vocab))
    stored = {p["name"]: tuple(p["shape"]) for p in header["params"]}
    if stored != expected or list(stored) != list(expected):
        raise ConfigurationError("checkpoint parameter shapes do not match its config")
    flat = np.frombuffer(data[start + n_head:], dtype="<f8").astype(np.float64)
    return Checkpoint(ModelParams(expected, flat), config, vocab, header.get("meta", {}))

