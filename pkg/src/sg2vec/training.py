"""Training loop, stratified k-fold protocol and transfer evaluation."""

import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.model_selection import StratifiedKFold

from . import core_math as cm
from .metrics import pool_reports, report_from_traces
from .model import ModelConfig, ModelParams, PredictionTrace, clip_forward, init_params
from .scene_graph import DEFAULT_VOCAB, ExtractionConfig, SchemaError, extract_clip, to_relation_tensors

log = logging.getLogger(__name__)


class StratificationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 200
    batch_clips: int = 1
    seed: int = 0
    folds: int = 5
    class_weights: object = "auto"       # "auto", None, or (w0, w1)
    early_stop_patience: object = 25     # int or None
    validation_fraction: float = 0.1
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "constant"        # "constant" or "cosine" (decays to 0 over epochs)
    average_last: int = 0                # >0: return the mean of the last n epoch snapshots

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.average_last < 0:
            raise ValueError("average_last must be non-negative")
        if self.batch_clips < 1 or self.epochs < 0:
            raise ValueError("batch_clips must be positive and epochs non-negative")
        cw = self.class_weights
        if not (cw in ("auto", None) or (isinstance(cw, (tuple, list)) and len(cw) == 2)):
            raise ValueError(f"class_weights must be 'auto', None or a pair, got {cw!r}")

    def to_dict(self):
        d = asdict(self)
        if isinstance(d["class_weights"], tuple):
            d["class_weights"] = list(d["class_weights"])
        return d


@dataclass
class ClipData:
    """Scene-graph tensors of a set of clips, ready for the network."""

    graphs: list
    labels: np.ndarray
    clip_ids: list
    vocab: tuple = DEFAULT_VOCAB

    def __len__(self):
        return len(self.graphs)

    def subset(self, index):
        return ClipData([self.graphs[i] for i in index], self.labels[index],
                        [self.clip_ids[i] for i in index], self.vocab)


def prepare_clips(clips, extraction=ExtractionConfig()):
    graphs = [to_relation_tensors(extract_clip(c, extraction), extraction.vocab) for c in clips]
    return ClipData(graphs, np.array([c.label for c in clips], dtype=int),
                    [c.clip_id for c in clips], tuple(extraction.vocab))


def class_weights_auto(labels):
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2)
    if np.any(counts == 0):
        raise ValueError("class re-weighting needs both classes present")
    return tuple(float(w) for w in len(labels) / (2.0 * counts))


def resolve_class_weights(setting, labels):
    if setting is None:
        return None
    if setting == "auto":
        return class_weights_auto(labels)
    return tuple(float(w) for w in setting)


def stratified_folds(labels, k, seed, clip_ids=None):
    """``k`` stratified (train, test) index splits, deterministic in ``seed``."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2)
    if counts.min() < k:
        raise StratificationError(
            f"need at least {k} clips of each class, have {counts.tolist()}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    folds = []
    for fold_id, (tr, te) in enumerate(skf.split(np.zeros(len(labels)), labels)):
        folds.append(FoldSplit(fold_id, tr, te, clip_ids))
    return folds


@dataclass
class FoldSplit:
    fold_id: int
    train: np.ndarray
    test: np.ndarray
    clip_ids: list = None

    def to_dict(self):
        ids = self.clip_ids
        name = (lambda i: ids[i]) if ids is not None else int
        return {"fold_id": self.fold_id,
                "train": [name(i) for i in self.train],
                "test": [name(i) for i in self.test]}


def _validation_split(labels, fraction, rng):
    """Stratified hold-out of about ``fraction`` of each class."""
    val = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        n = int(round(fraction * len(idx)))
        if 0 < n < len(idx):
            val.extend(rng.choice(idx, size=n, replace=False).tolist())
    val = np.array(sorted(val), dtype=int)
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def epoch_learning_rate(cfg, epoch):
    """Learning rate used during ``epoch`` (1-based)."""
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
    return cfg.learning_rate


def _adam(params, grad, state, step, cfg, lr):
    m, v = state
    m *= cfg.beta1
    m += (1 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1 - cfg.beta2) * grad * grad
    mhat = m / (1 - cfg.beta1 ** step)
    vhat = v / (1 - cfg.beta2 ** step)
    params.flat -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    curve: list
    best_epoch: int
    class_weights: tuple = None
    vocab: tuple = DEFAULT_VOCAB


def mean_loss(data, params, model_cfg, class_weights=None):
    tensors = {k: cm.Tensor(v) for k, v in params.arrays.items()}
    losses = [clip_forward(g, params, model_cfg, "eval", labels=y, class_weights=class_weights,
                           tensors=tensors).loss.value[0, 0]
              for g, y in zip(data.graphs, data.labels)]
    return float(np.mean(losses))


def train(data, model_cfg=ModelConfig(), train_cfg=TrainConfig(), stream=0, params=None):
    """Fit the network on ``data`` (a :class:`ClipData`).

    With early stopping, a stratified ``validation_fraction`` of the clips is
    held out and the parameters from the epoch with the lowest validation
    loss are returned. ``stream`` separates the random streams of folds.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if len(np.unique(data.labels)) < 2:
        raise ValueError("training data must contain both classes")
    rng = np.random.default_rng([train_cfg.seed, stream])
    if params is None:
        params = init_params(model_cfg, len(data.vocab), rng)
    else:
        params = params.copy()
    weights = resolve_class_weights(train_cfg.class_weights, data.labels)

    patience = train_cfg.early_stop_patience
    if patience is not None and train_cfg.validation_fraction > 0:
        fit_idx, val_idx = _validation_split(data.labels, train_cfg.validation_fraction, rng)
    else:
        fit_idx, val_idx = np.arange(len(data)), np.array([], dtype=int)
    fit, val = data.subset(fit_idx), data.subset(val_idx)

    state = (np.zeros_like(params.flat), np.zeros_like(params.flat))
    step = 0
    best = (math.inf, params.copy(), 0)
    snapshots = deque(maxlen=max(1, train_cfg.average_last))
    curve = []
    since_best = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(fit))
        lr = epoch_learning_rate(train_cfg, epoch)
        losses = []
        for start in range(0, len(order), train_cfg.batch_clips):
            grad = np.zeros_like(params.flat)
            batch = order[start:start + train_cfg.batch_clips]
            for i in batch:
                tensors = params.tensors()
                res = clip_forward(fit.graphs[i], params, model_cfg, "train", labels=fit.labels[i],
                                   class_weights=weights, rng=rng, tensors=tensors)
                loss = res.loss.value[0, 0]
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, clip {fit.clip_ids[i]}")
                grad += params.flatten_grads(cm.backward(res.loss, tensors))
                losses.append(loss)
            grad /= len(batch)
            norm = float(np.sqrt(grad @ grad))
            if train_cfg.grad_clip and norm > train_cfg.grad_clip:
                grad *= train_cfg.grad_clip / norm
            step += 1
            _adam(params, grad, state, step, train_cfg, lr)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if len(val):
            row["val_loss"] = mean_loss(val, params, model_cfg, weights)
            score = row["val_loss"]
        else:
            score = row["train_loss"]
        curve.append(row)
        log.debug("epoch %d %s", epoch, row)
        snapshots.append(params.flat.copy())
        if score < best[0]:
            best = (score, _averaged(params, snapshots), epoch)
            since_best = 0
        else:
            since_best += 1
            if patience is not None and len(val) and since_best >= patience:
                break
    final = best[1] if train_cfg.epochs else params
    return TrainResult(final, model_cfg, curve, best[2], weights, data.vocab)


def _averaged(params, snapshots):
    out = params.copy()
    if len(snapshots) > 1:
        out.flat[...] = np.mean(snapshots, axis=0)
    return out


def predict(data, params, model_cfg):
    tensors = {k: cm.Tensor(v) for k, v in params.arrays.items()}
    return [clip_forward(g, params, model_cfg, "eval", tensors=tensors).trace for g in data.graphs]


def evaluate(data, params, model_cfg):
    traces = predict(data, params, model_cfg)
    return report_from_traces(traces, data.labels), traces


def _run_fold(args):
    data, split, model_cfg, train_cfg = args
    result = train(data.subset(split.train), model_cfg, train_cfg, stream=split.fold_id + 1)
    test = data.subset(split.test)
    report, traces = evaluate(test, result.params, model_cfg)
    return result, report, traces


@dataclass
class CVResult:
    report: object
    folds: list
    fold_results: list = field(default_factory=list)
    fold_traces: list = field(default_factory=list)


def cross_validate(data, model_cfg=ModelConfig(), train_cfg=TrainConfig(), jobs=1):
    """Stratified k-fold: train on each training split, test on the held-out
    fold; frame-level metrics pooled over all test folds."""
    splits = stratified_folds(data.labels, train_cfg.folds, train_cfg.seed, data.clip_ids)
    args = [(data, s, model_cfg, train_cfg) for s in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outputs = list(ex.map(_run_fold, args))
    else:
        outputs = [_run_fold(a) for a in args]
    results = [o[0] for o in outputs]
    reports = [o[1] for o in outputs]
    traces = [o[2] for o in outputs]
    labels = [data.labels[s.test] for s in splits]
    pooled = pool_reports(reports, traces, labels)
    return CVResult(pooled, splits, results, traces)


def transfer_eval(params, model_cfg, vocab, data):
    """Evaluate a trained model on another dataset without any updates."""
    if tuple(vocab) != tuple(data.vocab):
        missing = sorted(set(data.vocab) - set(vocab))
        extra = sorted(set(vocab) - set(data.vocab))
        raise SchemaError(f"vocabulary mismatch: dataset-only {missing}, checkpoint-only {extra}, "
                          f"or different order")
    return evaluate(data, params, model_cfg)


def trace_to_dict(clip_id, trace: PredictionTrace):
    return {"clip_id": clip_id, "log_probs": trace.log_probs.tolist(),
            "decisions": trace.decisions.tolist()}


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
