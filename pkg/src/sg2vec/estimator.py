"""scikit-learn wrappers: scene-graph extraction and the clip classifier.

Samples are clips. ``SceneGraphExtractor`` maps ``ClipSequence`` objects
to stacked relation tensors, and ``SG2VecClassifier`` consumes either.
Both compose in a ``sklearn.pipeline.Pipeline``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig
from .scene_graph import (
    DEFAULT_VOCAB, ClipSequence, ExtractionConfig, GraphTensors, extract_clip, to_relation_tensors,
)
from .training import ClipData, TrainConfig, predict, train


class SceneGraphExtractor(BaseEstimator, TransformerMixin):
    def __init__(self, band_thresholds=(4.0, 7.0, 10.0, 16.0, 25.0), lane_width=12.0,
                 vehicle_half_width=3.0, all_pairs=False, vocab=DEFAULT_VOCAB):
        self.band_thresholds = band_thresholds
        self.lane_width = lane_width
        self.vehicle_half_width = vehicle_half_width
        self.all_pairs = all_pairs
        self.vocab = vocab

    def _config(self):
        return ExtractionConfig(band_thresholds=tuple(self.band_thresholds),
                                lane_width=self.lane_width,
                                vehicle_half_width=self.vehicle_half_width,
                                all_pairs=self.all_pairs, vocab=tuple(self.vocab))

    def fit(self, X, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        out = []
        for clip in X:
            if not isinstance(clip, ClipSequence):
                raise TypeError(f"expected ClipSequence, got {type(clip).__name__}")
            out.append(to_relation_tensors(extract_clip(clip, self.config_), self.config_.vocab))
        return out


def _as_graphs(X, vocab):
    graphs = []
    for item in X:
        if isinstance(item, GraphTensors):
            graphs.append(item)
        elif isinstance(item, ClipSequence):
            cfg = ExtractionConfig(vocab=tuple(vocab))
            graphs.append(to_relation_tensors(extract_clip(item, cfg), cfg.vocab))
        else:
            raise TypeError(f"expected GraphTensors or ClipSequence, got {type(item).__name__}")
    if not graphs:
        raise ValueError("no clips given")
    return graphs


class SG2VecClassifier(BaseEstimator, ClassifierMixin):
    """Collision classifier over clips.

    Every frame receives a prediction. ``predict`` and ``predict_proba`` work
    per clip: the clip probability is the mean per-frame collision
    probability. Use ``predict_frames`` for the per-frame decisions.
    """

    def __init__(self, mrgcn_layers=2, mrgcn_dim=64, pooling="sag", pooling_ratio=0.25,
                 readout="add", temporal="lstm", lstm_hidden=20, dropout=0.1, history="full",
                 spatial="mrgcn", learning_rate=5e-5, epochs=200, batch_clips=1,
                 class_weights="auto", early_stop_patience=25, validation_fraction=0.1,
                 grad_clip=5.0, lr_schedule="constant", average_last=0, vocab=DEFAULT_VOCAB,
                 random_state=0):
        self.mrgcn_layers = mrgcn_layers
        self.mrgcn_dim = mrgcn_dim
        self.pooling = pooling
        self.pooling_ratio = pooling_ratio
        self.readout = readout
        self.temporal = temporal
        self.lstm_hidden = lstm_hidden
        self.dropout = dropout
        self.history = history
        self.spatial = spatial
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_clips = batch_clips
        self.class_weights = class_weights
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.grad_clip = grad_clip
        self.lr_schedule = lr_schedule
        self.average_last = average_last
        self.vocab = vocab
        self.random_state = random_state

    def model_config(self):
        return ModelConfig(mrgcn_layers=self.mrgcn_layers, mrgcn_dim=self.mrgcn_dim,
                           pooling=self.pooling, pooling_ratio=self.pooling_ratio,
                           readout=self.readout, temporal=self.temporal,
                           lstm_hidden=self.lstm_hidden, dropout=self.dropout,
                           history=self.history, spatial=self.spatial)

    def train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_clips=self.batch_clips, seed=self.random_state,
                           class_weights=self.class_weights,
                           early_stop_patience=self.early_stop_patience,
                           validation_fraction=self.validation_fraction,
                           grad_clip=self.grad_clip, lr_schedule=self.lr_schedule,
                           average_last=self.average_last)

    def fit(self, X, y):
        graphs = _as_graphs(X, self.vocab)
        y = np.asarray(y, dtype=int).ravel()
        if y.shape[0] != len(graphs):
            raise ValueError(f"got {len(graphs)} clips but {y.shape[0]} labels")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        data = ClipData(graphs, y, [f"clip{i}" for i in range(len(graphs))], tuple(self.vocab))
        result = train(data, self.model_config(), self.train_config())
        self.params_ = result.params
        self.config_ = result.config
        self.curve_ = result.curve
        self.classes_ = np.array([0, 1])
        return self

    def decision_traces(self, X):
        check_is_fitted(self, "params_")
        graphs = _as_graphs(X, self.vocab)
        data = ClipData(graphs, np.zeros(len(graphs), dtype=int), [""] * len(graphs),
                        tuple(self.vocab))
        return predict(data, self.params_, self.config_)

    def predict_frames(self, X):
        return [t.decisions for t in self.decision_traces(X)]

    def predict_proba(self, X):
        p = np.array([t.collision_prob.mean() for t in self.decision_traces(X)])
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)
