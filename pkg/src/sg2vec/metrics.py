"""Binary classification metrics and average time of prediction."""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred):
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        return cls(tp=int(np.sum(y_true & y_pred)), fp=int(np.sum(~y_true & y_pred)),
                   tn=int(np.sum(~y_true & ~y_pred)), fn=int(np.sum(y_true & ~y_pred)))

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.tn + other.tn, self.fn + other.fn)


def accuracy(c):
    if c.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return (c.tp + c.tn) / c.total


def mcc(c):
    """Matthews correlation; 0 when any marginal is empty."""
    if c.total == 0:
        raise ValueError("MCC of an empty confusion matrix")
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Tied scores count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class AtpResult:
    atp: float
    avg_seq_len: float
    ratio: float
    detected_fraction: float
    first_frames: list


def atp(decision_sequences):
    """Average time of prediction over collision clips.

    Each sequence holds the per-frame decisions of one collision clip. A
    clip contributes the 1-based index of its first collision decision, or
    its full length if it never predicts a collision.
    """
    seqs = [np.asarray(d) for d in decision_sequences]
    if not seqs:
        raise ValueError("ATP needs at least one collision clip")
    firsts, detected = [], 0
    for d in seqs:
        hits = np.flatnonzero(d == 1)
        if hits.size:
            firsts.append(int(hits[0]) + 1)
            detected += 1
        else:
            firsts.append(len(d))
    mean_first = float(np.mean(firsts))
    mean_len = float(np.mean([len(d) for d in seqs]))
    return AtpResult(mean_first, mean_len, mean_first / mean_len, detected / len(seqs), firsts)


@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    mcc: float
    confusion: Confusion
    atp: float = float("nan")
    avg_seq_len: float = float("nan")
    atp_ratio: float = float("nan")
    detected_fraction: float = float("nan")
    n_clips: int = 0
    n_frames: int = 0
    clip_level: dict = None
    folds: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["folds"] = [f.to_dict() for f in self.folds]
        return d

    def to_json(self):
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True)

    def table(self):
        rows = []
        if self.folds:
            for i, f in enumerate(self.folds):
                rows.append((f"fold {i}", f))
        rows.append(("pooled" if self.folds else "all", self))
        header = f"{'':<8}{'acc':>8}{'auc':>8}{'mcc':>8}{'atp':>8}{'len':>8}{'ratio':>8}" \
                 f"{'tp':>7}{'fp':>7}{'tn':>7}{'fn':>7}"
        lines = [header]
        for name, r in rows:
            c = r.confusion
            lines.append(f"{name:<8}{r.accuracy:>8.4f}{r.auc:>8.4f}{r.mcc:>8.4f}"
                         f"{r.atp:>8.3f}{r.avg_seq_len:>8.3f}{r.atp_ratio:>8.4f}"
                         f"{c.tp:>7}{c.fp:>7}{c.tn:>7}{c.fn:>7}")
        return "\n".join(lines)


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def report_from_traces(traces, labels):
    """Frame-level metrics plus ATP over the collision clips.

    ``traces`` are PredictionTrace objects and ``labels`` the clip labels.
    Clip-level majority-vote metrics go in ``clip_level``.
    """
    labels = [int(v) for v in labels]
    y_true = np.concatenate([np.full(len(t), y) for t, y in zip(traces, labels)])
    y_pred = np.concatenate([t.decisions for t in traces])
    scores = np.concatenate([t.collision_prob for t in traces])
    conf = Confusion.from_predictions(y_true, y_pred)
    both = 0 < y_true.sum() < y_true.size
    report = MetricsReport(
        accuracy=accuracy(conf),
        auc=auc(scores, y_true) if both else float("nan"),
        mcc=mcc(conf),
        confusion=conf,
        n_clips=len(traces),
        n_frames=int(y_true.size),
    )
    positives = [t.decisions for t, y in zip(traces, labels) if y == 1]
    if positives:
        a = atp(positives)
        report.atp, report.avg_seq_len, report.atp_ratio = a.atp, a.avg_seq_len, a.ratio
        report.detected_fraction = a.detected_fraction
    clip_pred = np.array([int(t.decisions.mean() > 0.5) for t in traces])
    clip_conf = Confusion.from_predictions(labels, clip_pred)
    report.clip_level = {"accuracy": accuracy(clip_conf), "mcc": mcc(clip_conf),
                         "confusion": asdict(clip_conf)}
    return report


def pool_reports(fold_reports, fold_traces, fold_labels):
    """Pooled report over all test folds, keeping the per-fold breakdown."""
    traces = [t for ts in fold_traces for t in ts]
    labels = [y for ys in fold_labels for y in ys]
    pooled = report_from_traces(traces, labels)
    pooled.folds = list(fold_reports)
    return pooled


def curves_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row[c] for c in columns])
    return buf.getvalue()
