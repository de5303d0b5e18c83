"""Prototype scoring, baseline similarities, OOD metrics and score ensembling."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import DataError, FormatError
from .numerics import NumericError, softmax_np

TPR_TARGET_PCT = 95
BASELINE_METRICS = ("inv_euclidean", "cosine")
METRICS = ("relational",) + BASELINE_METRICS


class MetricError(ValueError):
    pass


@dataclass
class PrototypeSet:
    class_ids: np.ndarray
    prototypes: np.ndarray

    def __len__(self):
        return len(self.class_ids)


@dataclass
class ScoreSet:
    scores: np.ndarray
    is_known: np.ndarray
    pred_class: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_known = np.asarray(self.is_known, dtype=bool)
        n = len(self.scores)
        if len(self.is_known) != n:
            raise MetricError(f"{n} scores but {len(self.is_known)} known flags")
        if self.pred_class is None:
            self.pred_class = np.full(n, -1, dtype=np.int64)
        self.pred_class = np.asarray(self.pred_class, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if not np.all(np.isfinite(self.scores)):
            raise NumericError("scores contain NaN/Inf")

    def __len__(self):
        return len(self.scores)

    @property
    def known(self):
        return self.scores[self.is_known]

    @property
    def unknown(self):
        return self.scores[~self.is_known]


@dataclass
class MetricsReport:
    auroc: float
    fpr95: float
    acc: float | None
    h_score: float | None
    n_known: int
    n_unknown: int
    seed: int
    config_digest: str
    roc_points: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"auroc": self.auroc, "fpr95": self.fpr95, "acc": self.acc,
                "h_score": self.h_score, "n_known": self.n_known,
                "n_unknown": self.n_unknown, "seed": self.seed,
                "config_digest": self.config_digest}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


# ---------------------------------------------------------------- prototypes and scores


def compute_prototypes(support, model=None):
    """Per-class mean of model features (raw input features when ``model`` is None)."""
    if len(support) == 0:
        raise DataError("support set is empty")
    feats = support.features if model is None else model.features(support.features)
    feats = np.asarray(feats, dtype=np.float64)
    class_ids = np.unique(support.labels)
    protos = np.zeros((len(class_ids), feats.shape[1]))
    counts = np.zeros(len(class_ids))
    idx = np.searchsorted(class_ids, support.labels)
    np.add.at(protos, idx, feats)
    np.add.at(counts, idx, 1)
    if np.any(counts == 0):
        raise DataError("empty class in support set")
    return PrototypeSet(class_ids, protos / counts[:, None])


def msp(u):
    """Max softmax probability over the last axis and its argmax index."""
    p = softmax_np(np.asarray(u, dtype=np.float64), axis=-1)
    return p.max(axis=-1), p.argmax(axis=-1)


def relational_logits(z_test, prototypes, model):
    """(n_test, n_classes) head logits for every (test feature, prototype) pair."""
    z_test = np.atleast_2d(z_test)
    n, c = len(z_test), len(prototypes)
    left = np.repeat(z_test, c, axis=0)
    right = np.tile(prototypes.prototypes, (n, 1))
    return model.feature_pair_logits(left, right).astype(np.float64).reshape(n, c)


def normality_score(x_t, prototypes, model):
    """Relational normality score(s) for raw inputs ``x_t``.

    Each test feature is paired with every prototype, the raw head logits
    form u, and the score is max(softmax(u)). Returns (scores, classes).
    """
    if len(prototypes) < 2:
        raise MetricError("normality score needs at least two known classes")
    single = np.ndim(x_t) == 1
    z = model.features(np.atleast_2d(x_t))
    u = relational_logits(z, prototypes, model)
    score, arg = msp(u)
    cls = prototypes.class_ids[arg]
    return (score[0], cls[0]) if single else (score, cls)


def similarities(z_t, prototypes, metric):
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    protos = prototypes.prototypes
    if metric == "inv_euclidean":
        dist = np.sqrt(((z_t[:, None, :] - protos[None, :, :]) ** 2).sum(-1))
        return 1.0 / (1.0 + dist)
    if metric == "cosine":
        nz = np.linalg.norm(z_t, axis=1)
        npr = np.linalg.norm(protos, axis=1)
        if np.any(nz == 0) or np.any(npr == 0):
            raise NumericError("cosine similarity undefined for a zero-norm vector")
        return (z_t @ protos.T) / (nz[:, None] * npr[None, :])
    raise MetricError(f"unknown baseline metric {metric!r}")


def baseline_score(z_t, prototypes, metric):
    """max(softmax(similarities)) against fixed-feature prototypes."""
    single = np.ndim(z_t) == 1
    score, arg = msp(similarities(z_t, prototypes, metric))
    cls = prototypes.class_ids[arg]
    return (score[0], cls[0]) if single else (score, cls)


# ---------------------------------------------------------------- metrics


def _split(scores):
    known, unknown = scores.known, scores.unknown
    if len(known) == 0 or len(unknown) == 0:
        raise MetricError(
            f"need known and unknown samples, got {len(known)} known / {len(unknown)} unknown")
    return known, unknown


def auroc(scores):
    """Mann-Whitney estimate: P(known > unknown) + 0.5 P(tie)."""
    known, unknown = _split(scores)
    ranks = rankdata(np.concatenate([known, unknown]))
    nk, nu = len(known), len(unknown)
    u_stat = ranks[:nk].sum() - nk * (nk + 1) / 2.0
    return float(u_stat / (nk * nu))


def fpr95_threshold(scores):
    """Largest t with at least 95% of known scores >= t."""
    known, _ = _split(scores)
    k = (TPR_TARGET_PCT * len(known) + 99) // 100  # ceil without float error
    return float(np.sort(known)[::-1][k - 1])


def fpr95(scores):
    _, unknown = _split(scores)
    t = fpr95_threshold(scores)
    return float(np.mean(unknown >= t))


def roc_points(scores):
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    known, unknown = _split(scores)
    thresholds = np.unique(np.concatenate([known, unknown]))[::-1]
    ks, us = np.sort(known), np.sort(unknown)
    tpr = (len(ks) - np.searchsorted(ks, thresholds, side="left")) / len(ks)
    fpr = (len(us) - np.searchsorted(us, thresholds, side="left")) / len(us)
    return [(0.0, 0.0)] + list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points):
    pts = np.asarray(points)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def h_score(acc_known, acc_unknown):
    if acc_known + acc_unknown == 0:
        return 0.0
    return 2.0 * acc_known * acc_unknown / (acc_known + acc_unknown)


def ensemble_average(a, b, normalize=False):
    """Elementwise mean of two aligned score sets.

    Predicted classes are merged symmetrically: a side with -1 defers to the
    other, agreeing predictions are kept, conflicts become -1.
    """
    if len(a) != len(b):
        raise MetricError(f"score sets differ in length: {len(a)} vs {len(b)}")
    if not np.array_equal(a.sample_ids, b.sample_ids):
        raise MetricError("score sets are not aligned (sample ids differ)")
    if not np.array_equal(a.is_known, b.is_known):
        raise MetricError("score sets disagree on known/unknown ground truth")
    sa, sb = a.scores, b.scores
    if normalize:
        sa, sb = _minmax(sa), _minmax(sb)
    pa, pb = a.pred_class, b.pred_class
    pred = np.where(pa == pb, pa, np.where(pa == -1, pb, np.where(pb == -1, pa, -1)))
    return ScoreSet((sa + sb) / 2.0, a.is_known.copy(), pred, a.sample_ids.copy())


def _minmax(s):
    lo, hi = s.min(), s.max()
    return np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)


# ---------------------------------------------------------------- pipeline


def config_digest(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def score_dataset(support, test, metric="relational", model=None):
    """Per-sample ScoreSet for ``test`` against prototypes built from ``support``."""
    if support.dim != test.dim:
        raise DataError(f"support has {support.dim} features, test has {test.dim}")
    known_ids = np.unique(support.labels)
    is_known = np.isin(test.labels, known_ids)
    if metric == "relational":
        if model is None:
            raise MetricError("relational metric needs a trained model")
        protos = compute_prototypes(support, model)
        scores, pred = normality_score(test.features, protos, model)
    elif metric in BASELINE_METRICS:
        feats = test.features if model is None else model.features(test.features)
        protos = compute_prototypes(support, model)
        scores, pred = baseline_score(feats, protos, metric)
    else:
        raise MetricError(f"unknown metric {metric!r}")
    return ScoreSet(scores, is_known, pred)


def report_from_scores(scores, true_labels=None, seed=0, digest=""):
    """Metrics for a ScoreSet; accuracy needs the true test labels."""
    a = auroc(scores)
    f = fpr95(scores)
    acc = hs = None
    if true_labels is not None:
        known = scores.is_known
        acc = float(np.mean(scores.pred_class[known] == np.asarray(true_labels)[known]))
        t = fpr95_threshold(scores)
        acc_unknown = float(np.mean(scores.unknown < t))
        hs = h_score(acc, acc_unknown)
    return MetricsReport(a, f, acc, hs, int(scores.is_known.sum()), int((~scores.is_known).sum()),
                         int(seed), digest, roc_points(scores))


def evaluate(support, test, metric="relational", model=None, seed=0, config=None):
    """Prototypes -> scores -> metrics. Returns (MetricsReport, ScoreSet)."""
    scores = score_dataset(support, test, metric, model)
    digest = config_digest(config if config is not None else {"metric": metric})
    return report_from_scores(scores, test.labels, seed, digest), scores


# ---------------------------------------------------------------- files


def write_scores(scores, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "is_known", "pred_class"])
        for sid, s, k, p in zip(scores.sample_ids, scores.scores, scores.is_known, scores.pred_class):
            w.writerow([int(sid), repr(float(s)), int(k), int(p)])


def read_scores(path):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sample_id", "score", "is_known", "pred_class"]:
        raise FormatError(f"{path}: header must be sample_id,score,is_known,pred_class", 0)
    try:
        ids = [int(r[0]) for r in rows[1:]]
        sc = [float(r[1]) for r in rows[1:]]
        kn = [int(r[2]) for r in rows[1:]]
        pc = [int(r[3]) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from None
    if any(k not in (0, 1) for k in kn):
        raise FormatError(f"{path}: is_known must be 0 or 1")
    if any(not math.isfinite(s) or not 0.0 <= s <= 1.0 for s in sc):
        raise FormatError(f"{path}: scores must be finite and within [0, 1]")
    return ScoreSet(np.array(sc), np.array(kn, dtype=bool), np.array(pc), np.array(ids))


def write_roc(points, path):
    with open(path, "w") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in points:
            fh.write(f"{fpr!r},{tpr!r}\n")


def write_report(report, path):
    Path(path).write_text(report.to_json())
