"""Downstream evaluation: AUC, kNN checkpoint selection, linear probe, end-to-end fine-tuning."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from medaug import engine

log = logging.getLogger(__name__)

MAX_REDRAWS = 10


def _check_binary(labels) -> tuple[np.ndarray, int, int]:
    y = np.asarray(labels).astype(np.int64).ravel()
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    return y, n_pos, n_neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted as one half."""
    y, n_pos, n_neg = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # average ranks over runs of tied scores
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(s)]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_trapezoid(scores, labels) -> float:
    """Area under the empirical ROC curve by trapezoidal integration."""
    y, n_pos, n_neg = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    thresholds = np.unique(s)[::-1]
    tpr, fpr = [0.0], [0.0]
    for t in thresholds:
        hit = s >= t
        tpr.append(np.sum(hit & (y == 1)) / n_pos)
        fpr.append(np.sum(hit & (y == 0)) / n_neg)
    tpr, fpr = np.asarray(tpr), np.asarray(fpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def knn_loo_accuracy(embeddings: np.ndarray, labels, k: int = 20) -> float:
    """Leave-one-out k-NN accuracy under cosine similarity.

    Votes are a majority of the k neighbours; an exact tie predicts 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if len(x) < 2:
        raise ValueError("k-NN probe set needs at least two samples")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    k = min(k, len(x) - 1)
    nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    votes = y[nn].sum(axis=1)
    pred = (2 * votes > k).astype(np.int64)
    return float(np.mean(pred == y))


def knn_select(checkpoints, probe_x: np.ndarray, probe_y, k: int = 20):
    """Pick the checkpoint whose backbone features score best under LOO k-NN.

    ``checkpoints`` is a sequence of ``(checkpoint_id, params)``. Ties go to
    the earliest. Returns ``(checkpoint_id, params, scores)``.
    """
    if len(probe_x) == 0:
        raise ValueError("empty k-NN probe set")
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    scores = [knn_loo_accuracy(engine.features(p, probe_x), probe_y, k) for _, p in checkpoints]
    best = int(np.argmax(scores))
    return checkpoints[best][0], checkpoints[best][1], scores


# --------------------------------------------------------------------------- splits


class SplitUnit(str, enum.Enum):
    BY_IMAGE = "by_image"
    BY_PATIENT = "by_patient"


class EvalMode(str, enum.Enum):
    LINEAR_PROBE = "linear"
    END_TO_END = "end_to_end"


@dataclass(frozen=True)
class SplitSpec:
    fraction: float = 0.01
    n_repeats: int = 5
    seed: int = 0
    unit: SplitUnit = SplitUnit.BY_IMAGE

    def __post_init__(self):
        object.__setattr__(self, "unit", SplitUnit(self.unit))
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("split fraction must be in (0, 1]")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")


def draw_splits(labels, patient_ids, spec: SplitSpec) -> list[np.ndarray]:
    """Index arrays into the labeled pool, one per repeat, each with both classes."""
    y = np.asarray(labels).astype(np.int64)
    pids = np.asarray(patient_ids)
    n = len(y)
    size = max(2, int(round(spec.fraction * n)))
    splits = []
    for rep in range(spec.n_repeats):
        for attempt in range(MAX_REDRAWS + 1):
            rng = np.random.default_rng([int(spec.seed), 0x5B, rep, attempt])
            if spec.unit is SplitUnit.BY_IMAGE:
                idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
            else:
                chosen, count = [], 0
                for p in rng.permutation(np.unique(pids)):
                    chosen.append(p)
                    count += int((pids == p).sum())
                    if count >= size:
                        break
                idx = np.flatnonzero(np.isin(pids, chosen))
            if 0 < y[idx].sum() < len(idx):
                splits.append(idx)
                break
            log.info("split %d attempt %d has a single class; redrawing", rep, attempt)
        else:
            raise ValueError(f"split {rep}: no two-class draw after {MAX_REDRAWS} redraws")
    return splits


# --------------------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 1e-2
    epochs: int = 500
    batch_size: int | None = None  # None = full batch
    weight_decay: float = 0.0
    standardize: bool = True
    seed: int = 0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic_loss_and_grad(w, b, feats, y):
    """Mean binary cross-entropy of a linear classifier and its gradients ``(dw, db, dfeats)``."""
    logits = feats @ w + b
    p = _sigmoid(logits)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    d = (p - y) / len(y)
    return loss, feats.T @ d, float(d.sum()), np.outer(d, w)


def end_to_end_loss_and_grad(params, w, b, x, y):
    """Loss and gradients for backbone + linear head; ``(loss, dparams, dw, db)``."""
    feats, cache = engine.forward(params, x, upto="backbone")
    loss, dw, db, dfeats = logistic_loss_and_grad(w, b, feats, y)
    return loss, engine.backward(params, cache, dfeats), dw, db


def _batches(n, hyper: ProbeHyper, epoch: int):
    if hyper.batch_size is None or hyper.batch_size >= n:
        yield np.arange(n)
        return
    order = np.random.default_rng([hyper.seed, 0xB7, epoch]).permutation(n)
    for i in range(0, n, hyper.batch_size):
        yield order[i : i + hyper.batch_size]


def standardizer(feats: np.ndarray, enabled: bool = True):
    """Affine map ``(shift, scale)`` to zero mean / unit variance on ``feats``."""
    if not enabled:
        return np.zeros(feats.shape[1]), np.ones(feats.shape[1])
    std = feats.std(axis=0)
    return feats.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def fit_logistic(feats, y, hyper: ProbeHyper):
    """Full-batch (or minibatch) gradient descent on the logistic loss from zero init.

    Returns ``(w, b)`` acting on raw features; standardization is folded in.
    """
    y = np.asarray(y, dtype=np.float64)
    shift, scale = standardizer(feats, hyper.standardize)
    z = (feats - shift) / scale
    w = np.zeros(z.shape[1])
    b = 0.0
    for epoch in range(hyper.epochs):
        for idx in _batches(len(y), hyper, epoch):
            _, dw, db, _ = logistic_loss_and_grad(w, b, z[idx], y[idx])
            w = w - hyper.lr * (dw + hyper.weight_decay * w)
            b = b - hyper.lr * db
    return w / scale, b - float(shift @ (w / scale))


def fit_end_to_end(params, x, y, hyper: ProbeHyper):
    y = np.asarray(y, dtype=np.float64)
    params = {k: v.copy() for k, v in params.items() if k.startswith("backbone.")}
    w = np.zeros(params[[k for k in params if k.endswith(".W")][-1]].shape[1])
    b = 0.0
    for epoch in range(hyper.epochs):
        for idx in _batches(len(y), hyper, epoch):
            _, dp, dw, db = end_to_end_loss_and_grad(params, w, b, x[idx], y[idx])
            params = {k: v - hyper.lr * dp[k] for k, v in params.items()}
            w = w - hyper.lr * dw
            b = b - hyper.lr * db
    return params, w, b


@dataclass
class EvalReport:
    per_split_auc: list[float]
    mean_auc: float
    std_auc: float
    mode: EvalMode
    task: int
    checkpoint_id: str
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_aucs(cls, aucs, mode, task, checkpoint_id, meta=None):
        a = np.asarray(aucs, dtype=np.float64)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        return cls([float(v) for v in a], float(a.mean()), std, EvalMode(mode), int(task), str(checkpoint_id), meta or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mode"] = EvalMode(d["mode"])
        return cls(**d)


def linear_probe(params, pool_x, pool_y, test_x, test_y, splits, hyper: ProbeHyper, task=0, checkpoint_id=""):
    """Frozen-backbone logistic probe, one fit per split, AUC on the fixed test set."""
    pool_f = engine.features(params, pool_x)
    test_f = engine.features(params, test_x)
    aucs = []
    for idx in splits:
        w, b = fit_logistic(pool_f[idx], pool_y[idx], hyper)
        aucs.append(auc(test_f @ w + b, test_y))
    return EvalReport.from_aucs(aucs, EvalMode.LINEAR_PROBE, task, checkpoint_id)


def end_to_end(params, pool_x, pool_y, test_x, test_y, splits, hyper: ProbeHyper, task=0, checkpoint_id=""):
    """Backbone and linear head trained jointly per split."""
    aucs = []
    for idx in splits:
        tuned, w, b = fit_end_to_end(params, pool_x[idx], pool_y[idx], hyper)
        aucs.append(auc(engine.features(tuned, test_x) @ w + b, test_y))
    return EvalReport.from_aucs(aucs, EvalMode.END_TO_END, task, checkpoint_id)
