"""Accuracy, ROC sweep and equal error rate.

Spoof is the positive class and a clip is predicted spoof when its score is
>= the threshold. FAR is the fraction of bona-fide clips flagged as spoof,
FRR the fraction of spoof clips let through. The EER is orientation
symmetric, so swapping these names would not change it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .data import make_batches
from .errors import EmptySet, SingleClass
from .nn import sigmoid

FAR_CONVENTION = (
    "positive class = spoof; predict spoof iff score >= threshold; "
    "far = bona_fide predicted spoof / bona_fide; frr = spoof predicted bona_fide / spoof"
)
SENTINEL_MARGIN = 1e-3


@dataclass(frozen=True, eq=False)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        if s.ndim != 1 or s.shape != y.shape:
            raise ValueError("scores and labels must be 1-D and the same length")
        if s.size == 0:
            raise EmptySet("no scored clips")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 (bona fide) or 1 (spoof)")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.scores.size


def accuracy(s: ScoredSet, threshold: float = 0.5) -> float:
    pred = (s.scores >= threshold).astype(np.int64)
    return float(np.mean(pred == s.labels))


def confusion(s: ScoredSet, threshold: float = 0.5) -> dict:
    pred = s.scores >= threshold
    pos = s.labels == 1
    return {
        "tp": int(np.sum(pred & pos)),
        "fp": int(np.sum(pred & ~pos)),
        "tn": int(np.sum(~pred & ~pos)),
        "fn": int(np.sum(~pred & pos)),
    }


def roc_sweep(s: ScoredSet) -> List[Tuple[float, float, float]]:
    """(threshold, far, frr) at every distinct score plus one sentinel on each side."""
    n_pos = int(np.sum(s.labels == 1))
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("both bona-fide and spoof clips are required")
    uniq = np.unique(s.scores)
    thresholds = np.concatenate([[uniq[0] - SENTINEL_MARGIN], uniq, [uniq[-1] + SENTINEL_MARGIN]])
    # counts of scores strictly below each threshold, per class
    pos_sorted = np.sort(s.scores[s.labels == 1])
    neg_sorted = np.sort(s.scores[s.labels == 0])
    pos_below = np.searchsorted(pos_sorted, thresholds, side="left")
    neg_below = np.searchsorted(neg_sorted, thresholds, side="left")
    far = (n_neg - neg_below) / n_neg
    frr = pos_below / n_pos
    return [(float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr)]


def eer(s: ScoredSet) -> Tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    FAR and FRR are interpolated linearly in threshold between consecutive
    sweep points; the EER is their common value where FAR - FRR changes sign.
    """
    roc = np.asarray(roc_sweep(s))
    t, far, frr = roc[:, 0], roc[:, 1], roc[:, 2]
    diff = far - frr
    exact = np.nonzero(diff == 0.0)[0]
    if exact.size:
        i = int(exact[0])
        return float(far[i]), float(t[i])
    # diff is non-increasing, starts at +1 and ends at -1
    i = int(np.nonzero(diff < 0)[0][0]) - 1
    alpha = diff[i] / (diff[i] - diff[i + 1])
    value = far[i] + alpha * (far[i + 1] - far[i])
    return float(value), float(t[i] + alpha * (t[i + 1] - t[i]))


@dataclass
class EvalReport:
    accuracy: float
    eer: float
    eer_threshold: float
    confusion: dict
    roc: List[List[float]]
    n_clips: int
    model_checksum: str = ""
    feature_fingerprints: dict = field(default_factory=dict)
    seed: int = 0
    convention: str = FAR_CONVENTION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def report_for(s: ScoredSet, threshold: float = 0.5, **meta) -> EvalReport:
    value, where = eer(s)
    return EvalReport(
        accuracy=accuracy(s, threshold),
        eer=value,
        eer_threshold=where,
        confusion=confusion(s, threshold),
        roc=[list(p) for p in roc_sweep(s)],
        n_clips=len(s),
        **meta,
    )


def score_entries(model, entries, features, batch_size: int = 64) -> np.ndarray:
    """Spoof probabilities for `entries`, in entry order."""
    batches = make_batches(entries, features, batch_size, epoch=None, kinds=model.kinds,
                           dtype=model.dtype)
    logits = [model.forward_batch(b.features) for b in batches]
    return sigmoid(np.concatenate(logits).astype(np.float64))


def evaluate_model(model, entries, features, threshold: float = 0.5, **meta) -> EvalReport:
    """Score a labelled set and build its report.

    `features` must have been extracted under the model's feature config;
    a fingerprint mismatch on any clip raises FingerprintMismatch.
    """
    if not entries:
        raise EmptySet("nothing to evaluate")
    for e in entries:
        feats = features.get(e.clip_id)
        if feats is not None:
            model.check_features(feats)
    scores = score_entries(model, entries, features)
    labels = np.array([int(e.label) for e in entries])
    meta.setdefault("feature_fingerprints", model.feature_fingerprints)
    meta.setdefault("seed", model.seed)
    return report_for(ScoredSet(scores, labels), threshold, **meta)
