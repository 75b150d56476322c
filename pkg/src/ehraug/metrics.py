"""ROC curves, AUC and test-time augmentation scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .augment import AugmentConfig, sample_augmentations
from .records import LabelKind, PatientRecord

if TYPE_CHECKING:
    from .trainer import Classifier


@dataclass(frozen=True)
class ScoredExample:
    patient_id: str
    score: float
    label: int  # 1 = Case, 0 = Control


@dataclass(frozen=True)
class RocCurve:
    points: list[tuple[float, float]]  # (fpr, tpr), from (0, 0) to (1, 1)
    auc: float


def _split(examples: Sequence[ScoredExample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([e.score for e in examples], dtype=np.float64)
    labels = np.array([e.label for e in examples])
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if not len(pos) or not len(neg):
        raise ValueError("AUC needs at least one Case and one Control")
    return pos, neg


def auc(examples: Sequence[ScoredExample]) -> float:
    """Mann-Whitney AUC: P(case outscores control), ties counted half."""
    pos, neg = _split(examples)
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # doubled to keep the count integral
    twice = int((2 * below + (at_or_below - below)).sum())
    return twice / (2 * len(pos) * len(neg))


def roc_points(examples: Sequence[ScoredExample]) -> RocCurve:
    """Threshold sweep over distinct scores; equal scores form one step."""
    pos, neg = _split(examples)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.diff(scores) != 0).tolist() + [len(scores) - 1]
    tp = np.cumsum(labels)[ends]
    fp = np.cumsum(1 - labels)[ends]
    points = [(0.0, 0.0)] + [(f / len(neg), t / len(pos)) for f, t in zip(fp, tp)]
    return RocCurve(points, trapezoid_auc(points))


def trapezoid_auc(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def score_examples(
    model: Classifier, patients: Sequence[PatientRecord]
) -> list[ScoredExample]:
    """Plain scoring: one probability per patient from its original ordering."""
    probs = model.score_patients(patients)
    return [ScoredExample(p.patient_id, float(s), _binary_label(p)) for p, s in zip(patients, probs)]


def tta_score(model: Classifier, patient: PatientRecord, alpha: int, seed: int = 0) -> float:
    """Mean Case probability over ``min(alpha, total)`` orderings, identity included."""
    seqs = sample_augmentations(patient, AugmentConfig(alpha=alpha, seed=seed))
    probs = model.score_sequences(seqs)
    return float(np.mean(probs))


def tta_examples(
    model: Classifier, patients: Sequence[PatientRecord], alpha: int, seed: int = 0
) -> list[ScoredExample]:
    return [
        ScoredExample(p.patient_id, tta_score(model, p, alpha, seed), _binary_label(p))
        for p in patients
    ]


def _binary_label(patient: PatientRecord) -> int:
    if patient.label is None or patient.label.kind == LabelKind.EXCLUDED:
        raise ValueError(f"patient {patient.patient_id} has no Case/Control label")
    return int(patient.label.kind == LabelKind.CASE)


def metrics_report(
    plain: Sequence[ScoredExample], tta: Sequence[ScoredExample] | None = None
) -> dict:
    curve = roc_points(plain)
    return {
        "auc": auc(plain),
        "auc_tta": auc(tta) if tta is not None else None,
        "roc": [list(pt) for pt in curve.points],
        "n_case": sum(e.label for e in plain),
        "n_control": sum(1 - e.label for e in plain),
    }
