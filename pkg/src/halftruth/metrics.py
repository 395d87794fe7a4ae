"""ROC / EER / AUC, classification reports and boundary-localisation statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq

from .corpus import CLIP_SECONDS

CLASS_NAMES = ("real", "fake", "half_truth")


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; first entry is +inf
    fpr: np.ndarray
    tpr: np.ndarray


def roc_curve(scores, labels) -> RocCurve:
    """ROC over every distinct score (``score >= t`` is positive); tied scores form one step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return RocCurve(
        np.r_[np.inf, s[ends]],
        np.r_[0.0, fp[ends] / n_neg],
        np.r_[0.0, tp[ends] / n_pos],
    )


def _eer_gap(curve: RocCurve):
    fnr = 1.0 - curve.tpr
    gap = curve.fpr - fnr

    def g(u):
        return np.interp(u, np.arange(len(gap)), gap)

    return g


def eer(curve: RocCurve) -> float:
    """Rate where FPR equals FNR on the piecewise-linear ROC, located with Brent's method."""
    fnr = 1.0 - curve.tpr
    gap = curve.fpr - fnr  # non-decreasing from -1 to +1
    hits = np.flatnonzero(gap == 0.0)
    if hits.size:
        return float(curve.fpr[hits[0]])
    k = int(np.flatnonzero(gap > 0)[0])
    g = _eer_gap(curve)
    u = brentq(g, k - 1, k, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return float(np.interp(u, np.arange(len(gap)), curve.fpr))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under TPR(FPR)."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def binary_eer_auc(scores, labels) -> tuple[float, float]:
    curve = roc_curve(scores, labels)
    return eer(curve), auc(curve)


def macro_ovr_auc(probs, labels, n_classes: int = 3) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    missing = [c for c in range(n_classes) if not np.any(labels == c)]
    if missing:
        raise ValueError(f"classes {missing} absent from labels; macro AUC undefined")
    return float(np.mean([auc(roc_curve(probs[:, c], labels == c)) for c in range(n_classes)]))


def binary_score_from_ternary(probs) -> np.ndarray:
    """Non-real score ``1 - p_real``; Fake and HalfTruth are the positive class."""
    return 1.0 - np.asarray(probs, dtype=np.float64)[..., 0]


@dataclass
class MetricsReport:
    accuracy: float
    confusion: list[list[int]]
    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    macro_auc: float | None = None
    eer: float | None = None
    auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def classification_report(preds, labels, n_classes: int = 3, names=None) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    names = names or (CLASS_NAMES if n_classes == 3 else ("real", "fake"))
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    per_class = {}
    for c, name in enumerate(names):
        tp = cm[c, c]
        predicted, support = cm[:, c].sum(), cm[c, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[name] = {"precision": float(precision), "recall": float(recall), "f1": float(f1), "support": int(support)}
    macro = {k: float(np.mean([v[k] for v in per_class.values()])) for k in ("precision", "recall", "f1")}
    accuracy = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return MetricsReport(accuracy, cm.tolist(), per_class, macro)


@dataclass
class LocalisationReport:
    start: dict[str, float]
    end: dict[str, float]
    overall: dict[str, float]
    n_clips: int
    trusted_fraction: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _stats(errors: np.ndarray) -> dict[str, float]:
    return {
        "mae": float(np.mean(errors)),
        "median": float(np.percentile(errors, 50, method="linear")),
        "p90": float(np.percentile(errors, 90, method="linear")),
    }


def boundary_errors_seconds(pred_bounds, true_bounds) -> np.ndarray:
    """Absolute per-boundary errors in seconds, shape ``[M, 2]``."""
    pred = np.asarray(pred_bounds, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(true_bounds, dtype=np.float64).reshape(-1, 2)
    return np.abs(pred - true) * CLIP_SECONDS


def localisation_report(pred_bounds, true_bounds, p_ht=None) -> LocalisationReport:
    pred = np.asarray(pred_bounds, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(true_bounds, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(pred) != len(true):
        raise ValueError("localisation_report needs at least one prediction/truth pair")
    err = boundary_errors_seconds(pred, true)
    trusted = None if p_ht is None else float(np.mean(np.asarray(p_ht) >= 0.5))
    return LocalisationReport(_stats(err[:, 0]), _stats(err[:, 1]), _stats(err.reshape(-1)), len(pred), trusted)


def trust_split_errors(pred_bounds, true_bounds, p_ht) -> tuple[float | None, float | None]:
    """Mean boundary error (s) for untrusted (p_HT < 0.5) and trusted clips."""
    err = boundary_errors_seconds(pred_bounds, true_bounds).mean(axis=1)
    p_ht = np.asarray(p_ht)
    low, high = err[p_ht < 0.5], err[p_ht >= 0.5]
    return (float(low.mean()) if low.size else None, float(high.mean()) if high.size else None)


def build_report(probs, labels, pred_bounds=None, true_bounds=None) -> dict:
    """Full evaluation document for a set of predictions.

    Three-class inputs get macro OvR AUC plus a real-vs-non-real EER/AUC on
    ``1 - p_real``; two-class inputs get the standard binary EER/AUC. The
    localisation block is present only when boundary predictions are given.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = probs.shape[1]
    rep = classification_report(probs.argmax(axis=1), labels, n_classes)
    non_real = labels != 0
    if n_classes == 3:
        rep.macro_auc = macro_ovr_auc(probs, labels)
        score = binary_score_from_ternary(probs)
    else:
        score = probs[:, 1]
    if non_real.any() and (~non_real).any():
        rep.eer, rep.auc = binary_eer_auc(score, non_real)
        if n_classes == 2:
            rep.macro_auc = rep.auc
    out = {
        "accuracy": rep.accuracy,
        "macro_auc": rep.macro_auc,
        "eer": rep.eer,
        "binary_auc": rep.auc,
        "confusion": rep.confusion,
        "per_class": rep.per_class,
        "macro": rep.macro,
        "n": int(len(labels)),
    }
    if pred_bounds is not None and n_classes == 3:
        ht = labels == 2
        if ht.any():
            p_ht = probs[ht, 2]
            loc = localisation_report(np.asarray(pred_bounds)[ht], np.asarray(true_bounds)[ht], p_ht)
            low, high = trust_split_errors(np.asarray(pred_bounds)[ht], np.asarray(true_bounds)[ht], p_ht)
            out["localisation"] = {**loc.to_dict(), "mean_error_untrusted": low, "mean_error_trusted": high}
        out["trusted_fraction"] = float(np.mean(probs[:, 2] >= 0.5))
    return out
