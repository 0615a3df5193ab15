"""ROC analysis, subject-level bootstrap and registration quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import check_field, identity_grid, jacobian_determinant

DET_FLOOR = 1e-6


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produced point i + 1; point 0 is (0, 0)
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class BootstrapEstimate:
    mean: float
    stderr: float
    resamples: int
    values: np.ndarray | None = None


def _pool(scores, masks):
    if isinstance(scores, np.ndarray) and scores.ndim <= 2 and not isinstance(masks, list):
        scores, masks = [scores], [masks]
    s_all, y_all = [], []
    for s, m in zip(scores, masks, strict=True):
        s = np.asarray(s, dtype=np.float64)
        m = np.asarray(m)
        if s.shape != m.shape:
            raise ValueError(f"score map {s.shape} and mask {m.shape} differ in shape")
        s_all.append(s.ravel())
        y_all.append(m.ravel().astype(bool))
    return np.concatenate(s_all), np.concatenate(y_all)


def compute_roc(scores, masks) -> RocCurve:
    """Pooled pixel-wise ROC over paired score maps and binary masks.

    Every distinct score value is a threshold. Tied scores move along the
    diagonal, so the trapezoidal AUC equals the Mann-Whitney statistic with
    ties counted as one half. The AUC is accumulated in integer counts.
    """
    s, y = _pool(scores, masks)
    P = int(y.sum())
    N = int(y.size - P)
    if P == 0 or N == 0:
        raise ValueError("ROC needs at least one positive and one negative pixel")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    tp = np.r_[0, tp].astype(np.int64)
    fp = np.r_[0, fp].astype(np.int64)
    # twice the trapezoid area in units of (1/N) x (1/P)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * P * N)
    return RocCurve(fpr=fp / N, tpr=tp / P, thresholds=s_sorted[last], auc=auc)


def auc_bruteforce(scores, labels) -> float:
    """Pairwise-comparison AUC with ties counted as one half (test oracle)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    greater = int(np.sum(pos[:, None] > neg[None, :]))
    ties = int(np.sum(pos[:, None] == neg[None, :]))
    return (2 * greater + ties) / (2 * pos.size * neg.size)


def bootstrap_auc(per_subject, resamples: int = 1000, seed: int = 0, max_retries: int = 100) -> BootstrapEstimate:
    """Resample subjects with replacement and recompute the pooled AUC.

    Resample ``i`` draws from its own generator seeded ``seed + i``. A draw
    without positive (or negative) pixels is redrawn up to ``max_retries`` times.
    """
    subjects = [(np.asarray(s, dtype=np.float64).ravel(), np.asarray(m).ravel().astype(bool))
                for s, m in per_subject]
    if len(subjects) < 2:
        raise ValueError("bootstrap needs at least 2 subjects")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    n = len(subjects)
    values = np.empty(resamples)
    for i in range(resamples):
        rng = np.random.default_rng(seed + i)
        for _ in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            y = np.concatenate([subjects[j][1] for j in idx])
            if 0 < y.sum() < y.size:
                break
        else:
            raise ValueError(f"resample {i}: no draw with both classes after {max_retries} retries")
        s = np.concatenate([subjects[j][0] for j in idx])
        values[i] = compute_roc(s, y).auc
    # identical resamples have exactly zero spread; np.std would leave rounding residue
    stderr = float(values.std()) if np.ptp(values) > 0 else 0.0
    return BootstrapEstimate(mean=float(values.mean()), stderr=stderr, resamples=resamples,
                             values=values)


def warp_labels(labels, field) -> np.ndarray:
    """Nearest-neighbour resampling of an integer label map through ``field``."""
    labels = np.asarray(labels)
    field = check_field(field)
    h, w = labels.shape
    xs, ys = identity_grid(field.shape[1], field.shape[2])
    x = np.clip(np.rint(xs + field[0]), 0, w - 1).astype(np.intp)
    y = np.clip(np.rint(ys + field[1]), 0, h - 1).astype(np.intp)
    return labels[y, x]


def registration_metrics(warped_seg, target_seg, field) -> dict:
    """Dice per class, mean Dice, pixel accuracy (%), variance of log|det J| and folding (%)."""
    a = np.asarray(warped_seg)
    b = np.asarray(target_seg)
    if a.shape != b.shape:
        raise ValueError("label maps must share a grid")
    dice = {}
    for c in np.unique(b):
        pa, pb = a == c, b == c
        denom = pa.sum() + pb.sum()
        if denom == 0:
            continue
        dice[int(c)] = float(2.0 * np.sum(pa & pb) / denom)
    det = jacobian_determinant(field)
    logdet = np.log(np.maximum(np.abs(det), DET_FLOOR))
    return {
        "dice": dice,
        "mean_dice": float(np.mean(list(dice.values()))) if dice else float("nan"),
        "accuracy": float(100.0 * np.mean(a == b)),
        "var_log_jac": float(np.var(logdet)),
        "fold_pct": float(100.0 * np.mean(det < 0)),
    }
