"""ROC and PR curves and areas from first principles.

ROC-AUC is accumulated in integer arithmetic (trapezoids over tie-grouped
thresholds) and divided once at the end, so it equals the pairwise
concordance count (ties worth half) not just approximately but exactly.
PR-AUC is average precision: precision at each descending-score prefix
weighted by the recall it adds, tied scores handled as one block.
"""

import numpy as np

from .errors import DegenerateLabelsError


def _check(scores, labels, need_negative=True):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError(
            f"scores and labels must be equal-length 1-D, got {scores.shape} and {labels.shape}"
        )
    if scores.size == 0:
        raise DegenerateLabelsError("empty inputs")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0:
        raise DegenerateLabelsError("degenerate labels: no positive samples")
    if need_negative and neg == 0:
        raise DegenerateLabelsError("degenerate labels: no negative samples")
    return scores, labels, pos, neg


def _tie_blocks(scores, labels):
    """Yield (tp_increment, fp_increment) per distinct score, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    block_ends = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate(([0], block_ends))
    ends = np.concatenate((block_ends, [s.size]))
    for a, b in zip(starts, ends):
        tp = int(y[a:b].sum())
        yield tp, (b - a) - tp


def roc_curve(scores, labels):
    """(fpr, tpr) points from (0,0) to (1,1), one per distinct threshold."""
    scores, labels, pos, neg = _check(scores, labels)
    points = [(0.0, 0.0)]
    tp = fp = 0
    for dtp, dfp in _tie_blocks(scores, labels):
        tp += dtp
        fp += dfp
        points.append((fp / neg, tp / pos))
    return points


def roc_auc(scores, labels):
    """Area under the ROC curve; ties across classes credit half a pair."""
    scores, labels, pos, neg = _check(scores, labels)
    tp = fp = 0
    twice_area = 0  # in units of concordant pairs, doubled
    for dtp, dfp in _tie_blocks(scores, labels):
        twice_area += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
    return twice_area / (2 * pos * neg)


def pr_curve(scores, labels):
    """(recall, precision) points, one per distinct threshold, descending."""
    scores, labels, pos, _ = _check(scores, labels, need_negative=False)
    points = []
    tp = seen = 0
    for dtp, dfp in _tie_blocks(scores, labels):
        tp += dtp
        seen += dtp + dfp
        points.append((tp / pos, tp / seen))
    return points


def pr_auc(scores, labels):
    """Average precision: sum of (recall gained) x (precision) per block."""
    scores, labels, pos, _ = _check(scores, labels, need_negative=False)
    area = 0.0
    tp = seen = 0
    for dtp, dfp in _tie_blocks(scores, labels):
        tp += dtp
        seen += dtp + dfp
        if dtp:
            area += (dtp / pos) * (tp / seen)
    return area
