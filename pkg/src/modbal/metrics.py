"""Recognition metrics: open-vocabulary set accuracy/recall, UAR/WAR and F1."""

import json

import numpy as np

from .errors import ArgumentError, UndefinedMetricError, ValidationError


class GroupingTable:
    """Maps labels to group identifiers; the identity when built without a mapping.

    Parameters
    ----------
    mapping : dict or None
        Label to group id. When given it must cover every label looked up.
    """

    def __init__(self, mapping=None):
        self.mapping = None if mapping is None else {str(k): str(v) for k, v in mapping.items()}

    @classmethod
    def from_json(cls, data):
        """Accepts ``{"label": "group", ...}`` or a list of synonym lists."""
        obj = json.loads(data) if isinstance(data, (str, bytes)) else data
        if isinstance(obj, dict):
            return cls(obj)
        if isinstance(obj, list):
            mapping = {}
            for g, group in enumerate(obj):
                if not isinstance(group, list) or not group:
                    raise ValidationError(f"group {g} must be a non-empty list of labels")
                for lab in group:
                    if lab in mapping:
                        raise ValidationError(f"label {lab!r} appears in more than one group")
                    mapping[lab] = group[0]
            return cls(mapping)
        raise ValidationError("grouping must be an object or a list of lists")

    def __call__(self, label):
        if self.mapping is None:
            return label
        try:
            return self.mapping[str(label)]
        except KeyError:
            raise ValidationError(f"label {label!r} missing from the grouping table") from None

    def group(self, labels):
        return {self(x) for x in labels}


def ov_metrics(truth, predicted, grouping=None):
    """Set-level (accuracy, recall, average) after mapping labels through ``grouping``."""
    grouping = grouping or GroupingTable()
    y, y_hat = grouping.group(truth), grouping.group(predicted)
    if not y_hat:
        raise UndefinedMetricError("empty predicted label set")
    if not y:
        raise UndefinedMetricError("empty ground-truth label set")
    hit = len(y & y_hat)
    acc = hit / len(y_hat)
    rec = hit / len(y)
    return acc, rec, (acc + rec) / 2


def confusion_matrix(truth, predicted, n_classes):
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truth, predicted, strict=True):
        cm[t, p] += 1
    return cm


def _check_cm(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ArgumentError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ArgumentError("confusion matrix has negative counts")
    if cm.sum() == 0:
        raise UndefinedMetricError("confusion matrix is all zero")
    return cm.astype(np.float64)


def uar_war(cm):
    """Unweighted (mean per-class recall over supported classes) and weighted average recall."""
    cm = _check_cm(cm)
    support = cm.sum(axis=1)
    has = support > 0
    recall = np.diag(cm)[has] / support[has]
    return float(recall.mean()), float(np.trace(cm) / cm.sum())


def f1(cm, averaging="weighted"):
    """Per-class F1 averaged by support (``weighted``) or uniformly (``macro``).

    Classes with neither support nor predictions are left out of the macro
    mean; a class with zero precision and recall scores 0.
    """
    cm = _check_cm(cm)
    if averaging not in ("weighted", "macro"):
        raise ArgumentError(f"unknown averaging {averaging!r}")
    tp = np.diag(cm)
    support, predicted = cm.sum(axis=1), cm.sum(axis=0)
    denom = support + predicted
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(denom > 0, 2.0 * tp / denom, 0.0)
    if averaging == "weighted":
        return float((per_class * support).sum() / support.sum())
    present = denom > 0
    return float(per_class[present].mean())
