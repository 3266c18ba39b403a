"""ROC-AUC for frame-level detection and clip-level tagging."""

from __future__ import annotations

import json

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def auc(scores, truth) -> float:
    """Mann-Whitney AUC from rank sums; tied scores share average ranks,
    which counts each tied positive/negative pair as one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(truth).ravel().astype(bool)
    if s.shape != y.shape or s.size == 0:
        raise MetricError(f"scores {s.shape} and truth {y.shape} must be equal, non-empty")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: ground truth contains a single class")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _report(task, scores, truth, macro, excluded=()):
    y = np.asarray(truth).astype(bool)
    return {"task": task,
            "auc_micro": auc(scores, y),
            "auc_macro": macro,
            "n_pos": int(y.sum()),
            "n_neg": int(y.size - y.sum()),
            "excluded_classes": list(excluded)}


def when_report(scores, grids, lengths):
    """Pool every unpadded frame (micro); macro averages per-recording
    AUCs over recordings that contain both active and silent frames."""
    scores = np.asarray(scores)
    grids = np.asarray(grids, dtype=bool)
    mask = np.arange(scores.shape[1])[None, :] < np.asarray(lengths)[:, None]
    per_rec = []
    for s, g, m in zip(scores, grids, mask):
        g = g[m]
        if 0 < g.sum() < g.size:
            per_rec.append(auc(s[m], g))
    macro = float(np.mean(per_rec)) if per_rec else None
    return _report("when", scores[mask], grids[mask], macro)


def who_report(scores, targets, classes):
    """Pool all (recording, class) pairs of classes present in the set;
    absent classes are excluded and listed."""
    scores = np.asarray(scores)
    targets = np.asarray(targets).astype(bool)
    present = targets.any(axis=0)
    excluded = [c for c, p in zip(classes, present) if not p]
    per_class = [auc(scores[:, k], targets[:, k]) for k in np.flatnonzero(present)
                 if not targets[:, k].all()]
    macro = float(np.mean(per_class)) if per_class else None
    return _report("who", scores[:, present], targets[:, present], macro, excluded)


def eval_when(model, fs, batch_size=8):
    if fs.strong_grids is None:
        raise MetricError("WHEN evaluation needs strong labels for every recording")
    return when_report(model.predict(fs.features, batch_size), fs.strong_grids, fs.lengths)


def eval_who(model, fs, batch_size=8):
    return who_report(model.predict(fs.features, batch_size), fs.who_targets, fs.classes)


def write_metrics(path, reports):
    with open(path, "w") as fh:
        json.dump(reports, fh, indent=1, sort_keys=True)
        fh.write("\n")
