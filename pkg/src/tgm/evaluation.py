"""Per-frame mean average precision."""

from __future__ import annotations

import json

import numpy as np

from .errors import UsageError


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Frames are ranked by descending score; equal scores keep their original
    order.  Returns ``nan`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise UsageError("average_precision needs at least one score")
    if scores.shape != labels.shape:
        raise UsageError(f"{scores.size} scores but {labels.size} labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    n_pos = int(hits.sum())
    if n_pos == 0:
        return float("nan")
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / n_pos)


def per_frame_map(predictions, labels) -> dict:
    """mAP over frames of all videos.

    ``predictions`` and ``labels`` are sequences of ``num_classes x T``
    arrays, one per video.  Classes without positives are left out of the
    mean and reported with ``ap = None``.
    """
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels) or not predictions:
        raise UsageError(f"{len(predictions)} prediction arrays for {len(labels)} label arrays")
    for i, (p, z) in enumerate(zip(predictions, labels)):
        if np.shape(p) != np.shape(z):
            raise UsageError(f"video {i}: predictions {np.shape(p)} vs labels {np.shape(z)}")
    scores = np.concatenate([np.asarray(p, dtype=np.float64) for p in predictions], axis=1)
    truth = np.concatenate([np.asarray(z) for z in labels], axis=1)
    per_class = []
    defined = []
    for c in range(scores.shape[0]):
        ap = average_precision(scores[c], truth[c])
        n_pos = int((truth[c] > 0).sum())
        per_class.append({"class": c, "ap": None if np.isnan(ap) else ap,
                          "num_positives": n_pos})
        if not np.isnan(ap):
            defined.append(ap)
    m = float(np.mean(defined)) if defined else None
    return {"map": m, "per_class": per_class}


def report_json(report: dict) -> str:
    return json.dumps({"map": report["map"], "per_class": report["per_class"]}, indent=2)
