"""Pseudo-label inference and anchor-distance selection.

Every unlabeled target sample gets a soft pseudo label (the model's
prediction vector) and a hard pseudo label (its argmax).  Within each
hard-label class, samples are ranked by mean L1 distance between their
feature vector and the few labeled target anchors of that class, and the
closest ceil(r_u * n_u / K) are kept as the trusted set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coremath import l1_distance
from .network import NetworkParams, forward_classifier, forward_features


@dataclass
class PseudoAnnotation:
    """Per-sample pseudo label plus the feature used for distance ranking.

    ``hard_label`` is argmax of ``soft_label`` with ties broken toward the
    lowest class index.  ``distance`` stays None until a selection pass
    fills it against the sample's hard-label anchors.
    """

    index: int
    soft_label: np.ndarray
    hard_label: int
    feature: np.ndarray
    distance: float | None = None


@dataclass
class SelectedSet:
    """The trusted pseudo-labeled subset and the quota that produced it."""

    annotations: list[PseudoAnnotation]
    index_set: list[int]
    r_u: float
    per_class_quota: int

    def __len__(self) -> int:
        return len(self.annotations)

    def soft_label_matrix(self) -> np.ndarray:
        return np.array([a.soft_label for a in self.annotations])

    def hard_labels(self) -> np.ndarray:
        return np.array([a.hard_label for a in self.annotations], dtype=int)


def infer_pseudo(params: NetworkParams, unlabeled_x: np.ndarray) -> list[PseudoAnnotation]:
    """Forward-pass the unlabeled pool; one annotation per sample, distances unset."""
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    if unlabeled_x.ndim != 2 or unlabeled_x.shape[0] == 0:
        raise ValueError("empty unlabeled set")
    features = forward_features(unlabeled_x, params)
    probs = forward_classifier(features, params)
    return [
        PseudoAnnotation(
            index=i,
            soft_label=probs[i],
            hard_label=int(np.argmax(probs[i])),
            feature=features[i],
        )
        for i in range(len(unlabeled_x))
    ]


def feature_distance(f_u: np.ndarray, anchor_feats: np.ndarray) -> float:
    """Mean L1 distance from one unlabeled feature to its class anchors."""
    anchor_feats = np.asarray(anchor_feats, dtype=np.float64)
    if anchor_feats.size == 0:
        raise ValueError("empty anchors")
    return float(np.mean([l1_distance(a, f_u) for a in anchor_feats]))


def per_class_quota(r_u: float, n_u: int, n_classes: int) -> int:
    return math.ceil(r_u * n_u / n_classes)


def select(
    annotations: list[PseudoAnnotation],
    anchor_features_by_class: dict[int, np.ndarray],
    r_u: float,
    n_u: int,
    n_classes: int,
) -> SelectedSet:
    """Keep, per hard-label class, the quota of samples nearest to its anchors.

    Fills ``distance`` on every annotation.  Sorting is stable on
    (distance, index); classes are merged in ascending order so the
    result is deterministic.  A class with no annotated members simply
    contributes nothing; a populated class without anchors is an error
    because the split protocol guarantees anchors for every class.
    """
    if not 0.0 < r_u <= 1.0:
        raise ValueError(f"r_u must be in (0, 1], got {r_u}")
    quota = per_class_quota(r_u, n_u, n_classes)
    chosen: list[PseudoAnnotation] = []
    for c in range(n_classes):
        members = [a for a in annotations if a.hard_label == c]
        if not members:
            continue
        anchors = anchor_features_by_class.get(c)
        if anchors is None or np.asarray(anchors).size == 0:
            raise ValueError(f"class {c} has annotated samples but no anchors")
        for a in members:
            a.distance = feature_distance(a.feature, anchors)
        members.sort(key=lambda a: (a.distance, a.index))
        chosen.extend(members[: min(quota, len(members))])
    return SelectedSet(
        annotations=chosen,
        index_set=sorted(a.index for a in chosen),
        r_u=r_u,
        per_class_quota=quota,
    )


def reliability(annotations: list[PseudoAnnotation], hidden_truth: np.ndarray) -> float:
    """Fraction of hard pseudo labels that match the quarantined ground truth.

    Evaluation context only: this is the one consumer of hidden labels on
    the pseudo-labeling side.
    """
    if not annotations:
        raise ValueError("empty annotation set")
    hidden_truth = np.asarray(hidden_truth)
    hits = sum(1 for a in annotations if a.hard_label == int(hidden_truth[a.index]))
    return hits / len(annotations)


# -- selection dump --


def selection_to_jsonable(
    selected: SelectedSet,
    all_annotations: list[PseudoAnnotation],
    reliability_before: float | None = None,
    reliability_after: float | None = None,
) -> dict:
    selected_ids = set(selected.index_set)
    by_class: dict[str, list] = {}
    for a in selected.annotations:
        by_class.setdefault(str(a.hard_label), []).append(
            {"index": a.index, "distance": a.distance}
        )
    return {
        "r_u": selected.r_u,
        "per_class_quota": selected.per_class_quota,
        "n_selected": len(selected),
        "selected_by_class": by_class,
        "annotations": [
            {
                "index": a.index,
                "hard_label": a.hard_label,
                "distance": a.distance,
                "soft_label": [float(v) for v in a.soft_label],
                "selected": a.index in selected_ids,
            }
            for a in all_annotations
        ],
        "reliability_before": reliability_before,
        "reliability_after": reliability_after,
    }


def save_selection(path: str | Path, dump: dict) -> None:
    Path(path).write_text(json.dumps(dump), encoding="utf-8")


def load_selection(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"selection dump not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def selected_set_from_dump(dump: dict) -> SelectedSet:
    """Rebuild the trusted set (without features) from a selection dump."""
    annotations = [
        PseudoAnnotation(
            index=entry["index"],
            soft_label=np.asarray(entry["soft_label"], dtype=np.float64),
            hard_label=int(entry["hard_label"]),
            feature=np.empty(0),
            distance=entry["distance"],
        )
        for entry in dump["annotations"]
        if entry["selected"]
    ]
    annotations.sort(key=lambda a: (a.hard_label, a.distance, a.index))
    return SelectedSet(
        annotations=annotations,
        index_set=sorted(a.index for a in annotations),
        r_u=dump["r_u"],
        per_class_quota=dump["per_class_quota"],
    )
