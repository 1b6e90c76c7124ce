"""Triplet ranking under the graph constraint and macro-averaged Recall@K
for the PredCls and SGCls setups."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FreqBias, ImageRecord, RelationshipTriplet
from .errors import ValidationError
from .head import PairScores
from .model import PREDCLS, SGCLS, SceneGraphModel

RECALL_KS = (20, 50, 100)


@dataclass(frozen=True)
class RankedTriplet:
    subject_instance: int
    object_instance: int
    predicate: int
    score: float


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def rank_triplets(scores: PairScores, graph_constraint: bool = True) -> list[RankedTriplet]:
    """Candidates sorted by gate times predicate probability, descending.

    With the graph constraint each ordered pair contributes only its argmax
    predicate; without it every (pair, predicate) cell competes. Ties break
    by (subject, object, predicate) index order.
    """
    n = scores.n_instances
    candidates = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            logits = scores.predicate_logits[i, j]
            if not np.all(np.isfinite(logits)) or not np.isfinite(scores.relatedness[i, j]):
                raise ValidationError(f"non-finite scores for pair ({i}, {j})")
            gate = _sigmoid(float(scores.relatedness[i, j]))
            probs = _stable_softmax(logits)
            if graph_constraint:
                k = int(probs.argmax())
                candidates.append(RankedTriplet(i, j, k, gate * float(probs[k])))
            else:
                for k in range(scores.n_predicates):
                    candidates.append(RankedTriplet(i, j, k, gate * float(probs[k])))
    candidates.sort(key=lambda t: (-t.score, t.subject_instance, t.object_instance, t.predicate))
    return candidates


def recall_at_k(
    ranked: Sequence[RankedTriplet],
    gt: Sequence[RelationshipTriplet],
    k: int,
    matchable=None,
) -> float:
    """Fraction of ground-truth triplets matched inside the top k.

    A match needs identical (subject instance, predicate, object instance);
    each ground-truth entry matches at most once. ``matchable`` optionally
    restricts which gt indices may match (used by the SGCls class check).
    Empty ground truth scores 1.0; such images are skipped by the macro
    average upstream.
    """
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    if not gt:
        return 1.0
    taken = [False] * len(gt)
    hits = 0
    for candidate in list(ranked)[:k]:
        for idx, truth in enumerate(gt):
            if taken[idx]:
                continue
            if matchable is not None and not matchable(idx):
                continue
            if (candidate.subject_instance == truth.subject_instance
                    and candidate.object_instance == truth.object_instance
                    and candidate.predicate == truth.predicate_class):
                taken[idx] = True
                hits += 1
                break
    return hits / len(gt)


@dataclass
class MetricsTable:
    recalls: dict[str, dict[int, float]]   # setup -> K -> macro recall
    image_count: int

    def to_json(self) -> str:
        payload = {
            "image_count": self.image_count,
            "recalls": {setup: {str(k): v for k, v in table.items()}
                        for setup, table in self.recalls.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        ks = sorted({k for table in self.recalls.values() for k in table})
        header = "Setup    " + "".join(f"  R@{k:<6d}" for k in ks)
        lines = [header, "-" * len(header)]
        for setup, table in self.recalls.items():
            cells = "".join(f"  {table[k]:<8.4f}" for k in ks)
            lines.append(f"{setup:<9s}{cells}")
        return "\n".join(lines) + "\n"


def run_setup(
    dataset: Sequence[ImageRecord],
    model: SceneGraphModel,
    setup: str,
    ks: Sequence[int] = RECALL_KS,
) -> tuple[dict[int, float], int]:
    """Macro-averaged recalls over images with non-empty ground truth.

    SGCls counts a ground-truth triplet as matched only when the predicted
    classes of both endpoints are also correct.
    """
    if setup not in (PREDCLS, SGCLS):
        raise ValidationError(f"unknown setup {setup!r}")
    relational_features = model.encode_relational()
    sums = {k: 0.0 for k in ks}
    counted = 0
    for record in dataset:
        if not record.triplets:
            continue
        scores, classes = model.image_scores(record, setup=setup,
                                             relational_features=relational_features)
        ranked = rank_triplets(scores, graph_constraint=True)
        matchable = None
        if setup == SGCLS:
            gt_classes = record.instances.gt_classes
            correct = classes == np.asarray(gt_classes)

            def matchable(idx, _c=correct, _t=record.triplets):
                t = _t[idx]
                return bool(_c[t.subject_instance] and _c[t.object_instance])

        counted += 1
        for k in ks:
            sums[k] += recall_at_k(ranked, record.triplets, k, matchable=matchable)
    if counted == 0:
        raise ValidationError("no images with ground-truth triplets to evaluate")
    return {k: sums[k] / counted for k in ks}, counted


def evaluate_model(dataset: Sequence[ImageRecord], model: SceneGraphModel,
                   setups: Sequence[str], ks: Sequence[int] = RECALL_KS) -> MetricsTable:
    recalls = {}
    counted = 0
    for setup in setups:
        recalls[setup], counted = run_setup(dataset, model, setup, ks=ks)
    return MetricsTable(recalls=recalls, image_count=counted)


def frequency_baseline_scores(record: ImageRecord, freq: FreqBias) -> PairScores:
    """PairScores driven purely by the frequency table: predicate logits are
    the stored log-probabilities and the gate is one minus the background
    probability, expressed as a logit."""
    classes = record.instances.gt_classes
    if classes is None:
        raise ValidationError(f"{record.image_id}: baseline needs ground-truth classes")
    n = len(record.instances)
    k = freq.n_predicates
    logits = np.full((n, n, k), np.nan)
    relatedness = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            row = freq.log_probs(int(classes[i]), int(classes[j]))
            logits[i, j] = row[:k]
            p_background = float(np.exp(row[k]))
            p_background = min(max(p_background, 1e-12), 1.0 - 1e-12)
            relatedness[i, j] = np.log((1.0 - p_background) / p_background)
    return PairScores(predicate_logits=logits, relatedness=relatedness)
