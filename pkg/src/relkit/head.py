"""Feature fusion, subject/object projection, pairwise union features, and
the diagonal-bilinear predicate and relatedness scores.

Union features stand in for backbone crops of the union box: each ordered
pair projects [f_i, f_j, geometry of both boxes, union-box geometry, IoU,
center offset] down to the model width, so the score still sees joint
appearance and spatial extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    init_param,
    matmul,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    transpose,
)
from .data import FreqBias, InstanceSet
from .encoder import box_geometry
from .errors import DimensionError, ValidationError


@dataclass
class PairScores:
    """Raw scores for every ordered instance pair; diagonal cells are NaN
    because self-relations are never produced nor consumed."""

    predicate_logits: np.ndarray   # [n, n, K]
    relatedness: np.ndarray        # [n, n]

    @property
    def n_instances(self) -> int:
        return self.relatedness.shape[0]

    @property
    def n_predicates(self) -> int:
        return self.predicate_logits.shape[2]


def fuse_features(relational: Tensor, commonsense: Tensor, context: Tensor) -> Tensor:
    """Element-wise sum of the three per-instance feature blocks."""
    for other in (relational, commonsense):
        if other.shape != context.shape:
            raise DimensionError(f"fused features must share a shape: {other.shape} vs {context.shape}")
    return add(add(relational, commonsense), context)


def compute_iou(box_a: np.ndarray, box_b: np.ndarray) -> float:
    ix1, iy1 = max(box_a[0], box_b[0]), max(box_a[1], box_b[1])
    ix2, iy2 = min(box_a[2], box_b[2]), min(box_a[3], box_b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return float(inter / (area_a + area_b - inter))


def union_box(box_a: np.ndarray, box_b: np.ndarray) -> np.ndarray:
    return np.array([
        min(box_a[0], box_b[0]), min(box_a[1], box_b[1]),
        max(box_a[2], box_b[2]), max(box_a[3], box_b[3]),
    ])


def pair_geometry(boxes: np.ndarray, pairs, image_width: float, image_height: float) -> np.ndarray:
    """Fixed [P, 27] block per ordered pair: both box geometries, the union
    box geometry, IoU, and the normalized center offset subject -> object."""
    rows = np.empty((len(pairs), 27))
    geom = box_geometry(boxes, image_width, image_height) if len(boxes) else np.zeros((0, 8))
    for p, (i, j) in enumerate(pairs):
        u = union_box(boxes[i], boxes[j])
        u_geom = box_geometry(u[None, :], image_width, image_height)[0]
        offset = [geom[j, 4] - geom[i, 4], geom[j, 5] - geom[i, 5]]
        rows[p] = np.concatenate([geom[i], geom[j], u_geom, [compute_iou(boxes[i], boxes[j])], offset])
    return rows


class PredicateHead:
    """Subject/object projections plus per-predicate diagonal bilinear forms.

    The predicate bias comes from the frequency table (not learned); the
    relatedness bias is a learned scalar.
    """

    def __init__(self, model_dim: int, n_predicates: int, feature_dim: int,
                 freq: FreqBias, rng: np.random.Generator):
        d = model_dim
        self.model_dim = d
        self.n_predicates = n_predicates
        self.feature_dim = feature_dim
        self.freq = freq
        union_in = 2 * feature_dim + 27
        self.w_subject = init_param(rng, (d, d))
        self.b_subject = init_param(rng, (d,), fan_in=d)
        self.w_object = init_param(rng, (d, d))
        self.b_object = init_param(rng, (d,), fan_in=d)
        self.w_union = init_param(rng, (union_in, d))
        self.b_union = init_param(rng, (d,), fan_in=union_in)
        self.w_predicate = init_param(rng, (n_predicates, d), fan_in=d)
        self.w_gate = init_param(rng, (d, 1), fan_in=d)
        self.b_gate = init_param(rng, (1,), fan_in=d)

    def params(self, prefix: str = "head") -> dict[str, Tensor]:
        return {
            f"{prefix}.w_subject": self.w_subject,
            f"{prefix}.b_subject": self.b_subject,
            f"{prefix}.w_object": self.w_object,
            f"{prefix}.b_object": self.b_object,
            f"{prefix}.w_union": self.w_union,
            f"{prefix}.b_union": self.b_union,
            f"{prefix}.w_predicate": self.w_predicate,
            f"{prefix}.w_gate": self.w_gate,
            f"{prefix}.b_gate": self.b_gate,
        }

    def project_subject_object(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        """Independent ReLU projections into subject and object space."""
        subjects = relu(add(matmul(fused, self.w_subject), self.b_subject))
        objects = relu(add(matmul(fused, self.w_object), self.b_object))
        return subjects, objects

    def union_features(self, instances: InstanceSet, pairs) -> Tensor:
        """[P, model_dim] union feature per ordered pair."""
        feats = constant(instances.features)
        subs = [i for i, _ in pairs]
        objs = [j for _, j in pairs]
        geometry = constant(pair_geometry(
            instances.boxes, pairs, instances.image_width, instances.image_height))
        stacked = concat([gather_rows(feats, subs), gather_rows(feats, objs), geometry], axis=1)
        return add(matmul(stacked, self.w_union), self.b_union)

    def pair_scores(self, subjects: Tensor, objects: Tensor, instances: InstanceSet,
                    pairs, pair_classes) -> tuple[Tensor, Tensor]:
        """Predicate logits [P, K] and relatedness logits [P, 1] for the
        given ordered pairs; ``pair_classes`` supplies the (subject class,
        object class) per pair for the frequency bias lookup."""
        if not pairs:
            raise ValidationError("pair_scores needs at least one pair")
        for i, j in pairs:
            if i == j:
                raise ValidationError("self-pairs carry no relation score")
        u = self.union_features(instances, pairs)
        subs = [i for i, _ in pairs]
        objs = [j for _, j in pairs]
        gated_subject = mul(gather_rows(subjects, subs), u)
        gated_object = mul(gather_rows(objects, objs), u)
        product = mul(gated_subject, gated_object)
        bias = np.stack([self.freq.predicate_log_probs(s, o) for s, o in pair_classes])
        logits = add(matmul(product, transpose(self.w_predicate)), constant(bias))
        relatedness = add(matmul(product, self.w_gate), self.b_gate)
        return logits, relatedness

    def score_all_pairs(self, subjects: Tensor, objects: Tensor, instances: InstanceSet,
                        classes: np.ndarray) -> PairScores:
        """Dense PairScores over every ordered pair, NaN on the diagonal."""
        n = len(instances)
        k = self.n_predicates
        logits = np.full((n, n, k), np.nan)
        relatedness = np.full((n, n), np.nan)
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        if pairs:
            pair_classes = [(int(classes[i]), int(classes[j])) for i, j in pairs]
            logit_rows, gate_rows = self.pair_scores(subjects, objects, instances, pairs, pair_classes)
            for p, (i, j) in enumerate(pairs):
                logits[i, j] = logit_rows.data[p]
                relatedness[i, j] = gate_rows.data[p, 0]
        return PairScores(predicate_logits=logits, relatedness=relatedness)


# ---------------------------------------------------------------------------
# Single-pair reference forms (1-D in, used directly by tests and docs)

def distmult_score(subject: Tensor, obj: Tensor, union: Tensor,
                   w_predicate: Tensor, bias_row) -> Tensor:
    """Per-predicate diagonal bilinear score for one pair:
    r_k = (e_s ∘ u)^T diag(w_k) (e_o ∘ u) + b_k."""
    for vec in (subject, obj, union):
        if vec.shape != (w_predicate.shape[1],):
            raise DimensionError(f"expected vectors of dim {w_predicate.shape[1]}, got {vec.shape}")
    product = mul(mul(subject, union), mul(obj, union))
    row = reshape(product, (1, product.shape[0]))
    scores = reshape(matmul(row, transpose(w_predicate)), (w_predicate.shape[0],))
    return add(scores, constant(np.asarray(bias_row, dtype=np.float64)))


def relatedness_score(subject: Tensor, obj: Tensor, union: Tensor,
                      w_gate: Tensor, b_gate: Tensor) -> Tensor:
    """Single diagonal bilinear form plus the learned scalar bias."""
    product = mul(mul(subject, union), mul(obj, union))
    row = reshape(product, (1, product.shape[0]))
    return reshape(add(matmul(row, w_gate), b_gate), (1,))


def binary_cross_entropy_with_logit(logit: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy over the two classes [background, related]."""
    if target not in (0, 1):
        raise ValidationError(f"binary target must be 0 or 1, got {target}")
    pair = concat([constant(np.zeros(1)), reshape(logit, (1,))], axis=0)
    return softmax_cross_entropy(pair, target)
