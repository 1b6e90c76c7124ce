"""Deterministic toy corpora for tests and demos.

Predicates follow the pair geometry (above/below/left/right/inside/around),
not the class pair, so a per-class-pair frequency table cannot solve them
while a model reading box geometry can.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import rng_for
from .commonsense import ConceptGraph
from .data import (
    ImageRecord,
    InstanceSet,
    RelationshipTriplet,
    SyntheticFeatures,
    Vocabulary,
    attach_features,
)
from .errors import ValidationError

OBJECT_NAMES = [
    "cat", "dog", "table", "chair", "lamp", "box", "ball", "tree",
    "bird", "cup", "rug", "fence", "car", "hat", "book", "plant",
]
PREDICATE_NAMES = ["above", "below", "left of", "right of", "inside", "around"]


def synthetic_vocabulary(n_object_classes: int = 8, n_predicates: int = 6) -> Vocabulary:
    if not 1 <= n_object_classes <= len(OBJECT_NAMES):
        raise ValidationError(f"supports up to {len(OBJECT_NAMES)} object classes")
    if not 4 <= n_predicates <= len(PREDICATE_NAMES):
        raise ValidationError("supports 4 to 6 predicates")
    return Vocabulary(
        object_classes=OBJECT_NAMES[:n_object_classes],
        predicate_classes=PREDICATE_NAMES[:n_predicates],
    )


def _contains(outer, inner) -> bool:
    return (outer[0] <= inner[0] and outer[1] <= inner[1]
            and outer[2] >= inner[2] and outer[3] >= inner[3])


def spatial_predicate(subject_box, object_box, n_predicates: int = 6) -> int:
    """The labeling rule: containment first, then the dominant center offset."""
    if n_predicates >= 5 and _contains(object_box, subject_box):
        return 4  # subject sits inside the object box
    if n_predicates >= 6 and _contains(subject_box, object_box):
        return 5  # subject surrounds the object box
    scx, scy = (subject_box[0] + subject_box[2]) / 2, (subject_box[1] + subject_box[3]) / 2
    ocx, ocy = (object_box[0] + object_box[2]) / 2, (object_box[1] + object_box[3]) / 2
    if abs(scy - ocy) >= abs(scx - ocx):
        return 0 if scy < ocy else 1
    return 2 if scx < ocx else 3


def _random_box(rng: np.random.Generator, size: float) -> np.ndarray:
    w = rng.uniform(0.1, 0.45) * size
    h = rng.uniform(0.1, 0.45) * size
    x1 = rng.uniform(0.0, size - w)
    y1 = rng.uniform(0.0, size - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _nested_box(rng: np.random.Generator, outer: np.ndarray) -> np.ndarray:
    ow, oh = outer[2] - outer[0], outer[3] - outer[1]
    w = rng.uniform(0.3, 0.6) * ow
    h = rng.uniform(0.3, 0.6) * oh
    x1 = outer[0] + rng.uniform(0.0, ow - w)
    y1 = outer[1] + rng.uniform(0.0, oh - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def make_corpus(
    seed: int,
    n_images: int,
    vocab: Vocabulary,
    instances_range: tuple[int, int] = (3, 5),
    triplets_range: tuple[int, int] = (2, 4),
    image_size: float = 128.0,
    feature_dim: int | None = 16,
) -> list[ImageRecord]:
    """Images with random boxes, geometry-determined predicate annotations,
    and (unless feature_dim is None) class-correlated synthetic features."""
    records = []
    for index in range(n_images):
        rng = rng_for(seed, "synthetic-image", index)
        n = int(rng.integers(instances_range[0], instances_range[1] + 1))
        classes = [int(c) for c in rng.integers(0, vocab.n_object_classes, size=n)]
        boxes = np.zeros((n, 4))
        for i in range(n):
            if i > 0 and vocab.n_predicates >= 5 and rng.random() < 0.25:
                boxes[i] = _nested_box(rng, boxes[int(rng.integers(0, i))])
            else:
                boxes[i] = _random_box(rng, image_size)
        ordered = [(i, j) for i in range(n) for j in range(n) if i != j]
        want = min(len(ordered), int(rng.integers(triplets_range[0], triplets_range[1] + 1)))
        picked = rng.choice(len(ordered), size=want, replace=False)
        triplets = []
        for p in sorted(picked):
            i, j = ordered[int(p)]
            triplets.append(RelationshipTriplet(
                subject_class=classes[i],
                predicate_class=spatial_predicate(boxes[i], boxes[j], vocab.n_predicates),
                object_class=classes[j],
                subject_instance=i,
                object_instance=j,
            ))
        record = ImageRecord(
            image_id=f"synth-{seed}-{index}",
            instances=InstanceSet(
                labels=np.eye(vocab.n_object_classes)[classes],
                boxes=boxes,
                features=np.zeros((n, 0)),
                image_width=image_size,
                image_height=image_size,
                gt_classes=np.array(classes, dtype=np.int64),
            ),
            triplets=triplets,
        )
        record.validate(vocab)
        records.append(record)
    if feature_dim is not None:
        records = attach_features(records, SyntheticFeatures(seed=seed, dim=feature_dim))
    return records


# ---------------------------------------------------------------------------
# Concept fixtures

def concept_rows(vocab: Vocabulary) -> list[tuple[str, str, str]]:
    """A small, connected concept set over the object class names: a chain
    through the classes plus a shared "object" hub."""
    names = vocab.object_classes
    rows = [(names[i], "RelatedTo", names[(i + 1) % len(names)]) for i in range(len(names))]
    rows += [(name, "IsA", "object") for name in names[: max(2, len(names) // 2)]]
    return rows


def concept_graph_for(vocab: Vocabulary) -> ConceptGraph:
    rows = concept_rows(vocab)
    concepts: list[str] = []
    ids: dict[str, int] = {}

    def cid(name):
        if name not in ids:
            ids[name] = len(concepts)
            concepts.append(name)
        return ids[name]

    relations = ["relatedto", "isa"]
    rel_id = {"RelatedTo": 0, "IsA": 1}
    edges = []
    for h, r, t in rows:
        edges.append((cid(h), rel_id[r], cid(t)))
    return ConceptGraph(concepts=concepts, relations=relations, edges=edges)


def write_concept_files(vocab: Vocabulary, directory) -> tuple[Path, Path]:
    """TSV triples plus a merge map, as the ingest CLI expects them."""
    directory = Path(directory)
    triples = directory / "concepts.tsv"
    triples.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in concept_rows(vocab)))
    merge = directory / "merge_map.json"
    merge.write_text(json.dumps({"RelatedTo": "relatedto", "IsA": "isa"}))
    return triples, merge
