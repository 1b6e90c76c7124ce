"""Annotation ingest, the one-shot training split, detector-feature files,
and the pairwise predicate frequency table."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import rng_for
from .errors import DimensionError, NotFoundError, ParseError, ValidationError

LABEL_SUM_TOL = 1e-6
FEATURE_MAGIC = b"RKF1"


@dataclass
class Vocabulary:
    """Names for object classes and predicate classes; ids are list positions."""

    object_classes: list[str]
    predicate_classes: list[str]

    def __post_init__(self):
        if not self.object_classes or not self.predicate_classes:
            raise ValidationError("vocabulary needs at least one object class and one predicate")
        for group, names in (("object", self.object_classes), ("predicate", self.predicate_classes)):
            if len(set(names)) != len(names):
                raise ValidationError(f"duplicate {group} class names")

    @property
    def n_object_classes(self) -> int:
        return len(self.object_classes)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_classes)

    @classmethod
    def from_json(cls, path) -> "Vocabulary":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e}") from e
        try:
            return cls(list(raw["object_classes"]), list(raw["predicate_classes"]))
        except KeyError as e:
            raise ParseError(f"{path}: missing key {e}") from e

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"object_classes": self.object_classes, "predicate_classes": self.predicate_classes}))


@dataclass(frozen=True)
class RelationshipTriplet:
    subject_class: int
    predicate_class: int
    object_class: int
    subject_instance: int
    object_instance: int

    def key(self) -> tuple[int, int, int]:
        """Type-level identity: (subject class, predicate, object class)."""
        return (self.subject_class, self.predicate_class, self.object_class)


@dataclass
class InstanceSet:
    """Per-image detector outputs: label probabilities, boxes, features."""

    labels: np.ndarray            # [n, d_a], rows sum to 1
    boxes: np.ndarray             # [n, 4] pixel (x1, y1, x2, y2)
    features: np.ndarray          # [n, d_c]; d_c may be 0 until attached
    image_width: float
    image_height: float
    gt_classes: np.ndarray | None = None  # [n] category ids

    def __len__(self) -> int:
        return self.labels.shape[0]

    def validate(self, image_id: str = "?") -> None:
        n = len(self)
        if self.boxes.shape != (n, 4):
            raise ValidationError(f"{image_id}: boxes shape {self.boxes.shape} for {n} instances")
        if self.features.shape[0] != n:
            raise ValidationError(f"{image_id}: {self.features.shape[0]} feature rows for {n} instances")
        if n and np.max(np.abs(self.labels.sum(axis=1) - 1.0)) > LABEL_SUM_TOL:
            raise ValidationError(f"{image_id}: label probability rows must sum to 1")
        x1, y1, x2, y2 = (self.boxes[:, i] for i in range(4))
        if np.any(x1 >= x2) or np.any(y1 >= y2):
            raise ValidationError(f"{image_id}: degenerate box (x1 >= x2 or y1 >= y2)")
        if np.any(x1 < 0) or np.any(y1 < 0) or np.any(x2 > self.image_width) or np.any(y2 > self.image_height):
            raise ValidationError(f"{image_id}: box outside image bounds")
        for name, arr in (("labels", self.labels), ("boxes", self.boxes), ("features", self.features)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{image_id}: non-finite values in {name}")


@dataclass
class ImageRecord:
    image_id: str
    instances: InstanceSet
    triplets: list[RelationshipTriplet]

    def validate(self, vocab: Vocabulary) -> None:
        self.instances.validate(self.image_id)
        n = len(self.instances)
        for t in self.triplets:
            if t.subject_instance == t.object_instance:
                raise ValidationError(f"{self.image_id}: triplet relates an instance to itself")
            for idx in (t.subject_instance, t.object_instance):
                if not 0 <= idx < n:
                    raise ValidationError(f"{self.image_id}: instance index {idx} out of range for {n} instances")
            if not 0 <= t.predicate_class < vocab.n_predicates:
                raise ValidationError(f"{self.image_id}: predicate id {t.predicate_class} out of range")
            for cls in (t.subject_class, t.object_class):
                if not 0 <= cls < vocab.n_object_classes:
                    raise ValidationError(f"{self.image_id}: class id {cls} out of range")


def _one_hot(classes: Sequence[int], n_classes: int) -> np.ndarray:
    out = np.zeros((len(classes), n_classes))
    for i, c in enumerate(classes):
        out[i, c] = 1.0
    return out


def load_triplet_corpus(path, vocab: Vocabulary) -> list[ImageRecord]:
    """Parse a JSON-Lines annotation file into validated image records.

    One object per line: {"image_id", "width", "height",
    "instances": [{"class", "box": [x1,y1,x2,y2]}],
    "triplets": [{"sub", "pred", "obj"}]} with sub/obj as instance indices.
    """
    records: list[ImageRecord] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
            try:
                record = _record_from_json(raw, vocab)
            except (KeyError, TypeError, IndexError) as e:
                raise ParseError(f"{path}:{lineno}: malformed record ({e!r})") from e
            record.validate(vocab)
            records.append(record)
    return records


def _record_from_json(raw: dict, vocab: Vocabulary) -> ImageRecord:
    classes = [int(inst["class"]) for inst in raw["instances"]]
    for cls in classes:
        if not 0 <= cls < vocab.n_object_classes:
            raise ValidationError(f"{raw['image_id']}: class id {cls} out of range")
    boxes = np.array([[float(v) for v in inst["box"]] for inst in raw["instances"]], dtype=np.float64)
    boxes = boxes.reshape(len(classes), 4)
    instances = InstanceSet(
        labels=_one_hot(classes, vocab.n_object_classes),
        boxes=boxes,
        features=np.zeros((len(classes), 0)),
        image_width=float(raw["width"]),
        image_height=float(raw["height"]),
        gt_classes=np.array(classes, dtype=np.int64),
    )
    triplets = []
    for t in raw.get("triplets", []):
        sub, obj = int(t["sub"]), int(t["obj"])
        if not (0 <= sub < len(classes)) or not (0 <= obj < len(classes)):
            raise ValidationError(f"{raw['image_id']}: instance index out of range")
        triplets.append(RelationshipTriplet(
            subject_class=classes[sub],
            predicate_class=int(t["pred"]),
            object_class=classes[obj],
            subject_instance=sub,
            object_instance=obj,
        ))
    return ImageRecord(image_id=str(raw["image_id"]), instances=instances, triplets=triplets)


def write_annotations(records: Iterable[ImageRecord], path) -> None:
    """Inverse of load_triplet_corpus; used by the one-shot sampler CLI."""
    with open(path, "w", encoding="utf-8") as handle:
        for r in records:
            obj = {
                "image_id": r.image_id,
                "width": r.instances.image_width,
                "height": r.instances.image_height,
                "instances": [
                    {"class": int(c), "box": [float(v) for v in box]}
                    for c, box in zip(r.instances.gt_classes, r.instances.boxes)
                ],
                "triplets": [
                    {"sub": t.subject_instance, "pred": t.predicate_class, "obj": t.object_instance}
                    for t in r.triplets
                ],
            }
            handle.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# One-shot split

@dataclass
class OneShotDataset:
    """Kept images plus the registry mapping each triplet key to its single exemplar."""

    images: list[ImageRecord]
    triplet_registry: dict[tuple[int, int, int], tuple[str, RelationshipTriplet]]

    def supervision_for(self, image_id: str) -> list[RelationshipTriplet]:
        return [t for iid, t in self.triplet_registry.values() if iid == image_id]

    def supervision_images(self) -> list[ImageRecord]:
        """Kept images with their triplets narrowed to the registered exemplars."""
        by_image: dict[str, list[RelationshipTriplet]] = {}
        for iid, t in self.triplet_registry.values():
            by_image.setdefault(iid, []).append(t)
        return [replace(r, triplets=by_image.get(r.image_id, [])) for r in self.images]


def build_one_shot_split(corpus: Sequence[ImageRecord], seed: int | None = None) -> OneShotDataset:
    """Keep each image only if it contributes a not-yet-seen triplet key.

    Kept images register exactly their first-seen keys as supervision; keys
    already registered (and in-image duplicates) add no supervision but stay
    on the record as evaluation ground truth. ``seed`` shuffles corpus order
    first; by default file order decides which exemplar wins.
    """
    if not corpus:
        raise ValidationError("one-shot split needs a non-empty corpus")
    order = list(corpus)
    if seed is not None:
        rng_for(seed, "one-shot-order").shuffle(order)
    images: list[ImageRecord] = []
    registry: dict[tuple[int, int, int], tuple[str, RelationshipTriplet]] = {}
    for record in order:
        fresh = [t for t in record.triplets if t.key() not in registry]
        if not fresh:
            continue
        images.append(record)
        for t in fresh:
            registry.setdefault(t.key(), (record.image_id, t))
    return OneShotDataset(images=images, triplet_registry=registry)


# ---------------------------------------------------------------------------
# Frequency table

@dataclass
class FreqBias:
    """Log predicate distribution per (subject class, object class) pair.

    Each stored vector has n_predicates + 1 cells; the last cell is the
    background mass. Unseen pairs fall back to the uniform distribution.
    """

    table: dict[tuple[int, int], np.ndarray]
    n_predicates: int
    epsilon: float

    def log_probs(self, subject_class: int, object_class: int) -> np.ndarray:
        row = self.table.get((int(subject_class), int(object_class)))
        if row is None:
            return np.full(self.n_predicates + 1, -np.log(self.n_predicates + 1))
        return row

    def predicate_log_probs(self, subject_class: int, object_class: int) -> np.ndarray:
        """Foreground cells only, as used for the predicate-score bias."""
        return self.log_probs(subject_class, object_class)[: self.n_predicates]


BACKGROUND_CAP_RATIO = 4  # background pairs counted per image <= 4x annotated pairs


def compute_frequency_bias(
    images: Sequence[ImageRecord],
    n_predicates: int,
    epsilon: float = 1e-3,
) -> FreqBias:
    """Count predicates per class pair, smooth by epsilon, store logs.

    Ordered instance pairs with no annotated predicate feed the background
    cell, capped per image at BACKGROUND_CAP_RATIO times the number of
    annotated triplets (taken in (i, j) index order for determinism).
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    counts: dict[tuple[int, int], np.ndarray] = {}

    def row(key):
        if key not in counts:
            counts[key] = np.zeros(n_predicates + 1)
        return counts[key]

    for record in images:
        classes = record.instances.gt_classes
        annotated_pairs = set()
        for t in record.triplets:
            row((t.subject_class, t.object_class))[t.predicate_class] += 1.0
            annotated_pairs.add((t.subject_instance, t.object_instance))
        cap = BACKGROUND_CAP_RATIO * len(record.triplets)
        taken = 0
        n = len(record.instances)
        for i in range(n):
            if taken >= cap:
                break
            for j in range(n):
                if taken >= cap:
                    break
                if i == j or (i, j) in annotated_pairs:
                    continue
                row((int(classes[i]), int(classes[j])))[n_predicates] += 1.0
                taken += 1

    table = {}
    for key, c in counts.items():
        probs = (c + epsilon) / (c + epsilon).sum()
        table[key] = np.log(probs)
    return FreqBias(table=table, n_predicates=n_predicates, epsilon=epsilon)


# ---------------------------------------------------------------------------
# Feature files and synthetic features

def write_feature_file(path, features: dict[str, np.ndarray], dim: int) -> None:
    """Binary layout: magic, dim (i32), count (i32), then per image the
    length-prefixed id, n (i32), and n*dim float32 values. Little-endian."""
    with open(path, "wb") as handle:
        handle.write(FEATURE_MAGIC)
        handle.write(struct.pack("<ii", dim, len(features)))
        for image_id, matrix in features.items():
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[1] != dim:
                raise DimensionError(f"{image_id}: feature matrix shape {matrix.shape}, want (n, {dim})")
            encoded = image_id.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<i", matrix.shape[0]))
            handle.write(matrix.astype("<f4").tobytes())


def read_feature_file(path, expected_dim: int | None = None) -> dict[str, np.ndarray]:
    """Load the full feature table; float32 on disk becomes float64 in memory."""
    def take(handle, count, what):
        blob = handle.read(count)
        if len(blob) != count:
            raise ParseError(f"{path}: truncated while reading {what}")
        return blob

    with open(path, "rb") as handle:
        if take(handle, 4, "magic") != FEATURE_MAGIC:
            raise ParseError(f"{path}: not a feature file (bad magic)")
        dim, count = struct.unpack("<ii", take(handle, 8, "header"))
        if expected_dim is not None and dim != expected_dim:
            raise DimensionError(f"{path}: feature dim {dim}, config expects {expected_dim}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (id_len,) = struct.unpack("<I", take(handle, 4, "id length"))
            image_id = take(handle, id_len, "image id").decode("utf-8")
            (n,) = struct.unpack("<i", take(handle, 4, "row count"))
            raw = np.frombuffer(take(handle, 4 * n * dim, "feature rows"), dtype="<f4")
            out[image_id] = raw.astype(np.float64).reshape(n, dim)
    return out


def synthetic_features(seed: int, image_id: str, gt_classes: Sequence[int], dim: int) -> np.ndarray:
    """Detector stand-in: a unit class prototype plus small per-instance noise,
    so same-class instances are more similar than different-class ones."""
    rows = np.empty((len(gt_classes), dim))
    for i, cls in enumerate(gt_classes):
        proto = rng_for(seed, "feature-proto", int(cls)).normal(size=dim)
        proto /= np.linalg.norm(proto)
        noise = rng_for(seed, "feature-noise", image_id, i).normal(size=dim)
        rows[i] = proto + 0.25 * noise / np.linalg.norm(noise)
    return rows


class FileFeatures:
    """Feature source backed by a feature file."""

    def __init__(self, path, expected_dim: int | None = None):
        self._table = read_feature_file(path, expected_dim)
        self.dim = expected_dim if expected_dim is not None else next(
            (m.shape[1] for m in self._table.values()), 0)
        self._path = str(path)

    def features_for(self, image_id: str, gt_classes=None) -> np.ndarray:
        if image_id not in self._table:
            raise NotFoundError(f"{self._path}: no features for image {image_id!r}")
        return self._table[image_id]


class SyntheticFeatures:
    """Feature source generating class-correlated vectors from a seed."""

    def __init__(self, seed: int, dim: int):
        self.seed = seed
        self.dim = dim

    def features_for(self, image_id: str, gt_classes) -> np.ndarray:
        if gt_classes is None:
            raise ValidationError("synthetic features need ground-truth classes")
        return synthetic_features(self.seed, image_id, [int(c) for c in gt_classes], self.dim)


def load_instance_set(record: ImageRecord, source) -> InstanceSet:
    """Return the record's instances with detector features attached."""
    feats = source.features_for(record.image_id, record.instances.gt_classes)
    if feats.shape[0] != len(record.instances):
        raise DimensionError(
            f"{record.image_id}: {feats.shape[0]} feature rows for {len(record.instances)} instances")
    filled = replace(record.instances, features=np.asarray(feats, dtype=np.float64))
    filled.validate(record.image_id)
    return filled


def attach_features(records: Sequence[ImageRecord], source) -> list[ImageRecord]:
    return [replace(r, instances=load_instance_set(r, source)) for r in records]
