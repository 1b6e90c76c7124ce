"""Co-occurrence knowledge over the class vocabulary, encoded with chained GCNs.

The category set covers object classes followed by predicate classes. One
boolean adjacency links subject classes to object classes, the other links
classes to the predicates observed between them; both are mined from training
annotations only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, constant, gather_rows, gcn_layer, init_param, matmul, rng_for
from .data import ImageRecord, Vocabulary
from .errors import NotFoundError, ParseError, ValidationError


@dataclass
class RelationalKG:
    """Category vocabulary with its two boolean adjacencies and entity vectors."""

    vocabulary: list[str]          # object classes, then predicate classes
    n_object_classes: int
    class_adjacency: np.ndarray    # directed subject -> object bits
    predicate_adjacency: np.ndarray
    entity_vectors: np.ndarray | None = None  # [|vocab|, d_w]

    @property
    def size(self) -> int:
        return len(self.vocabulary)

    def predicate_row(self, predicate_class: int) -> int:
        return self.n_object_classes + predicate_class


@dataclass
class KnowledgeFeatures:
    """Encoded per-category features plus the name -> row lookup."""

    features: Tensor               # [|categories|, d_z]
    category_index: dict[str, int]


def build_relational_graph(images: Sequence[ImageRecord], vocab: Vocabulary) -> RelationalKG:
    """Set one class-class bit and two class-predicate bits per annotated triplet."""
    size = vocab.n_object_classes + vocab.n_predicates
    class_adj = np.zeros((size, size))
    pred_adj = np.zeros((size, size))
    for record in images:
        for t in record.triplets:
            if not (0 <= t.subject_class < vocab.n_object_classes
                    and 0 <= t.object_class < vocab.n_object_classes):
                raise ValidationError(f"{record.image_id}: class id outside vocabulary")
            if not 0 <= t.predicate_class < vocab.n_predicates:
                raise ValidationError(f"{record.image_id}: predicate id outside vocabulary")
            z = vocab.n_object_classes + t.predicate_class
            class_adj[t.subject_class, t.object_class] = 1.0
            pred_adj[t.subject_class, z] = 1.0
            pred_adj[z, t.object_class] = 1.0
    return RelationalKG(
        vocabulary=list(vocab.object_classes) + list(vocab.predicate_classes),
        n_object_classes=vocab.n_object_classes,
        class_adjacency=class_adj,
        predicate_adjacency=pred_adj,
    )


# ---------------------------------------------------------------------------
# Category embeddings

_TOKEN_SPLIT = re.compile(r"[\s_]+")


class WordVectorFile:
    """Text vectors, one line per word: the word then d floats."""

    def __init__(self, path):
        self._path = str(path)
        self._vectors: dict[str, np.ndarray] = {}
        dim = None
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(f"{path}:{lineno}: expected {dim} floats, got {vec.size}")
            self._vectors[parts[0].lower()] = vec
        if dim is None:
            raise ParseError(f"{path}: no vectors found")
        self.dim = dim

    def vector(self, name: str) -> np.ndarray:
        """Multi-word names average their token vectors."""
        tokens = [t for t in _TOKEN_SPLIT.split(name.lower().strip()) if t]
        rows = []
        for token in tokens:
            if token not in self._vectors:
                raise NotFoundError(f"{self._path}: no vector for word {token!r}")
            rows.append(self._vectors[token])
        return np.mean(rows, axis=0)


class RandomVectors:
    """Seeded Gaussian stand-in for pretrained word vectors (sigma = 0.1).

    Vectors are derived per name, so the same word embeds identically no
    matter which category set it appears in.
    """

    def __init__(self, seed: int, dim: int):
        self.seed = seed
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, name: str) -> np.ndarray:
        key = name.lower().strip()
        if key not in self._cache:
            self._cache[key] = rng_for(self.seed, "word-vector", key).normal(0.0, 0.1, size=self.dim)
        return self._cache[key]


def embed_categories(names: Sequence[str], source) -> np.ndarray:
    """Stack one vector per category name from the given source."""
    if not names:
        return np.zeros((0, source.dim))
    return np.stack([source.vector(n) for n in names])


# ---------------------------------------------------------------------------
# Encoding

class RelationalEncoder:
    """Input projection plus two 2-layer GCN stacks, one per adjacency.

    Each stack applies ReLU on its hidden layer and identity on its final
    layer; gradients flow through both stacks into every weight.
    """

    def __init__(self, word_dim: int, out_dim: int, rng: np.random.Generator):
        self.word_dim = word_dim
        self.out_dim = out_dim
        self.w_proj = init_param(rng, (word_dim, out_dim))
        self.w_class_1 = init_param(rng, (out_dim, out_dim))
        self.w_class_2 = init_param(rng, (out_dim, out_dim))
        self.w_pred_1 = init_param(rng, (out_dim, out_dim))
        self.w_pred_2 = init_param(rng, (out_dim, out_dim))

    def params(self) -> dict[str, Tensor]:
        return {
            "relational.w_proj": self.w_proj,
            "relational.w_class_1": self.w_class_1,
            "relational.w_class_2": self.w_class_2,
            "relational.w_pred_1": self.w_pred_1,
            "relational.w_pred_2": self.w_pred_2,
        }

    def encode(self, kg: RelationalKG) -> KnowledgeFeatures:
        if kg.entity_vectors is None:
            raise ValidationError("knowledge graph has no entity vectors; embed categories first")
        if kg.entity_vectors.shape[1] != self.word_dim:
            raise ValidationError(
                f"entity vectors have dim {kg.entity_vectors.shape[1]}, encoder expects {self.word_dim}")
        x = matmul(constant(kg.entity_vectors), self.w_proj)
        x = gcn_layer(x, kg.class_adjacency, self.w_class_1, activation="relu")
        x = gcn_layer(x, kg.class_adjacency, self.w_class_2, activation="identity")
        x = gcn_layer(x, kg.predicate_adjacency, self.w_pred_1, activation="relu")
        x = gcn_layer(x, kg.predicate_adjacency, self.w_pred_2, activation="identity")
        index = {name: i for i, name in enumerate(kg.vocabulary)}
        return KnowledgeFeatures(features=x, category_index=index)


def select_knowledge_features(features: KnowledgeFeatures, instance_labels: Sequence) -> Tensor:
    """Gather one encoded row per instance label (class id or category name)."""
    rows = []
    for label in instance_labels:
        if isinstance(label, str):
            if label not in features.category_index:
                raise NotFoundError(f"no encoded category named {label!r}")
            rows.append(features.category_index[label])
        else:
            idx = int(label)
            if not 0 <= idx < features.features.shape[0]:
                raise NotFoundError(f"category row {idx} out of range")
            rows.append(idx)
    return gather_rows(features.features, rows)
