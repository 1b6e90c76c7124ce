"""Concept-graph ingest, TransE triple rating, bounded simple-path mining,
and the per-image concept subgraph encoded with a GCN stack."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    OptimizerConfig,
    Tape,
    Tensor,
    concat,
    constant,
    gather_rows,
    gcn_layer,
    init_param,
    matmul,
    relu,
    rng_for,
    sgd_step,
    sqrt,
    sub,
    tensor_mean,
    tensor_sum,
    mul,
    add,
)
from .errors import ConfigError, NotFoundError, ParseError, ValidationError
from .relational import KnowledgeFeatures, embed_categories

DROP = "DROP"
DEFAULT_MAX_PATH_EDGES = 4   # "shorter than five" read as at most four edges
DEFAULT_PATH_THRESHOLD = 0.15


def normalize_concept(name: str) -> str:
    return "_".join(name.lower().strip().split())


@dataclass
class ConceptGraph:
    concepts: list[str]
    relations: list[str]
    edges: list[tuple[int, int, int]]  # (head concept, relation, tail concept)
    concept_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.concept_index:
            self.concept_index = {name: i for i, name in enumerate(self.concepts)}

    def resolve(self, label: str) -> int | None:
        return self.concept_index.get(normalize_concept(label))


def load_merge_map(path) -> dict[str, str]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: merge map must be a JSON object")
    return {str(k): str(v) for k, v in raw.items()}


def ingest_conceptnet(path, merge_map: dict[str, str]) -> ConceptGraph:
    """Read head/relation/tail TSV rows, merging or dropping relations.

    Every raw relation must have a merge-map entry (DROP removes its edges);
    duplicate edges after merging collapse to one.
    """
    concepts: list[str] = []
    concept_ids: dict[str, int] = {}
    relations: list[str] = []
    relation_ids: dict[str, int] = {}
    edges: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()

    def concept_id(name: str) -> int:
        name = normalize_concept(name)
        if name not in concept_ids:
            concept_ids[name] = len(concepts)
            concepts.append(name)
        return concept_ids[name]

    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail")
            head, relation, tail = parts
            if relation not in merge_map:
                raise ConfigError(f"relation {relation!r} has no merge-map entry (use DROP to discard)")
            merged = merge_map[relation]
            if merged == DROP:
                continue
            if merged not in relation_ids:
                relation_ids[merged] = len(relations)
                relations.append(merged)
            edge = (concept_id(head), relation_ids[merged], concept_id(tail))
            if edge not in seen:
                seen.add(edge)
                edges.append(edge)
    return ConceptGraph(concepts=concepts, relations=relations, edges=edges)


# ---------------------------------------------------------------------------
# TransE

@dataclass
class TranSEConfig:
    dim: int = 32
    margin: float = 1.0
    epochs: int = 100
    negatives: int = 1
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("embedding dim must be at least 1")
        if self.negatives < 1:
            raise ValidationError("need at least one negative per positive")


@dataclass
class TranSEModel:
    concept_embeddings: np.ndarray
    relation_embeddings: np.ndarray
    margin: float


def _normalize_rows(data: np.ndarray) -> None:
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    np.divide(data, norms, out=data, where=norms > 0)


def train_transe(graph: ConceptGraph, config: TranSEConfig) -> TranSEModel:
    """Margin ranking over corrupted triples, full-batch SGD per epoch.

    Negatives corrupt head or tail uniformly (never reproducing the original
    triple); both embedding tables are re-normalized to unit rows after every
    epoch.
    """
    if not graph.edges:
        raise ValidationError("cannot train on an empty concept graph")
    n_concepts, n_relations = len(graph.concepts), len(graph.relations)
    init_rng = rng_for(config.seed, "transe-init")
    concept_emb = Tensor(init_rng.normal(size=(n_concepts, config.dim)), requires_grad=True)
    relation_emb = Tensor(init_rng.normal(size=(n_relations, config.dim)), requires_grad=True)
    _normalize_rows(concept_emb.data)
    _normalize_rows(relation_emb.data)

    heads = np.array([e[0] for e in graph.edges])
    rels = np.array([e[1] for e in graph.edges])
    tails = np.array([e[2] for e in graph.edges])
    opt = OptimizerConfig(learning_rate=config.learning_rate, batch_size=1, max_epochs=config.epochs)

    def row_distance(h, r, t):
        delta = sub(add(h, r), t)
        # tiny guard keeps sqrt differentiable if a distance hits exactly zero
        return sqrt(add(tensor_sum(mul(delta, delta), axis=1), constant(1e-12)))

    for epoch in range(config.epochs):
        rng = rng_for(config.seed, "transe-epoch", epoch)
        neg_heads, neg_rels, neg_tails = [], [], []
        for _ in range(config.negatives):
            for h, r, t in zip(heads, rels, tails):
                corrupt_head = bool(rng.integers(0, 2))
                while True:
                    candidate = int(rng.integers(0, n_concepts))
                    new = (candidate, r, t) if corrupt_head else (h, r, candidate)
                    if new != (h, r, t):
                        break
                neg_heads.append(new[0])
                neg_rels.append(r)
                neg_tails.append(new[2])
        with Tape() as tape:
            pos = row_distance(
                gather_rows(concept_emb, np.tile(heads, config.negatives)),
                gather_rows(relation_emb, np.tile(rels, config.negatives)),
                gather_rows(concept_emb, np.tile(tails, config.negatives)),
            )
            neg = row_distance(
                gather_rows(concept_emb, neg_heads),
                gather_rows(relation_emb, neg_rels),
                gather_rows(concept_emb, neg_tails),
            )
            loss = tensor_mean(relu(add(constant(config.margin), sub(pos, neg))))
            tape.backward(loss)
        sgd_step([concept_emb, relation_emb], opt)
        _normalize_rows(concept_emb.data)
        _normalize_rows(relation_emb.data)

    return TranSEModel(
        concept_embeddings=concept_emb.data.copy(),
        relation_embeddings=relation_emb.data.copy(),
        margin=config.margin,
    )


def triple_distance(model: TranSEModel, head: int, relation: int, tail: int) -> float:
    for idx, table in ((head, model.concept_embeddings), (relation, model.relation_embeddings),
                       (tail, model.concept_embeddings)):
        if not 0 <= idx < table.shape[0]:
            raise NotFoundError(f"embedding row {idx} out of range")
    delta = model.concept_embeddings[head] + model.relation_embeddings[relation] - model.concept_embeddings[tail]
    return float(np.linalg.norm(delta))


def score_triplet(model: TranSEModel, head: int, relation: int, tail: int) -> float:
    """Logistic-squashed margin: sigma(margin − ||h + r − t||), in (0, 1)."""
    x = model.margin - triple_distance(model, head, relation, tail)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# Path mining

@dataclass(frozen=True)
class PathHop:
    """One traversal step; ``forward`` is False when the stored edge points
    the other way (the stored triple is then (target, relation, source))."""

    source: int
    target: int
    relation: int
    forward: bool

    def stored_triple(self) -> tuple[int, int, int]:
        if self.forward:
            return (self.source, self.relation, self.target)
        return (self.target, self.relation, self.source)


ConceptPath = tuple[PathHop, ...]


def enumerate_simple_paths(
    graph: ConceptGraph,
    start: int,
    goal: int,
    max_edges: int = DEFAULT_MAX_PATH_EDGES,
) -> list[ConceptPath]:
    """Every concept-simple path from start to goal with at most max_edges
    edges, walking edges in either direction. Output order is lexicographic
    over the (next concept, relation, orientation) hop sequence."""
    n = len(graph.concepts)
    for concept in (start, goal):
        if not 0 <= concept < n:
            raise NotFoundError(f"concept id {concept} out of range")
    if start == goal:
        raise ValidationError("path endpoints must differ")

    adjacency: dict[int, list[tuple[int, int, bool]]] = {}
    for head, relation, tail in graph.edges:
        adjacency.setdefault(head, []).append((tail, relation, True))
        adjacency.setdefault(tail, []).append((head, relation, False))
    for hops in adjacency.values():
        hops.sort(key=lambda h: (h[0], h[1], not h[2]))

    paths: list[ConceptPath] = []
    visited = {start}
    trail: list[PathHop] = []

    def walk(node: int) -> None:
        if len(trail) >= max_edges:
            return
        for neighbor, relation, forward in adjacency.get(node, ()):  # sorted
            if neighbor == goal:
                paths.append(tuple(trail) + (PathHop(node, neighbor, relation, forward),))
                continue
            if neighbor in visited:
                continue
            visited.add(neighbor)
            trail.append(PathHop(node, neighbor, relation, forward))
            walk(neighbor)
            trail.pop()
            visited.remove(neighbor)

    walk(start)
    paths.sort(key=lambda p: [(h.target, h.relation, not h.forward) for h in p])
    return paths


def path_score(model: TranSEModel, path: ConceptPath) -> float:
    """Product of per-hop triple scores; hops are scored in stored orientation."""
    score = 1.0
    for hop in path:
        score *= score_triplet(model, *hop.stored_triple())
    return score


def prune_paths(paths: Sequence[ConceptPath], model: TranSEModel, threshold: float = DEFAULT_PATH_THRESHOLD) -> list[ConceptPath]:
    """Keep paths whose hop-score product is at least the threshold."""
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    return [p for p in paths if path_score(model, p) >= threshold]


# ---------------------------------------------------------------------------
# Per-image subgraph

@dataclass
class CommonsenseSubgraph:
    concepts: list[str]                      # local concept set, by graph id order
    concept_ids: list[int]                   # rows map to these graph ids
    adjacency: np.ndarray                    # symmetric boolean [|concepts|]^2
    provenance: dict[tuple[int, int], list[ConceptPath]]
    label_rows: dict[str, int]               # normalized label -> local row
    unmatched_labels: list[str]

    @property
    def size(self) -> int:
        return len(self.concepts)


def build_commonsense_subgraph(
    instance_labels: Sequence[str],
    graph: ConceptGraph,
    model: TranSEModel,
    max_edges: int = DEFAULT_MAX_PATH_EDGES,
    threshold: float = DEFAULT_PATH_THRESHOLD,
) -> CommonsenseSubgraph:
    """Mine retained paths between every resolvable label pair and organize
    the concepts on them (plus the labels themselves) into one subgraph.

    Labels with no concept match are recorded, not errors.
    """
    resolved: dict[str, int] = {}
    unmatched: list[str] = []
    for label in instance_labels:
        name = normalize_concept(label)
        if name in resolved or name in unmatched:
            continue
        concept = graph.resolve(name)
        if concept is None:
            unmatched.append(name)
        else:
            resolved[name] = concept

    label_concepts = sorted(set(resolved.values()))
    retained: list[ConceptPath] = []
    for i, a in enumerate(label_concepts):
        for b in label_concepts[i + 1:]:
            paths = enumerate_simple_paths(graph, a, b, max_edges=max_edges)
            retained.extend(prune_paths(paths, model, threshold=threshold))

    members = set(label_concepts)
    for path in retained:
        for hop in path:
            members.add(hop.source)
            members.add(hop.target)
    concept_ids = sorted(members)
    local = {cid: i for i, cid in enumerate(concept_ids)}

    adjacency = np.zeros((len(concept_ids), len(concept_ids)))
    provenance: dict[tuple[int, int], list[ConceptPath]] = {}
    for path in retained:
        for hop in path:
            u, v = local[hop.source], local[hop.target]
            adjacency[u, v] = 1.0
            adjacency[v, u] = 1.0
            provenance.setdefault((min(u, v), max(u, v)), []).append(path)

    return CommonsenseSubgraph(
        concepts=[graph.concepts[cid] for cid in concept_ids],
        concept_ids=concept_ids,
        adjacency=adjacency,
        provenance=provenance,
        label_rows={name: local[cid] for name, cid in resolved.items()},
        unmatched_labels=unmatched,
    )


class CommonsenseMiner:
    """Caches subgraphs by label set; mining dominates cost and label sets repeat."""

    def __init__(self, graph: ConceptGraph, model: TranSEModel,
                 max_edges: int = DEFAULT_MAX_PATH_EDGES, threshold: float = DEFAULT_PATH_THRESHOLD):
        self.graph = graph
        self.model = model
        self.max_edges = max_edges
        self.threshold = threshold
        self._cache: dict[tuple[str, ...], CommonsenseSubgraph] = {}

    def subgraph_for(self, instance_labels: Sequence[str]) -> CommonsenseSubgraph:
        key = tuple(sorted({normalize_concept(l) for l in instance_labels}))
        if key not in self._cache:
            self._cache[key] = build_commonsense_subgraph(
                instance_labels, self.graph, self.model,
                max_edges=self.max_edges, threshold=self.threshold)
        return self._cache[key]


# ---------------------------------------------------------------------------
# Encoding

class CommonsenseEncoder:
    """Input projection plus one 2-layer GCN stack over the image subgraph."""

    def __init__(self, word_dim: int, out_dim: int, rng: np.random.Generator):
        self.word_dim = word_dim
        self.out_dim = out_dim
        self.w_proj = init_param(rng, (word_dim, out_dim))
        self.w_gcn_1 = init_param(rng, (out_dim, out_dim))
        self.w_gcn_2 = init_param(rng, (out_dim, out_dim))

    def params(self) -> dict[str, Tensor]:
        return {
            "commonsense.w_proj": self.w_proj,
            "commonsense.w_gcn_1": self.w_gcn_1,
            "commonsense.w_gcn_2": self.w_gcn_2,
        }

    def encode(self, subgraph: CommonsenseSubgraph, vector_source) -> KnowledgeFeatures:
        if subgraph.size == 0:
            raise ValidationError("cannot encode an empty subgraph; use instance_features")
        vectors = embed_categories(subgraph.concepts, vector_source)
        x = matmul(constant(vectors), self.w_proj)
        x = gcn_layer(x, subgraph.adjacency, self.w_gcn_1, activation="relu")
        x = gcn_layer(x, subgraph.adjacency, self.w_gcn_2, activation="identity")
        index = {name: i for i, name in enumerate(subgraph.concepts)}
        return KnowledgeFeatures(features=x, category_index=index)

    def instance_features(self, subgraph: CommonsenseSubgraph, instance_labels: Sequence[str],
                          vector_source) -> Tensor:
        """One row per instance; labels outside the subgraph get exact zeros."""
        if subgraph.size == 0:
            return constant(np.zeros((len(instance_labels), self.out_dim)))
        encoded = self.encode(subgraph, vector_source)
        # a zero row is appended so unmatched labels gather an exact zero vector
        padded = concat([encoded.features, constant(np.zeros((1, self.out_dim)))], axis=0)
        zero_row = subgraph.size
        rows = [subgraph.label_rows.get(normalize_concept(l), zero_row) for l in instance_labels]
        return gather_rows(padded, rows)
