"""End-to-end relation predictor: context encoder, optional knowledge
features, and the bilinear head, plus its training step.

Per-component seeded RNG streams keep parameter initialization independent of
which components are enabled, so disabling both knowledge sources is
bit-identical to a context-only build under the same seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    OptimizerConfig,
    Tape,
    Tensor,
    add,
    gather_rows,
    mean_of,
    reshape,
    rng_for,
    sgd_step,
    softmax_cross_entropy,
)
from .commonsense import CommonsenseEncoder, CommonsenseMiner
from .data import FreqBias, ImageRecord, InstanceSet, RelationshipTriplet, Vocabulary
from .encoder import IRTConfig, InstanceRelationEncoder, LabelRefiner
from .errors import ConfigError, ValidationError
from .head import PairScores, PredicateHead, binary_cross_entropy_with_logit
from .relational import RelationalEncoder, RelationalKG

log = logging.getLogger(__name__)

PREDCLS = "PredCls"
SGCLS = "SGCls"

BACKGROUND_PAIRS_PER_FOREGROUND = 3


@dataclass
class ModelConfig:
    feature_dim: int
    word_dim: int = 50
    irt: IRTConfig = None
    use_relational_knowledge: bool = True
    use_commonsense_knowledge: bool = True
    train_label_refiner: bool = True

    def __post_init__(self):
        if self.irt is None:
            self.irt = IRTConfig()


@dataclass
class PreparedImage:
    """One batch element with its background pairs already sampled."""

    record: ImageRecord
    supervision: list[RelationshipTriplet]
    background: list[tuple[int, int]]


class SceneGraphModel:
    """Owns every learned tensor and the forward passes for both setups."""

    def __init__(self, vocab: Vocabulary, freq: FreqBias, config: ModelConfig, seed: int,
                 relational_kg: RelationalKG | None = None,
                 miner: CommonsenseMiner | None = None,
                 vector_source=None):
        self.vocab = vocab
        self.config = config
        self.seed = seed
        d = config.irt.model_dim
        self.encoder = InstanceRelationEncoder(
            config.feature_dim, vocab.n_object_classes, config.irt, rng_for(seed, "init-irt"))
        self.refiner = LabelRefiner(
            config.feature_dim, vocab.n_object_classes, config.irt, rng_for(seed, "init-refiner"))
        self.head = PredicateHead(
            d, vocab.n_predicates, config.feature_dim, freq, rng_for(seed, "init-head"))

        self.relational_kg = relational_kg
        self.relational_encoder = None
        if config.use_relational_knowledge:
            if relational_kg is None or relational_kg.entity_vectors is None:
                raise ConfigError("relational knowledge enabled but no embedded knowledge graph given")
            self.relational_encoder = RelationalEncoder(
                config.word_dim, d, rng_for(seed, "init-relational"))

        self.miner = miner
        self.vector_source = vector_source
        self.commonsense_encoder = None
        if config.use_commonsense_knowledge:
            if miner is None or vector_source is None:
                raise ConfigError("commonsense knowledge enabled but no concept miner/vectors given")
            self.commonsense_encoder = CommonsenseEncoder(
                config.word_dim, d, rng_for(seed, "init-commonsense"))

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = self.encoder.params(prefix="irt")
        out.update(self.refiner.params(prefix="refiner"))
        if self.relational_encoder is not None:
            out.update(self.relational_encoder.params())
        if self.commonsense_encoder is not None:
            out.update(self.commonsense_encoder.params())
        out.update(self.head.params(prefix="head"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValidationError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValidationError(f"{name}: checkpoint shape {state[name].shape} vs model {p.data.shape}")
            p.data = state[name].copy()
            p.zero_grad()

    # -- forward pieces -----------------------------------------------------

    def class_names(self, classes) -> list[str]:
        return [self.vocab.object_classes[int(c)] for c in classes]

    def encode_relational(self) -> Tensor | None:
        if self.relational_encoder is None:
            return None
        return self.relational_encoder.encode(self.relational_kg).features

    def fused_features(self, instances: InstanceSet, classes: np.ndarray,
                       labels_override=None, relational_features: Tensor | None = None) -> Tensor:
        """Context features plus whichever knowledge terms are enabled."""
        fused = self.encoder.encode(instances, labels_override=labels_override)
        if self.relational_encoder is not None:
            if relational_features is None:
                relational_features = self.encode_relational()
            fused = add(fused, gather_rows(relational_features, [int(c) for c in classes]))
        if self.commonsense_encoder is not None:
            names = self.class_names(classes)
            subgraph = self.miner.subgraph_for(names)
            fused = add(fused, self.commonsense_encoder.instance_features(
                subgraph, names, self.vector_source))
        return fused

    # -- training -----------------------------------------------------------

    def sample_background_pairs(self, record: ImageRecord,
                                foreground: list[tuple[int, int]],
                                rng: np.random.Generator) -> list[tuple[int, int]]:
        """Unannotated ordered pairs, at most 3x the foreground count, seeded."""
        n = len(record.instances)
        annotated = {(t.subject_instance, t.object_instance) for t in record.triplets}
        candidates = [(i, j) for i in range(n) for j in range(n)
                      if i != j and (i, j) not in annotated]
        want = min(len(candidates), BACKGROUND_PAIRS_PER_FOREGROUND * len(foreground))
        if want == 0:
            return []
        picked = rng.choice(len(candidates), size=want, replace=False)
        return [candidates[int(p)] for p in sorted(picked)]

    def prepare_batch(self, batch: list[tuple[ImageRecord, list[RelationshipTriplet]]],
                      rng: np.random.Generator) -> list["PreparedImage"]:
        """Freeze the background sampling so the loss is a pure function."""
        prepared = []
        for record, supervision in batch:
            if record.instances.gt_classes is None:
                raise ValidationError(f"{record.image_id}: training needs ground-truth classes")
            foreground = [(t.subject_instance, t.object_instance) for t in supervision]
            background = self.sample_background_pairs(record, foreground, rng)
            prepared.append(PreparedImage(record, list(supervision), background))
        return prepared

    def batch_loss(self, prepared: list["PreparedImage"]) -> Tensor:
        """Mean predicate cross-entropy over supervised pairs, plus the mean
        binary cross-entropy of the relatedness gate over supervised and
        sampled background pairs, plus (when enabled) the label-refinement
        cross-entropy."""
        if not any(p.supervision for p in prepared):
            raise ValidationError("batch has no supervised pairs; loss is undefined")
        relational_features = self.encode_relational()
        predicate_terms = []
        gate_terms = []
        refine_terms = []
        for item in prepared:
            record = item.record
            classes = record.instances.gt_classes
            foreground = [(t.subject_instance, t.object_instance) for t in item.supervision]
            if self.config.train_label_refiner:
                refine_terms.append(self.refiner.loss(record.instances))
            if not foreground and not item.background:
                continue
            fused = self.fused_features(record.instances, classes,
                                        relational_features=relational_features)
            subjects, objects = self.head.project_subject_object(fused)
            pairs = foreground + item.background
            pair_classes = [(int(classes[i]), int(classes[j])) for i, j in pairs]
            logits, gates = self.head.pair_scores(
                subjects, objects, record.instances, pairs, pair_classes)
            for p, triplet in enumerate(item.supervision):
                row = reshape(gather_rows(logits, [p]), (self.head.n_predicates,))
                predicate_terms.append(softmax_cross_entropy(row, triplet.predicate_class))
            for p in range(len(pairs)):
                target = 1 if p < len(foreground) else 0
                gate_terms.append(binary_cross_entropy_with_logit(gather_rows(gates, [p]), target))
        loss = add(mean_of(predicate_terms), mean_of(gate_terms))
        if refine_terms:
            loss = add(loss, mean_of(refine_terms))
        return loss

    def training_step(self, batch: list[tuple[ImageRecord, list[RelationshipTriplet]]],
                      optimizer: OptimizerConfig, rng: np.random.Generator) -> float | None:
        """One SGD update; returns None (no update) if the batch carries no
        supervised pairs."""
        if not batch:
            raise ValidationError("training step needs a non-empty batch")
        prepared = self.prepare_batch(batch, rng)
        if not any(p.supervision for p in prepared):
            log.warning("batch has no supervised pairs; skipping step")
            return None
        params = list(self.params().values())
        with Tape() as tape:
            loss = self.batch_loss(prepared)
            tape.backward(loss)
        sgd_step(params, optimizer)
        return loss.item()

    # -- inference ----------------------------------------------------------

    def image_scores(self, record: ImageRecord, setup: str = PREDCLS,
                     relational_features: Tensor | None = None) -> tuple[PairScores, np.ndarray]:
        """Dense pair scores plus the instance classes used for them.

        PredCls feeds ground-truth classes; SGCls predicts classes with the
        refiner and feeds its softmax as the label distribution.
        """
        instances = record.instances
        if instances.gt_classes is None:
            raise ValidationError(f"{record.image_id}: evaluation needs ground-truth classes")
        if setup == PREDCLS:
            classes = instances.gt_classes
            labels_override = None
        elif setup == SGCLS:
            predicted, probs = self.refiner.predict(instances)
            classes = predicted
            labels_override = probs
        else:
            raise ValidationError(f"unknown setup {setup!r}")
        fused = self.fused_features(instances, classes, labels_override=labels_override,
                                    relational_features=relational_features)
        subjects, objects = self.head.project_subject_object(fused)
        scores = self.head.score_all_pairs(subjects, objects, instances, classes)
        return scores, np.asarray(classes)
