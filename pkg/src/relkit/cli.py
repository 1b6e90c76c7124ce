"""Command-line surface: build-kg, mine-paths, sample-oneshot, train, eval,
and gradcheck. One command per process; every source of randomness derives
from the experiment seed."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, finite_difference_check, rng_for, tensor_sum
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .commonsense import CommonsenseMiner, ingest_conceptnet, load_merge_map, path_score, train_transe
from .config import ExperimentConfig, load_config
from .data import (
    FileFeatures,
    OneShotDataset,
    SyntheticFeatures,
    Vocabulary,
    attach_features,
    build_one_shot_split,
    compute_frequency_bias,
    load_triplet_corpus,
    write_annotations,
)
from .errors import RelkitError
from .evaluation import evaluate_model
from .model import ModelConfig, SceneGraphModel
from .relational import RandomVectors, WordVectorFile, build_relational_graph, embed_categories

log = logging.getLogger("relkit")

GRADCHECK_THRESHOLD = 1e-4
SGDET_MESSAGE = "SGDet requires an object detector (out of scope)"


def resolve_seed(args, config: ExperimentConfig) -> int:
    """Precedence: --seed flag, then RELKIT_SEED, then the config file."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("RELKIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise RelkitError(f"RELKIT_SEED must be an integer, got {env!r}")
    return config.seed


# ---------------------------------------------------------------------------
# Pipeline assembly

@dataclass
class Pipeline:
    config: ExperimentConfig
    seed: int
    vocab: Vocabulary
    train_images: list
    supervision: dict[str, list]
    split: OneShotDataset | None
    model: SceneGraphModel
    feature_source: object


def feature_source_for(config: ExperimentConfig, seed: int):
    if config.paths.features is not None:
        return FileFeatures(config.paths.features, expected_dim=config.data.feature_dim)
    return SyntheticFeatures(seed=seed, dim=config.data.feature_dim)


def vector_source_for(config: ExperimentConfig, seed: int):
    if config.paths.word_vectors is not None:
        return WordVectorFile(config.paths.word_vectors)
    return RandomVectors(seed=seed, dim=config.knowledge.word_dim)


def build_pipeline(config: ExperimentConfig, seed: int) -> Pipeline:
    vocab = Vocabulary.from_json(config.paths.vocab)
    corpus = load_triplet_corpus(config.paths.annotations, vocab)

    split = None
    if config.data.one_shot:
        shuffle_seed = seed if config.data.one_shot_shuffle else None
        split = build_one_shot_split(corpus, seed=shuffle_seed)
        train_images = split.images
        supervision_images = split.supervision_images()
        supervision = {img.image_id: img.triplets for img in supervision_images}
    else:
        train_images = corpus
        supervision = {img.image_id: list(img.triplets) for img in corpus}
        supervision_images = corpus

    source = feature_source_for(config, seed)
    train_images = attach_features(train_images, source)

    freq = compute_frequency_bias(
        supervision_images, vocab.n_predicates, epsilon=config.data.freq_epsilon)

    vectors = vector_source_for(config, seed)
    word_dim = vectors.dim

    relational_kg = None
    if config.knowledge.use_relational:
        relational_kg = build_relational_graph(supervision_images, vocab)
        relational_kg.entity_vectors = embed_categories(relational_kg.vocabulary, vectors)

    miner = None
    if config.knowledge.use_commonsense:
        graph = ingest_conceptnet(config.paths.concept_triples, load_merge_map(config.paths.merge_map))
        transe = train_transe(graph, config.transe)
        miner = CommonsenseMiner(graph, transe,
                                 max_edges=config.knowledge.max_path_edges,
                                 threshold=config.knowledge.path_threshold)

    model_config = ModelConfig(
        feature_dim=config.data.feature_dim,
        word_dim=word_dim,
        irt=config.irt,
        use_relational_knowledge=config.knowledge.use_relational,
        use_commonsense_knowledge=config.knowledge.use_commonsense,
        train_label_refiner=config.train.refine_labels,
    )
    model = SceneGraphModel(vocab, freq, model_config, seed=seed,
                            relational_kg=relational_kg, miner=miner, vector_source=vectors)
    return Pipeline(config=config, seed=seed, vocab=vocab, train_images=train_images,
                    supervision=supervision, split=split, model=model, feature_source=source)


# ---------------------------------------------------------------------------
# Commands

def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    pipeline = build_pipeline(config, seed)
    model = pipeline.model
    optimizer = config.optimizer
    max_epochs = args.epochs if args.epochs is not None else optimizer.max_epochs

    start_epoch = 0
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        model.load_state(checkpoint.tensors)
        start_epoch = checkpoint.epoch
        log.info("resumed from %s at epoch %d", args.resume, start_epoch)

    images = pipeline.train_images
    batch_size = optimizer.batch_size
    for epoch in range(start_epoch, max_epochs):
        order = rng_for(seed, "epoch-order", epoch).permutation(len(images))
        epoch_losses = []
        for step, lo in enumerate(range(0, len(images), batch_size)):
            chunk = [images[int(i)] for i in order[lo:lo + batch_size]]
            batch = [(record, pipeline.supervision.get(record.image_id, [])) for record in chunk]
            step_rng = rng_for(seed, "train", epoch, step)
            loss = model.training_step(batch, optimizer, step_rng)
            if loss is not None:
                epoch_losses.append(loss)
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log.info("epoch %d/%d loss %.4f", epoch + 1, max_epochs, mean_loss)
        save_checkpoint(args.out, Checkpoint(
            config_text=config.raw_text,
            epoch=epoch + 1,
            prng_state={"scheme": "per-epoch-derivation", "seed": seed, "next_epoch": epoch + 1},
            tensors=model.state_dict(),
        ))
    print(f"trained {max_epochs - start_epoch} epochs; checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    setups = [args.setup] if args.setup else list(config.eval.setups)
    if "SGDet" in setups:
        print(SGDET_MESSAGE, file=sys.stderr)
        return 1
    pipeline = build_pipeline(config, seed)
    checkpoint = load_checkpoint(args.checkpoint)
    pipeline.model.load_state(checkpoint.tensors)

    if config.paths.test_annotations is None:
        raise RelkitError("paths.test_annotations: required for eval")
    test_corpus = load_triplet_corpus(config.paths.test_annotations, pipeline.vocab)
    test_corpus = attach_features(test_corpus, pipeline.feature_source)
    table = evaluate_model(test_corpus, pipeline.model, setups)
    if args.out:
        Path(args.out).write_text(table.to_json())
    print(table.format_table(), end="")
    return 0


def cmd_sample_oneshot(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    vocab = Vocabulary.from_json(config.paths.vocab)
    corpus = load_triplet_corpus(config.paths.annotations, vocab)
    shuffle_seed = seed if config.data.one_shot_shuffle else None
    split = build_one_shot_split(corpus, seed=shuffle_seed)
    write_annotations(split.images, args.out)
    if args.registry:
        registry = {
            json.dumps(list(key)): {"image_id": image_id, "subject_instance": t.subject_instance,
                                    "object_instance": t.object_instance}
            for key, (image_id, t) in split.triplet_registry.items()
        }
        Path(args.registry).write_text(json.dumps(registry, sort_keys=True, indent=2) + "\n")
    print(f"kept {len(split.images)} of {len(corpus)} images "
          f"({len(split.triplet_registry)} distinct triplet types)")
    return 0


def cmd_build_kg(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    vocab = Vocabulary.from_json(config.paths.vocab)
    corpus = load_triplet_corpus(config.paths.annotations, vocab)
    if config.data.one_shot:
        shuffle_seed = seed if config.data.one_shot_shuffle else None
        images = build_one_shot_split(corpus, seed=shuffle_seed).supervision_images()
    else:
        images = corpus
    kg = build_relational_graph(images, vocab)
    payload = {
        "vocabulary": kg.vocabulary,
        "n_object_classes": kg.n_object_classes,
        "class_adjacency": sorted([int(x), int(y)] for x, y in zip(*np.nonzero(kg.class_adjacency))),
        "predicate_adjacency": sorted([int(x), int(y)] for x, y in zip(*np.nonzero(kg.predicate_adjacency))),
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"wrote {args.out}: {len(payload['class_adjacency'])} class edges, "
          f"{len(payload['predicate_adjacency'])} predicate edges")
    return 0


def cmd_mine_paths(args) -> int:
    config = load_config(args.config)
    labels = [part.strip() for part in args.labels.split(",") if part.strip()]
    if len(labels) < 2:
        raise RelkitError("--labels needs at least two comma-separated names")
    if not config.knowledge.use_commonsense:
        raise RelkitError("knowledge.use_commonsense is false; nothing to mine")
    graph = ingest_conceptnet(config.paths.concept_triples, load_merge_map(config.paths.merge_map))
    transe = train_transe(graph, config.transe)
    miner = CommonsenseMiner(graph, transe, max_edges=args.max_edges, threshold=args.threshold)
    subgraph = miner.subgraph_for(labels)
    paths_payload = []
    for (u, v), paths in sorted(subgraph.provenance.items()):
        for path in paths:
            paths_payload.append({
                "between": [subgraph.concepts[u], subgraph.concepts[v]],
                "score": path_score(transe, path),
                "hops": [
                    {"head": graph.concepts[h.stored_triple()[0]],
                     "relation": graph.relations[h.relation],
                     "tail": graph.concepts[h.stored_triple()[2]],
                     "reversed": not h.forward}
                    for h in path
                ],
            })
    payload = {
        "labels": labels,
        "unmatched": subgraph.unmatched_labels,
        "concepts": subgraph.concepts,
        "adjacency": sorted([int(u), int(v)] for u, v in zip(*np.nonzero(subgraph.adjacency))),
        "paths": paths_payload,
    }
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    worst = run_gradient_checks(verbose=True)
    print(f"max relative error: {worst:.3e} (threshold {GRADCHECK_THRESHOLD:.0e})")
    return 0 if worst < GRADCHECK_THRESHOLD else 1


def run_gradient_checks(verbose: bool = False) -> float:
    """The four engine checks on the pinned desk-scale fixture: GCN stack,
    context encoder, scoring head, and the full composed loss.

    The fixture is posed at an all-units-active point with pinned seeds;
    central differences at eps=1e-5 in 64-bit floats cannot resolve
    gradients below ~5e-7 against cancellation noise, so arbitrary dims or
    seeds would measure noise, not the engine.
    """
    from .gradcheck import gradient_check_suite

    worst = 0.0
    for name, err in gradient_check_suite():
        if verbose:
            print(f"  {name:<24s} rel err {err:.3e}")
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relkit",
        description="Relation prediction over detected instances: knowledge bases, "
                    "one-shot sampling, training, evaluation, gradient checking.",
    )
    parser.add_argument("--version", action="version", version=f"relkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed (flag > RELKIT_SEED > config)")

    p = sub.add_parser("build-kg", help="mine the class/predicate adjacencies and write them as JSON")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("mine-paths", help="enumerate and prune concept paths between labels")
    common(p)
    p.add_argument("--labels", required=True, help="comma-separated label names")
    p.add_argument("--max-edges", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mine_paths)

    p = sub.add_parser("sample-oneshot", help="build the one-shot split and write it as JSON lines")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--registry", default=None, help="also write the exemplar registry as JSON")
    p.set_defaults(func=cmd_sample_oneshot)

    p = sub.add_parser("train", help="train on the (one-shot) corpus and write a checkpoint")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path, rewritten every epoch")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None, help="override optimizer.max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute Recall@K for the configured setups")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--setup", default=None, help="evaluate a single setup instead of eval.setups")
    p.add_argument("--out", default=None, help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradient engine")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RelkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
