import numpy as np
import pytest

from relkit.commonsense import CommonsenseMiner, TranSEConfig, train_transe
from relkit.data import ImageRecord, InstanceSet, RelationshipTriplet, Vocabulary, compute_frequency_bias
from relkit.encoder import IRTConfig
from relkit.model import ModelConfig, SceneGraphModel
from relkit.relational import RandomVectors, build_relational_graph, embed_categories
from relkit.synthetic import concept_graph_for, make_corpus, synthetic_vocabulary


def one_hot(classes, n_classes):
    out = np.zeros((len(classes), n_classes))
    for i, c in enumerate(classes):
        out[i, c] = 1.0
    return out


def make_record(image_id, classes, triplets, vocab, boxes=None, size=(100.0, 100.0), features=None):
    """Build a valid ImageRecord; triplets given as (sub_idx, pred, obj_idx)."""
    n = len(classes)
    if boxes is None:
        boxes = np.array([[5.0 + 10 * i, 5.0 + 7 * i, 35.0 + 10 * i, 30.0 + 7 * i] for i in range(n)])
    instances = InstanceSet(
        labels=one_hot(classes, vocab.n_object_classes),
        boxes=np.asarray(boxes, dtype=np.float64).reshape(n, 4),
        features=np.zeros((n, 0)) if features is None else np.asarray(features, dtype=np.float64),
        image_width=size[0],
        image_height=size[1],
        gt_classes=np.array(classes, dtype=np.int64),
    )
    trips = [
        RelationshipTriplet(
            subject_class=classes[s], predicate_class=p, object_class=classes[o],
            subject_instance=s, object_instance=o,
        )
        for s, p, o in triplets
    ]
    return ImageRecord(image_id=image_id, instances=instances, triplets=trips)


@pytest.fixture
def small_vocab():
    return Vocabulary(
        object_classes=["pillow", "bed", "dog", "ball", "tree"],
        predicate_classes=["on", "has", "near"],
    )


def build_toy_model(
    seed=0,
    n_images=5,
    n_object_classes=5,
    n_predicates=4,
    feature_dim=6,
    word_dim=6,
    irt=None,
    use_relational=True,
    use_commonsense=True,
    train_label_refiner=True,
    corpus_seed=100,
):
    """Full pipeline fixture at tiny dimensions; returns (model, corpus, vocab)."""
    vocab = synthetic_vocabulary(n_object_classes, n_predicates)
    corpus = make_corpus(corpus_seed, n_images, vocab, feature_dim=feature_dim)
    freq = compute_frequency_bias(corpus, vocab.n_predicates)
    irt = irt or IRTConfig(depth=1, heads=2, model_dim=8, label_embed_dim=4, box_embed_dim=4)

    relational_kg = None
    if use_relational:
        relational_kg = build_relational_graph(corpus, vocab)
        relational_kg.entity_vectors = embed_categories(
            relational_kg.vocabulary, RandomVectors(seed=seed, dim=word_dim))
    miner = None
    vector_source = None
    if use_commonsense:
        graph = concept_graph_for(vocab)
        transe = train_transe(graph, TranSEConfig(dim=8, epochs=40, seed=seed))
        miner = CommonsenseMiner(graph, transe)
        vector_source = RandomVectors(seed=seed, dim=word_dim)

    config = ModelConfig(
        feature_dim=feature_dim,
        word_dim=word_dim,
        irt=irt,
        use_relational_knowledge=use_relational,
        use_commonsense_knowledge=use_commonsense,
        train_label_refiner=train_label_refiner,
    )
    model = SceneGraphModel(
        vocab, freq, config, seed=seed,
        relational_kg=relational_kg, miner=miner, vector_source=vector_source)
    return model, corpus, vocab


class ScaledVectors:
    """Unit-scale word vectors for gradient-check fixtures."""

    def __init__(self, seed, dim, scale=10.0):
        self.inner = RandomVectors(seed, dim)
        self.dim = dim
        self.scale = scale

    def vector(self, name):
        return self.inner.vector(name) * self.scale


def gradcheck_model(seed=22, corpus_seed=222, n_images=3):
    """Full-pipeline fixture posed at a gradient-check-friendly point.

    Central differences at eps=1e-5 in float64 cannot resolve gradients
    below ~5e-7 against the ~1e-11 cancellation noise of a loss near 2, so
    the fixture lifts the ReLU-preceding biases (all units active, healthy
    activations through the squared union product) and uses unit-scale word
    vectors; the seeds are pinned to keep every live coordinate well above
    that floor.
    """
    model, corpus, vocab = build_toy_model(n_images=n_images, seed=seed, corpus_seed=corpus_seed)
    source = ScaledVectors(seed, 6)
    model.vector_source = source
    model.relational_kg.entity_vectors = embed_categories(model.relational_kg.vocabulary, source)
    for name, p in model.params().items():
        if name.endswith(("b_subject", "b_object", "b_union")):
            p.data += 1.0
        elif name.endswith(("b_ff1", "b_in")):
            p.data += 0.3
    return model, corpus, vocab
