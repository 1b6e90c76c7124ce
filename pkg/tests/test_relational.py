import numpy as np
import pytest

from conftest import make_record
from relkit.autodiff import Tape, finite_difference_check, rng_for, tensor_sum
from relkit.data import Vocabulary
from relkit.errors import NotFoundError, ParseError, ValidationError
from relkit.relational import (
    RandomVectors,
    RelationalEncoder,
    RelationalKG,
    WordVectorFile,
    build_relational_graph,
    embed_categories,
    select_knowledge_features,
)


class TestBuildGraph:
    def test_pillow_on_bed_three_bits(self, small_vocab):
        # ids: pillow=0, bed=1, "on"=0 -> row 5 in the joint vocabulary
        record = make_record("im0", [0, 1], [(0, 0, 1)], small_vocab)
        kg = build_relational_graph([record], small_vocab)
        assert kg.class_adjacency.sum() == 1
        assert kg.class_adjacency[0, 1] == 1
        assert kg.predicate_adjacency.sum() == 2
        on_row = kg.predicate_row(0)
        assert kg.predicate_adjacency[0, on_row] == 1
        assert kg.predicate_adjacency[on_row, 1] == 1

    def test_empty_corpus_all_zero(self, small_vocab):
        kg = build_relational_graph([], small_vocab)
        assert kg.class_adjacency.sum() == 0
        assert kg.predicate_adjacency.sum() == 0

    def test_duplication_and_order_invariance(self, small_vocab):
        a = make_record("a", [0, 1], [(0, 0, 1)], small_vocab)
        b = make_record("b", [2, 3], [(0, 2, 1)], small_vocab)
        dup = make_record("c", [0, 1], [(0, 0, 1)], small_vocab)
        kg1 = build_relational_graph([a, b, dup], small_vocab)
        kg2 = build_relational_graph([b, a], small_vocab)
        assert np.array_equal(kg1.class_adjacency, kg2.class_adjacency)
        assert np.array_equal(kg1.predicate_adjacency, kg2.predicate_adjacency)

    def test_block_structure(self, small_vocab):
        # class adjacency stays in the class block; predicate adjacency never
        # links class-class or predicate-predicate
        rng = rng_for(41, "relkg")
        corpus = []
        for i in range(15):
            n = int(rng.integers(2, 5))
            classes = [int(c) for c in rng.integers(0, 5, size=n)]
            triplets = []
            for _ in range(int(rng.integers(1, 4))):
                s, o = rng.choice(n, size=2, replace=False)
                triplets.append((int(s), int(rng.integers(0, 3)), int(o)))
            corpus.append(make_record(f"im{i}", classes, triplets, small_vocab))
        kg = build_relational_graph(corpus, small_vocab)
        n_obj = small_vocab.n_object_classes
        assert kg.class_adjacency[n_obj:, :].sum() == 0
        assert kg.class_adjacency[:, n_obj:].sum() == 0
        assert kg.predicate_adjacency[:n_obj, :n_obj].sum() == 0
        assert kg.predicate_adjacency[n_obj:, n_obj:].sum() == 0
        # every bit traces back to some triplet
        for x in range(n_obj):
            for y in range(n_obj):
                if kg.class_adjacency[x, y]:
                    assert any(t.subject_class == x and t.object_class == y
                               for r in corpus for t in r.triplets)


class TestEmbeddings:
    def test_word_vector_passthrough(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("bed 1.0 2.0 3.0\nlight 0.0 1.0 0.0\ntraffic 2.0 1.0 0.0\n")
        source = WordVectorFile(path)
        assert np.allclose(source.vector("bed"), [1.0, 2.0, 3.0])

    def test_multiword_average(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("traffic 2.0 1.0 0.0\nlight 0.0 1.0 0.0\n")
        source = WordVectorFile(path)
        assert np.allclose(source.vector("traffic light"), [1.0, 1.0, 0.0])
        assert np.allclose(source.vector("traffic_light"), [1.0, 1.0, 0.0])

    def test_missing_word_named(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("bed 1.0 2.0\n")
        with pytest.raises(NotFoundError, match="pillow"):
            WordVectorFile(path).vector("pillow")

    def test_ragged_file_rejected(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("bed 1.0 2.0\npillow 1.0\n")
        with pytest.raises(ParseError):
            WordVectorFile(path)

    def test_random_mode_deterministic(self):
        a = embed_categories(["bed", "pillow"], RandomVectors(seed=3, dim=6))
        b = embed_categories(["bed", "pillow"], RandomVectors(seed=3, dim=6))
        c = embed_categories(["bed", "pillow"], RandomVectors(seed=4, dim=6))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_random_mode_per_name(self):
        # the same name embeds identically regardless of list position
        source = RandomVectors(seed=3, dim=6)
        a = embed_categories(["bed", "pillow"], source)
        b = embed_categories(["pillow", "bed"], source)
        assert np.array_equal(a[0], b[1])


def toy_kg(small_vocab, seed=7, word_dim=5):
    record = make_record("im0", [0, 1], [(0, 0, 1)], small_vocab)
    kg = build_relational_graph([record], small_vocab)
    kg.entity_vectors = embed_categories(kg.vocabulary, RandomVectors(seed=seed, dim=word_dim))
    return kg


class TestEncoder:
    def test_zero_adjacency_is_per_row_mlp(self, small_vocab):
        kg = toy_kg(small_vocab)
        kg.class_adjacency = np.zeros_like(kg.class_adjacency)
        kg.predicate_adjacency = np.zeros_like(kg.predicate_adjacency)
        encoder = RelationalEncoder(word_dim=5, out_dim=4, rng=rng_for(1, "enc"))
        out = encoder.encode(kg).features.data
        # with self-loops only, each row depends on that row alone: recompute row 2 in isolation
        solo = RelationalKG(
            vocabulary=[kg.vocabulary[2]], n_object_classes=1,
            class_adjacency=np.zeros((1, 1)), predicate_adjacency=np.zeros((1, 1)),
            entity_vectors=kg.entity_vectors[2:3],
        )
        solo_out = encoder.encode(solo).features.data
        assert np.allclose(out[2], solo_out[0])

    def test_permutation_equivariance(self, small_vocab):
        kg = toy_kg(small_vocab)
        encoder = RelationalEncoder(word_dim=5, out_dim=4, rng=rng_for(2, "enc"))
        base = encoder.encode(kg).features.data
        perm = rng_for(3, "perm").permutation(kg.size)
        p = np.eye(kg.size)[perm]
        shuffled = RelationalKG(
            vocabulary=[kg.vocabulary[i] for i in perm],
            n_object_classes=kg.n_object_classes,
            class_adjacency=p @ kg.class_adjacency @ p.T,
            predicate_adjacency=p @ kg.predicate_adjacency @ p.T,
            entity_vectors=p @ kg.entity_vectors,
        )
        permuted = encoder.encode(shuffled).features.data
        assert np.max(np.abs(permuted - p @ base)) <= 1e-10

    def test_matches_dense_reference(self):
        # independent reference: spell out both stacks with plain numpy
        vocab = Vocabulary(object_classes=["a", "b", "c"], predicate_classes=["r"])
        record_vecs = rng_for(11, "ref").normal(size=(4, 3))
        class_adj = np.zeros((4, 4))
        pred_adj = np.zeros((4, 4))
        class_adj[0, 1] = 1
        pred_adj[0, 3] = 1
        pred_adj[3, 1] = 1
        kg = RelationalKG(["a", "b", "c", "r"], 3, class_adj, pred_adj, record_vecs)
        encoder = RelationalEncoder(word_dim=3, out_dim=2, rng=rng_for(12, "ref-enc"))
        out = encoder.encode(kg).features.data

        def norm_adj(a):
            a = np.maximum(a, a.T) + np.eye(a.shape[0])
            d = 1.0 / np.sqrt(a.sum(axis=1))
            return a * d[:, None] * d[None, :]

        x = record_vecs @ encoder.w_proj.data
        x = np.maximum(norm_adj(class_adj) @ x @ encoder.w_class_1.data, 0)
        x = norm_adj(class_adj) @ x @ encoder.w_class_2.data
        x = np.maximum(norm_adj(pred_adj) @ x @ encoder.w_pred_1.data, 0)
        x = norm_adj(pred_adj) @ x @ encoder.w_pred_2.data
        assert np.allclose(out, x, atol=1e-12)

    def test_gradients_reach_all_weights(self, small_vocab):
        kg = toy_kg(small_vocab, seed=9)
        encoder = RelationalEncoder(word_dim=5, out_dim=3, rng=rng_for(5, "enc"))
        params = list(encoder.params().values())
        err = finite_difference_check(lambda: tensor_sum(encoder.encode(kg).features), params)
        assert err < 1e-6

    def test_missing_entity_vectors(self, small_vocab):
        record = make_record("im0", [0, 1], [(0, 0, 1)], small_vocab)
        kg = build_relational_graph([record], small_vocab)
        encoder = RelationalEncoder(word_dim=5, out_dim=3, rng=rng_for(6, "enc"))
        with pytest.raises(ValidationError):
            encoder.encode(kg)


class TestSelect:
    def test_repeated_labels_identical_rows(self, small_vocab):
        kg = toy_kg(small_vocab)
        encoder = RelationalEncoder(word_dim=5, out_dim=4, rng=rng_for(7, "enc"))
        feats = encoder.encode(kg)
        picked = select_knowledge_features(feats, [1, 1])
        assert np.array_equal(picked.data[0], picked.data[1])
        by_name = select_knowledge_features(feats, ["bed", "bed"])
        assert np.array_equal(by_name.data, picked.data)

    def test_empty_selection(self, small_vocab):
        kg = toy_kg(small_vocab)
        encoder = RelationalEncoder(word_dim=5, out_dim=4, rng=rng_for(8, "enc"))
        picked = select_knowledge_features(encoder.encode(kg), [])
        assert picked.data.shape == (0, 4)

    def test_gather_gradient_hits_selected_rows(self, small_vocab):
        kg = toy_kg(small_vocab)
        encoder = RelationalEncoder(word_dim=5, out_dim=4, rng=rng_for(9, "enc"))
        with Tape() as tape:
            feats = encoder.encode(kg)
            picked = select_knowledge_features(feats, [0, 0, 2])
            tape.backward(tensor_sum(picked))
        # gradient reached the encoder weights (gather is differentiable)
        assert any(np.any(p.grad != 0) for p in encoder.params().values())

    def test_unresolvable_label(self, small_vocab):
        kg = toy_kg(small_vocab)
        encoder = RelationalEncoder(word_dim=5, out_dim=4, rng=rng_for(10, "enc"))
        feats = encoder.encode(kg)
        with pytest.raises(NotFoundError):
            select_knowledge_features(feats, ["spaceship"])
        with pytest.raises(NotFoundError):
            select_knowledge_features(feats, [99])
