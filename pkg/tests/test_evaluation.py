import numpy as np
import pytest

from conftest import build_toy_model, make_record
from relkit.autodiff import rng_for
from relkit.data import FreqBias, RelationshipTriplet
from relkit.errors import ValidationError
from relkit.evaluation import (
    MetricsTable,
    RankedTriplet,
    evaluate_model,
    frequency_baseline_scores,
    rank_triplets,
    recall_at_k,
    run_setup,
)
from relkit.head import PairScores
from relkit.model import PREDCLS, SGCLS


def random_scores(rng, n, k):
    logits = rng.normal(size=(n, n, k))
    relatedness = rng.normal(size=(n, n))
    for i in range(n):
        logits[i, i] = np.nan
        relatedness[i, i] = np.nan
    return PairScores(predicate_logits=logits, relatedness=relatedness)


def gt(s, p, o):
    return RelationshipTriplet(subject_class=0, predicate_class=p, object_class=0,
                               subject_instance=s, object_instance=o)


def oracle_recall(ranked, truth, k):
    """Independent re-scan: count gt entries present in the top-k, one use each."""
    top = [(t.subject_instance, t.object_instance, t.predicate) for t in ranked[:k]]
    remaining = list(top)
    hits = 0
    for t in truth:
        key = (t.subject_instance, t.object_instance, t.predicate_class)
        if key in remaining:
            remaining.remove(key)
            hits += 1
    return hits / len(truth) if truth else 1.0


class TestRankTriplets:
    def test_constraint_limits_to_pairs(self):
        scores = random_scores(rng_for(1, "rank"), 2, 5)
        ranked = rank_triplets(scores, graph_constraint=True)
        assert len(ranked) == 2

    def test_no_constraint_all_cells(self):
        scores = random_scores(rng_for(2, "rank"), 2, 50)
        ranked = rank_triplets(scores, graph_constraint=False)
        assert len(ranked) == 2 * 50

    def test_sorted_descending_with_deterministic_ties(self):
        scores = random_scores(rng_for(3, "rank"), 4, 3)
        ranked = rank_triplets(scores)
        values = [t.score for t in ranked]
        assert values == sorted(values, reverse=True)
        again = rank_triplets(scores)
        assert ranked == again

    def test_argmax_invariant_to_uniform_logit_shift(self):
        scores = random_scores(rng_for(4, "rank"), 3, 4)
        base = rank_triplets(scores)
        shifted = PairScores(
            predicate_logits=scores.predicate_logits.copy(),
            relatedness=scores.relatedness.copy(),
        )
        shifted.predicate_logits[0, 1] = shifted.predicate_logits[0, 1] + 2.5
        moved = rank_triplets(shifted)
        base_choice = {(t.subject_instance, t.object_instance): t.predicate for t in base}
        moved_choice = {(t.subject_instance, t.object_instance): t.predicate for t in moved}
        assert base_choice == moved_choice

    def test_ranked_length_bound(self):
        for n in (2, 3, 5):
            scores = random_scores(rng_for(5, "rank", n), n, 4)
            assert len(rank_triplets(scores)) <= n * (n - 1)


class TestRecallAtK:
    def test_all_matched(self):
        ranked = [RankedTriplet(0, 1, 2, 0.9), RankedTriplet(1, 0, 1, 0.8)]
        truth = [gt(0, 2, 1), gt(1, 1, 0)]
        assert recall_at_k(ranked, truth, 5) == 1.0

    def test_empty_ranked(self):
        assert recall_at_k([], [gt(0, 1, 1)], 10) == 0.0

    def test_empty_gt_scores_one(self):
        assert recall_at_k([RankedTriplet(0, 1, 0, 0.5)], [], 10) == 1.0

    def test_duplicate_gt_matched_once(self):
        ranked = [RankedTriplet(0, 1, 2, 0.9)]
        truth = [gt(0, 2, 1), gt(0, 2, 1)]
        assert recall_at_k(ranked, truth, 10) == 0.5

    def test_k_validated(self):
        with pytest.raises(ValidationError):
            recall_at_k([], [gt(0, 1, 1)], 0)

    def test_matches_oracle_on_random_instances(self):
        rng = rng_for(6, "recall")
        for _ in range(200):
            n = int(rng.integers(2, 7))
            n_pred = int(rng.integers(1, 5))
            scores = random_scores(rng, n, n_pred)
            ranked = rank_triplets(scores, graph_constraint=bool(rng.integers(0, 2)))
            truth = []
            for _ in range(int(rng.integers(0, 5))):
                s, o = rng.choice(n, size=2, replace=False)
                truth.append(gt(int(s), int(rng.integers(0, n_pred)), int(o)))
            k = int(rng.integers(1, 11))
            assert recall_at_k(ranked, truth, k) == oracle_recall(ranked, truth, k)

    def test_monotone_in_k(self):
        rng = rng_for(7, "recall-mono")
        for _ in range(50):
            n = int(rng.integers(2, 6))
            scores = random_scores(rng, n, 4)
            ranked = rank_triplets(scores)
            truth = []
            for _ in range(int(rng.integers(1, 4))):
                s, o = rng.choice(n, size=2, replace=False)
                truth.append(gt(int(s), int(rng.integers(0, 4)), int(o)))
            values = [recall_at_k(ranked, truth, k) for k in (1, 2, 5, 10, 20)]
            assert all(b >= a for a, b in zip(values, values[1:]))


class FakeModel:
    """Scores chosen directly; class predictions configurable per setup."""

    def __init__(self, scores_by_image, predicted_classes=None):
        self.scores_by_image = scores_by_image
        self.predicted_classes = predicted_classes or {}

    def encode_relational(self):
        return None

    def image_scores(self, record, setup, relational_features=None):
        scores = self.scores_by_image[record.image_id]
        if setup == SGCLS and record.image_id in self.predicted_classes:
            classes = self.predicted_classes[record.image_id]
        else:
            classes = record.instances.gt_classes
        return scores, np.asarray(classes)


def perfect_scores_for(record, n_predicates):
    n = len(record.instances)
    logits = np.full((n, n, n_predicates), -5.0)
    relatedness = np.full((n, n), -3.0)
    for i in range(n):
        logits[i, i] = np.nan
        relatedness[i, i] = np.nan
    for t in record.triplets:
        logits[t.subject_instance, t.object_instance, t.predicate_class] = 5.0
        relatedness[t.subject_instance, t.object_instance] = 4.0
    return PairScores(predicate_logits=logits, relatedness=relatedness)


class TestRunSetup:
    def test_perfect_model_scores_one(self, small_vocab):
        record = make_record("im0", [0, 1, 2], [(0, 0, 1), (2, 1, 0)], small_vocab)
        model = FakeModel({"im0": perfect_scores_for(record, 3)})
        recalls, count = run_setup([record], model, PREDCLS)
        assert count == 1
        assert all(v == 1.0 for v in recalls.values())

    def test_sgcls_dominated_by_predcls(self, small_vocab):
        # same candidate scores; wrong class predictions can only lose matches
        records = [
            make_record("im0", [0, 1, 2], [(0, 0, 1), (1, 2, 2)], small_vocab),
            make_record("im1", [3, 4], [(0, 1, 1)], small_vocab),
        ]
        scores = {r.image_id: perfect_scores_for(r, 3) for r in records}
        wrong = {"im0": np.array([0, 3, 2]), "im1": np.array([1, 4])}
        model = FakeModel(scores, predicted_classes=wrong)
        pred, _ = run_setup(records, model, PREDCLS)
        sg, _ = run_setup(records, model, SGCLS)
        for k in pred:
            assert sg[k] <= pred[k]
        assert sg[20] < 1.0

    def test_empty_gt_images_skipped(self, small_vocab):
        with_gt = make_record("im0", [0, 1], [(0, 0, 1)], small_vocab)
        empty = make_record("im1", [2, 3], [], small_vocab)
        model = FakeModel({
            "im0": perfect_scores_for(with_gt, 3),
            "im1": perfect_scores_for(empty, 3),
        })
        recalls, count = run_setup([with_gt, empty], model, PREDCLS)
        assert count == 1
        assert recalls[20] == 1.0

    def test_unknown_setup_rejected(self, small_vocab):
        record = make_record("im0", [0, 1], [(0, 0, 1)], small_vocab)
        model = FakeModel({"im0": perfect_scores_for(record, 3)})
        with pytest.raises(ValidationError):
            run_setup([record], model, "SGDet")

    def test_real_model_deterministic(self):
        model, corpus, _ = build_toy_model(n_images=4)
        table1 = evaluate_model(corpus, model, [PREDCLS, SGCLS])
        table2 = evaluate_model(corpus, model, [PREDCLS, SGCLS])
        assert table1.to_json() == table2.to_json()

    def test_metrics_table_format(self):
        table = MetricsTable(recalls={"PredCls": {20: 0.5, 50: 0.75, 100: 1.0}}, image_count=3)
        text = table.format_table()
        assert "R@20" in text and "0.5000" in text
        parsed = table.to_json()
        assert '"image_count": 3' in parsed


class TestFrequencyBaseline:
    def test_peaked_table_ranks_gt_first(self, small_vocab):
        record = make_record("im0", [0, 1], [(0, 1, 1)], small_vocab)
        row = np.log(np.array([0.05, 0.8, 0.05, 0.1]))  # predicate 1 dominant, bg 0.1
        freq = FreqBias(table={(0, 1): row}, n_predicates=3, epsilon=1e-3)
        scores = frequency_baseline_scores(record, freq)
        ranked = rank_triplets(scores)
        assert ranked[0].predicate == 1
        assert (ranked[0].subject_instance, ranked[0].object_instance) == (0, 1)

    def test_gate_reflects_background_mass(self, small_vocab):
        record = make_record("im0", [0, 1], [], small_vocab)
        heavy_bg = FreqBias(table={(0, 1): np.log([0.05, 0.05, 0.05, 0.85])},
                            n_predicates=3, epsilon=1e-3)
        light_bg = FreqBias(table={(0, 1): np.log([0.3, 0.3, 0.3, 0.1])},
                            n_predicates=3, epsilon=1e-3)
        s_heavy = frequency_baseline_scores(record, heavy_bg)
        s_light = frequency_baseline_scores(record, light_bg)
        assert s_heavy.relatedness[0, 1] < s_light.relatedness[0, 1]
