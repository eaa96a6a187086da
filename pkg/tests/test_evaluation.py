"""Retrieval metrics, zero-shot protocol, text-neighbor ranking."""

import numpy as np
import numpy.testing as npt
import pytest

from brivl import evaluation
from brivl.evaluation import (
    identity_truth,
    report_kv,
    report_text,
    retrieval_eval,
    topk_text_neighbors,
    zero_shot_classify,
)


def unit_rows(n, d, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestRetrieval:
    def test_exact_duplicates_score_everything_100(self):
        emb = unit_rows(12, 8, seed=1)
        i2t, t2i = retrieval_eval(emb, emb, identity_truth(12), identity_truth(12))
        for report in (i2t, t2i):
            assert all(v == 100.0 for v in report.recall_at.values())
        assert i2t.recall_sum == 600.0

    def test_random_embeddings_hit_chance_rate(self):
        # N=M=100 candidates, one match each: recall@1 averages 1% +- 0.5%
        rates = []
        for seed in range(50):
            img = unit_rows(100, 16, seed=2 * seed)
            txt = unit_rows(100, 16, seed=2 * seed + 1)
            i2t, _ = retrieval_eval(img, txt, identity_truth(100), identity_truth(100))
            rates.append(i2t.recall_at[1])
        mean = float(np.mean(rates))
        assert 0.5 <= mean <= 1.5, f"chance recall@1 drifted to {mean}"

    def test_match_ranked_sixth_is_recall5_miss_recall10_hit(self):
        # 12 diagonal pairs; image 0 scores its true text 6th-highest
        n = 12
        img = np.eye(n, dtype=np.float32)
        txt = np.eye(n, dtype=np.float32)
        img[0] = 0.0
        for rank, j in enumerate([3, 4, 5, 6, 7]):
            img[0, j] = 1.0 - 0.1 * rank  # five decoys above the match
        img[0, 0] = 0.4  # true match lands exactly at rank 6
        i2t, _ = retrieval_eval(img, txt, identity_truth(n), identity_truth(n))
        assert i2t.recall_at[5] == pytest.approx(100.0 * 11 / 12)
        assert i2t.recall_at[10] == 100.0

    def test_ties_break_by_candidate_index(self):
        # all scores equal: the stable order is candidate index, so query
        # i's own match sits at rank i
        n = 12
        img = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (n, 1))
        txt = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (n, 1))
        i2t, t2i = retrieval_eval(img, txt, identity_truth(n), identity_truth(n))
        for r in (i2t, t2i):
            assert r.recall_at[1] == pytest.approx(100.0 / 12)
            assert r.recall_at[5] == pytest.approx(100.0 * 5 / 12)
            assert r.recall_at[10] == pytest.approx(100.0 * 10 / 12)

    def test_recall_sum_equals_sum_of_six_entries(self):
        img = unit_rows(20, 8, seed=5)
        txt = unit_rows(20, 8, seed=6)
        i2t, t2i = retrieval_eval(img, txt, identity_truth(20), identity_truth(20))
        expected = sum(i2t.recall_at.values()) + sum(t2i.recall_at.values())
        assert i2t.recall_sum == t2i.recall_sum == pytest.approx(expected)

    def test_monotone_recall_in_k(self):
        img = unit_rows(30, 8, seed=7)
        txt = unit_rows(30, 8, seed=8)
        i2t, t2i = retrieval_eval(img, txt, identity_truth(30), identity_truth(30))
        for r in (i2t, t2i):
            assert r.recall_at[1] <= r.recall_at[5] <= r.recall_at[10]

    def test_adding_weaker_candidate_preserves_ranks_above(self):
        # nonnegative embeddings keep every existing score positive, so an
        # all-negative candidate is strictly the weakest for every query
        img = np.abs(unit_rows(10, 8, seed=9)) + 0.01
        txt = np.abs(unit_rows(10, 8, seed=10)) + 0.01
        base, _ = retrieval_eval(img, txt, identity_truth(10), identity_truth(10))
        floor = -np.ones((1, 8), dtype=np.float32)
        txt2 = np.concatenate([txt, floor], axis=0)
        scores = img @ txt2.T
        assert (scores[:, -1][:, None] < scores[:, :-1]).all()
        truth_t2i = {i: {i} for i in range(10)}
        truth_t2i[10] = {0}
        grown, _ = retrieval_eval(img, txt2, identity_truth(10), truth_t2i)
        assert grown.recall_at == base.recall_at

    def test_scaling_candidates_leaves_ranking_unchanged(self):
        img = unit_rows(15, 8, seed=11)
        txt = unit_rows(15, 8, seed=12)
        a, _ = retrieval_eval(img, txt, identity_truth(15), identity_truth(15))
        b, _ = retrieval_eval(img, 7.5 * txt, identity_truth(15), identity_truth(15))
        assert a.recall_at == b.recall_at

    def test_too_few_candidates_rejected(self):
        img = unit_rows(5, 4, seed=13)
        txt = unit_rows(5, 4, seed=14)
        with pytest.raises(ValueError, match="recall@10"):
            retrieval_eval(img, txt, identity_truth(5), identity_truth(5))

    def test_query_without_truth_rejected(self):
        img = unit_rows(12, 4, seed=15)
        txt = unit_rows(12, 4, seed=16)
        truth = identity_truth(12)
        truth[3] = set()
        with pytest.raises(ValueError, match="query 3"):
            retrieval_eval(img, txt, truth, identity_truth(12))


class TestZeroShot:
    def encode_stub(self, class_map):
        def encode(texts):
            return np.stack([class_map[t] for t in texts])

        return encode

    def test_item_equal_to_class_embedding_predicts_that_class(self):
        classes = {"a": np.eye(4)[0], "b": np.eye(4)[1], "c": np.eye(4)[2]}
        items = np.stack([classes["b"], classes["c"], classes["a"]]).astype(np.float32)
        report = zero_shot_classify(
            items, ["b", "c", "a"], ["a", "b", "c"], self.encode_stub(classes)
        )
        assert report.overall_accuracy == 100.0
        assert np.trace(report.confusion) == 3

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            zero_shot_classify(
                np.eye(3, dtype=np.float32), ["a", "a", "a"], ["a"], lambda t: np.eye(1, 3)
            )

    def test_duplicate_class_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            zero_shot_classify(
                np.eye(2, dtype=np.float32),
                ["a", "b"],
                ["a", "a"],
                lambda t: np.eye(2),
            )

    def test_scale_invariance_of_argmax(self):
        classes = {"a": np.array([1.0, 0.2, 0]), "b": np.array([0, 1.0, 0.3]),
                   "c": np.array([0.1, 0, 1.0])}
        items = unit_rows(30, 3, seed=17)
        labels = ["a", "b", "c"] * 10
        r1 = zero_shot_classify(items, labels, list("abc"), self.encode_stub(classes))
        scaled = {k: 9.0 * v for k, v in classes.items()}
        r2 = zero_shot_classify(items, labels, list("abc"), self.encode_stub(scaled))
        npt.assert_array_equal(r1.confusion, r2.confusion)

    def test_per_class_and_overall_consistent(self):
        classes = {"a": np.eye(3)[0], "b": np.eye(3)[1], "c": np.eye(3)[2]}
        items = np.stack(
            [classes["a"], classes["a"], classes["b"], classes["c"]]
        ).astype(np.float32)
        labels = ["a", "b", "b", "c"]
        r = zero_shot_classify(items, labels, list("abc"), self.encode_stub(classes))
        assert r.per_class_accuracy["a"] == 100.0
        assert r.per_class_accuracy["b"] == 50.0
        assert r.overall_accuracy == pytest.approx(75.0)


class TestNeighbors:
    def encode(self, texts):
        rng_map = {}
        out = []
        for t in texts:
            seed = abs(hash(t)) % (2**31)
            out.append(unit_rows(1, 8, seed=seed)[0])
        return np.stack(out)

    def test_query_among_candidates_ranks_itself_first(self):
        cands = ["alpha", "beta", "gamma"]
        ranked = topk_text_neighbors("beta", cands, 3, self.encode)
        assert ranked[0][1] == "beta"
        assert ranked[0][2] == pytest.approx(1.0, abs=1e-6)

    def test_k_equal_to_count_is_a_permutation(self):
        cands = ["a", "b", "c", "d"]
        ranked = topk_text_neighbors("q", cands, 4, self.encode)
        assert sorted(i for i, _, _ in ranked) == [0, 1, 2, 3]

    def test_k_too_large_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            topk_text_neighbors("q", ["a"], 2, self.encode)

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            topk_text_neighbors("q", [], 1, self.encode)


class TestReports:
    def test_text_and_kv_emission(self):
        img = unit_rows(12, 8, seed=18)
        i2t, t2i = retrieval_eval(img, img, identity_truth(12), identity_truth(12))
        text = report_text([i2t, t2i])
        assert "image->text recall@1" in text and "recall_sum" in text
        kv = report_kv([i2t, t2i])
        lines = dict(l.split("=") for l in kv.strip().splitlines())
        assert float(lines["i2t.recall@1"]) == 100.0
        assert float(lines["recall_sum"]) == 600.0
