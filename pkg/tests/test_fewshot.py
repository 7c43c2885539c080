"""Few-shot classifier: grouping, argmin correctness, tie handling, composition."""

import numpy as np
import pytest

from speckvet.fewshot import (
    ClassificationResult,
    SupportSet,
    build_support_set,
    classify,
    classify_pattern,
)
from speckvet.model import build_embedding_net, embed_one


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def unit_rows(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def support_from_arrays(**class_embeddings):
    labels = tuple(class_embeddings)
    return SupportSet(
        class_labels=labels,
        embeddings=tuple(np.asarray(class_embeddings[c], dtype=np.float64) for c in labels),
        source_ids=tuple(
            tuple(f"{c}_{i}" for i in range(len(class_embeddings[c]))) for c in labels),
    )


@pytest.fixture(scope="module")
def net():
    return build_embedding_net(seed=80)


def frames(seed, n):
    return np.random.default_rng(seed).random((n, 96, 96), dtype=np.float32) * 20.0


class TestBuildSupportSet:
    def test_two_classes_five_shots(self, net):
        imgs = frames(0, 10)
        labels = ["single_hit"] * 5 + ["multi_hit"] * 5
        support = build_support_set(net, imgs, labels)
        assert support.n_classes == 2
        assert support.shots == (5, 5)
        assert support.class_labels == ("single_hit", "multi_hit")

    def test_one_way_one_shot(self, net):
        support = build_support_set(net, frames(1, 1), ["single_hit"])
        assert support.n_classes == 1
        assert support.shots == (1,)

    def test_rebuild_is_bit_identical(self, net):
        imgs = frames(2, 4)
        labels = ["a", "a", "b", "b"]
        s1 = build_support_set(net, imgs, labels)
        s2 = build_support_set(net, imgs, labels)
        for e1, e2 in zip(s1.embeddings, s2.embeddings):
            assert np.array_equal(e1, e2)

    def test_empty_rejected(self, net):
        with pytest.raises(ValueError, match="at least one"):
            build_support_set(net, np.zeros((0, 96, 96), np.float32), [])

    def test_label_count_mismatch_rejected(self, net):
        with pytest.raises(ValueError, match="labels"):
            build_support_set(net, frames(3, 3), ["a", "b"])

    def test_unequal_shots_warn(self, net):
        with pytest.warns(RuntimeWarning, match="unequal"):
            build_support_set(net, frames(4, 3), ["a", "a", "b"])

    def test_source_ids_recorded(self, net):
        support = build_support_set(net, frames(5, 2), ["a", "b"], source_ids=["s1", "s2"])
        assert support.source_ids == (("s1",), ("s2",))


class TestSupportSetInvariants:
    def test_non_unit_embedding_rejected(self):
        with pytest.raises(ValueError, match="non-unit"):
            support_from_arrays(a=[[2.0, 0.0]])

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError, match="at least one support"):
            support_from_arrays(a=np.zeros((0, 2)))

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            SupportSet(
                class_labels=("a", "a"),
                embeddings=(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])),
                source_ids=(("x",), ("y",)))


class TestClassify:
    def test_query_on_own_support_wins(self):
        q = unit([1.0, 0.0, 0.0])
        support = support_from_arrays(
            single_hit=[q, unit([0.9, 0.1, 0.0])],
            multi_hit=[-q, -unit([0.9, 0.1, 0.0])],
        )
        result = classify(q, support)
        assert result.predicted_label == "single_hit"
        assert 0.0 in result.per_support_distances["single_hit"]
        assert not result.tie

    def test_smaller_mean_wins_between_hit_classes(self):
        q = unit([1.0, 0.2])
        support = support_from_arrays(
            single_hit=unit_rows([[1.0, 0.0], [0.9, 0.3]]),
            multi_hit=unit_rows([[-1.0, 0.2], [-0.8, -0.4]]),
        )
        result = classify(q, support)
        assert result.predicted_label == "single_hit"
        assert result.mean_distances["single_hit"] < result.mean_distances["multi_hit"]

    def test_matches_flat_recomputation(self):
        rng = np.random.default_rng(6)
        q = unit(rng.standard_normal(16))
        sets = {c: unit_rows(rng.standard_normal((5, 16))) for c in ("a", "b", "c")}
        result = classify(q, support_from_arrays(**sets))
        means = {}
        for c, emb in sets.items():
            d = [float(np.sum((e - q) ** 2)) for e in emb]
            assert result.per_support_distances[c] == pytest.approx(d, rel=1e-12)
            means[c] = float(np.mean(d))
        want = min(means, key=means.get)
        assert result.predicted_label == want
        assert result.mean_distances == pytest.approx(means, rel=1e-12)

    def test_distances_lie_in_sphere_range(self):
        rng = np.random.default_rng(7)
        q = unit(rng.standard_normal(8))
        support = support_from_arrays(
            a=unit_rows(rng.standard_normal((4, 8))),
            b=unit_rows(rng.standard_normal((4, 8))))
        result = classify(q, support)
        for values in result.per_support_distances.values():
            assert all(0.0 <= v <= 4.0 + 1e-9 for v in values)

    def test_exact_tie_goes_to_first_registered(self):
        q = unit([1.0, 0.0])
        same = unit_rows([[0.0, 1.0]])
        result = classify(q, support_from_arrays(zz=same, aa=same.copy()))
        assert result.predicted_label == "zz"
        assert result.tie

    def test_support_permutation_within_class_keeps_label(self):
        rng = np.random.default_rng(8)
        q = unit(rng.standard_normal(8))
        a = unit_rows(rng.standard_normal((5, 8)))
        b = unit_rows(rng.standard_normal((5, 8)))
        base = classify(q, support_from_arrays(a=a, b=b))
        shuffled = classify(q, support_from_arrays(a=a[::-1].copy(), b=b[[3, 1, 4, 0, 2]]))
        assert base.predicted_label == shuffled.predicted_label
        assert base.mean_distances["a"] == pytest.approx(shuffled.mean_distances["a"], rel=1e-12)

    def test_class_order_permutation_keeps_label(self):
        rng = np.random.default_rng(9)
        q = unit(rng.standard_normal(8))
        a = unit_rows(rng.standard_normal((3, 8)))
        b = unit_rows(rng.standard_normal((3, 8)))
        assert (classify(q, support_from_arrays(a=a, b=b)).predicted_label
                == classify(q, support_from_arrays(b=b, a=a)).predicted_label)

    def test_duplicating_all_supports_keeps_mean(self):
        rng = np.random.default_rng(10)
        q = unit(rng.standard_normal(8))
        a = unit_rows(rng.standard_normal((3, 8)))
        b = unit_rows(rng.standard_normal((3, 8)))
        once = classify(q, support_from_arrays(a=a, b=b))
        doubled = classify(q, support_from_arrays(a=np.vstack([a, a]), b=b))
        assert doubled.mean_distances["a"] == once.mean_distances["a"]
        assert doubled.predicted_label == once.predicted_label

    def test_duplicating_a_lone_support_keeps_mean(self):
        q = unit([1.0, 1.0])
        s = unit_rows([[0.0, 1.0]])
        once = classify(q, support_from_arrays(a=s, b=unit_rows([[-1.0, 0.0]])))
        doubled = classify(q, support_from_arrays(a=np.vstack([s, s]), b=unit_rows([[-1.0, 0.0]])))
        assert doubled.mean_distances["a"] == once.mean_distances["a"]

    def test_snapping_winner_supports_onto_query_keeps_prediction(self):
        rng = np.random.default_rng(11)
        q = unit(rng.standard_normal(8))
        a = unit_rows(rng.standard_normal((3, 8)))
        b = unit_rows(rng.standard_normal((3, 8)))
        first = classify(q, support_from_arrays(a=a, b=b))
        winner = first.predicted_label
        snapped = {"a": a, "b": b}
        snapped[winner] = np.tile(q, (3, 1))
        second = classify(q, support_from_arrays(**snapped))
        assert second.predicted_label == winner
        assert second.mean_distances[winner] == 0.0

    def test_non_unit_query_rejected(self):
        support = support_from_arrays(a=unit_rows([[1.0, 0.0]]))
        with pytest.raises(ValueError, match="unit-norm"):
            classify(np.array([3.0, 0.0]), support)

    def test_result_argmin_validation(self):
        with pytest.raises(ValueError, match="argmin"):
            ClassificationResult(
                predicted_label="a",
                mean_distances={"a": 2.0, "b": 1.0},
                per_support_distances={"a": (2.0,), "b": (1.0,)},
                tie=False)


class TestClassifyPattern:
    def test_composition_is_bit_exact(self, net):
        imgs = frames(20, 6)
        labels = ["a"] * 3 + ["b"] * 3
        support = build_support_set(net, imgs, labels)
        query = frames(21, 1)[0]
        via_pattern = classify_pattern(net, query, support)
        via_compose = classify(embed_one(net, query), support)
        assert via_pattern.predicted_label == via_compose.predicted_label
        assert via_pattern.mean_distances == via_compose.mean_distances
        assert via_pattern.per_support_distances == via_compose.per_support_distances

    def test_repeated_calls_identical(self, net):
        imgs = frames(22, 4)
        support = build_support_set(net, imgs, ["a", "a", "b", "b"])
        query = frames(23, 1)[0]
        r1 = classify_pattern(net, query, support)
        r2 = classify_pattern(net, query, support)
        assert r1 == r2

    def test_support_frame_queries_its_own_class(self, net):
        own = frames(24, 1)[0]
        other = frames(25, 1)[0]
        support = build_support_set(net, np.stack([own, other]), ["mine", "other"])
        result = classify_pattern(net, own, support)
        assert result.predicted_label == "mine"
        # support was embedded in a batch, the query alone; summation order
        # differs at the last bit, so self-distance is tiny but not exact 0
        assert result.mean_distances["mine"] < 1e-10
