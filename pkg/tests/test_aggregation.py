"""Tests for the aggregation rules, checked against exhaustive oracles where the rule is combinatorial."""

import itertools

import numpy as np
import pytest

from simulation.aggregation import (
    DefenseConfig,
    FlameParams,
    MultiKrumParams,
    NormClipParams,
    UpdateSet,
    aggregate,
    distance_summary,
    fedavg,
    flame_aggregate,
    flame_min_cluster_size,
    krum_scores,
    multi_krum,
    norm_clip,
    pairwise_distance,
    weak_dp_aggregate,
)
from simulation.errors import AggregationError, ShapeError
from simulation.nn import FlatUpdate
from simulation.rng import RngStream


def _set(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float64)
    return UpdateSet(rows, tuple(range(len(rows))) if ids is None else tuple(ids))


def _oracle_scores(rows, f, squared=True):
    """Minimum over every neighbour subset of size n - f - 2 of the summed distances."""
    n = len(rows)
    k = n - f - 2
    scores = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        best = np.inf
        for subset in itertools.combinations(others, k):
            total = 0.0
            for j in subset:
                d = float(np.sqrt(np.sum((rows[i] - rows[j]) ** 2)))
                total += d * d if squared else d
            best = min(best, total)
        scores.append(best)
    return np.array(scores)


class TestUpdateSet:

    def test_from_updates_sorts_by_id(self):
        updates = {5: FlatUpdate(np.array([5.0])), 1: FlatUpdate(np.array([1.0])), 3: FlatUpdate(np.array([3.0]))}
        s = UpdateSet.from_updates(updates)
        assert s.participant_ids == (1, 3, 5)
        np.testing.assert_array_equal(s.updates[:, 0], [1.0, 3.0, 5.0])

    def test_ids_must_increase(self):
        with pytest.raises(AggregationError):
            UpdateSet(np.zeros((2, 3)), (4, 4))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            UpdateSet(np.zeros((2, 3)), (0, 1, 2))
        with pytest.raises(ShapeError):
            UpdateSet.from_updates({0: FlatUpdate(np.zeros(2)), 1: FlatUpdate(np.zeros(3))})


class TestFedAvg:

    def test_identical_updates(self):
        u = np.array([0.25, -1.5, 3.0])
        np.testing.assert_allclose(fedavg(_set([u, u, u])).aggregate, u, rtol=1e-15)

    def test_arithmetic_mean(self):
        out = fedavg(_set([[1.0, 3.0], [3.0, 1.0]]))
        np.testing.assert_array_equal(out.aggregate, [2.0, 2.0])
        assert out.accepted_ids == [0, 1]

    def test_zero_server_rate(self):
        np.testing.assert_array_equal(fedavg(_set([[1.0, 3.0], [3.0, 1.0]]), eta=0.0).aggregate, [0.0, 0.0])

    def test_empty_set(self):
        with pytest.raises(AggregationError):
            fedavg(UpdateSet(np.zeros((0, 3)), ()))

    def test_keeps_update_dtype(self):
        rows = np.ones((3, 4), dtype=np.float32)
        assert fedavg(UpdateSet(rows, (0, 1, 2))).aggregate.dtype == np.float32


class TestPairwiseDistance:

    def test_identical_vectors(self):
        np.testing.assert_array_equal(pairwise_distance(_set([[1.0, 2.0]] * 3)), np.zeros((3, 3)))

    def test_orthogonal_and_opposite(self):
        s = _set([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        cosine = pairwise_distance(s, "cosine")
        assert cosine[0, 1] == pytest.approx(1.0)
        assert cosine[0, 2] == pytest.approx(2.0)
        assert pairwise_distance(s, "euclidean")[0, 2] == pytest.approx(2.0)

    def test_symmetric_with_zero_diagonal(self):
        rows = np.random.default_rng(0).normal(size=(6, 9))
        for metric in ("euclidean", "cosine"):
            d = pairwise_distance(_set(rows), metric)
            np.testing.assert_array_equal(d, d.T)
            np.testing.assert_array_equal(np.diag(d), np.zeros(6))

    def test_zero_vector_under_cosine_names_participant(self):
        with pytest.raises(AggregationError, match="participant 7"):
            pairwise_distance(_set([[1.0, 0.0], [0.0, 0.0]], ids=[3, 7]), "cosine")

    def test_zero_vector_at_fixed_cosine_distance(self):
        d = pairwise_distance(_set([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0], [0.0, 0.0]]), "cosine", zero_distance=1.0)
        np.testing.assert_array_equal(d[1], [1.0, 0.0, 1.0, 1.0])
        np.testing.assert_array_equal(d[:, 3], [1.0, 1.0, 1.0, 0.0])
        assert d[0, 2] == 0.0
        np.testing.assert_array_equal(d, d.T)

    def test_unknown_metric(self):
        with pytest.raises(AggregationError):
            pairwise_distance(_set([[1.0], [2.0]]), "manhattan")


class TestKrum:

    def test_one_dimensional_fixture(self):
        scores = krum_scores(_set([[0.0], [0.1], [0.2], [10.0]]), f=1)
        np.testing.assert_allclose(scores, [0.01, 0.01, 0.01, 96.04], rtol=1e-9)

    def test_identical_updates_score_zero(self):
        np.testing.assert_array_equal(krum_scores(_set([[1.0, 1.0]] * 5), f=1), np.zeros(5))

    def test_too_few_updates(self):
        with pytest.raises(AggregationError):
            krum_scores(_set([[0.0], [1.0], [2.0]]), f=1)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(200):
            n = int(rng.integers(4, 9))
            dim = int(rng.integers(1, 17))
            f = int(rng.integers(0, (n - 3) // 2 + 1))
            squared = bool(rng.integers(0, 2))
            rows = rng.normal(size=(n, dim))
            rows[rng.integers(0, n)] *= rng.uniform(1.0, 20.0)
            s = _set(rows)
            expected = _oracle_scores(rows, f, squared)
            np.testing.assert_allclose(krum_scores(s, f, squared), expected, rtol=1e-12)

            m = int(rng.integers(1, n + 1))
            out = multi_krum(s, f, m, squared=squared)
            ranked = sorted(range(n), key=lambda i: (expected[i], i))
            assert out.accepted_ids == sorted(ranked[:m])
            np.testing.assert_allclose(out.aggregate, rows[sorted(ranked[:m])].mean(axis=0), rtol=1e-12, atol=1e-15)

    def test_multi_krum_fixture(self):
        # with f = 0 every update scores against its two nearest neighbours;
        # 0 and 0.2 tie on 0.05, the lower id wins
        out = multi_krum(_set([[0.0], [0.1], [0.2], [10.0]]), f=0, m=2)
        assert out.accepted_ids == [0, 1]
        np.testing.assert_allclose(out.aggregate, [0.05])

    def test_multi_krum_with_all_updates_equals_fedavg(self):
        rows = np.random.default_rng(5).normal(size=(9, 31)).astype(np.float32)
        s = UpdateSet(rows, tuple(range(10, 19)))
        np.testing.assert_array_equal(multi_krum(s, f=2, m=9, eta=0.7).aggregate, fedavg(s, eta=0.7).aggregate)

    def test_outlier_is_excluded(self):
        rows = [[1.0, 1.0], [1.1, 0.9], [0.9, 1.0], [1.0, 1.2], [50.0, -50.0]]
        out = multi_krum(_set(rows, ids=[2, 4, 6, 8, 10]), f=1, m=4)
        assert out.accepted_ids == [2, 4, 6, 8]

    @pytest.mark.parametrize("f, m", [(2, 3), (0, 0), (0, 6)])
    def test_preconditions(self, f, m):
        with pytest.raises(AggregationError):
            multi_krum(_set(np.eye(5)), f=f, m=m)

    def test_arrival_order_does_not_matter(self):
        rng = np.random.default_rng(9)
        rows = {pid: FlatUpdate(rng.normal(size=6)) for pid in (11, 3, 7, 1, 9, 5, 2)}
        shuffled = dict(reversed(list(rows.items())))
        a = multi_krum(UpdateSet.from_updates(rows), f=1, m=3)
        b = multi_krum(UpdateSet.from_updates(shuffled), f=1, m=3)
        np.testing.assert_array_equal(a.aggregate, b.aggregate)
        assert a.accepted_ids == b.accepted_ids


class TestNormClip:

    def test_short_update_unchanged(self):
        u = np.array([0.3, 0.4])
        assert norm_clip(u, 1.0) is u

    def test_long_update_scaled_to_bound(self):
        u = np.array([1.2, 1.6])
        out = norm_clip(u, 1.0)
        assert np.linalg.norm(out) == pytest.approx(1.0)
        np.testing.assert_allclose(out / np.linalg.norm(out), u / np.linalg.norm(u))

    def test_never_increases_norm(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            u = rng.normal(size=8) * rng.uniform(0.01, 10.0)
            assert np.linalg.norm(norm_clip(u, 1.0)) <= max(np.linalg.norm(u), 1.0) + 1e-12

    def test_bound_must_be_positive(self):
        with pytest.raises(AggregationError):
            norm_clip(np.ones(2), 0.0)


class TestWeakDp:

    def test_no_noise_equals_fedavg_of_clipped(self):
        rows = np.array([[3.0, 4.0], [0.3, 0.4], [0.0, -2.0]])
        out = weak_dp_aggregate(_set(rows), clip_norm=1.0, sigma=0.0)
        clipped = np.array([norm_clip(r, 1.0) for r in rows])
        np.testing.assert_allclose(out.aggregate, clipped.mean(axis=0))
        assert out.diagnostics["clip_bound"] == 1.0

    def test_no_noise_and_short_updates_equals_fedavg(self):
        s = _set([[0.1, 0.2], [0.3, -0.1], [0.0, 0.5]])
        np.testing.assert_array_equal(weak_dp_aggregate(s, 1.0, 0.0).aggregate, fedavg(s).aggregate)

    def test_noise_is_seeded(self):
        s = _set(np.random.default_rng(0).normal(size=(4, 50)))
        stream = RngStream.root(7).child(3, 2)
        a = weak_dp_aggregate(s, 1.0, 0.1, stream=stream)
        b = weak_dp_aggregate(s, 1.0, 0.1, stream=stream)
        c = weak_dp_aggregate(s, 1.0, 0.1, stream=RngStream.root(7).child(3, 3))
        np.testing.assert_array_equal(a.aggregate, b.aggregate)
        assert np.any(a.aggregate != c.aggregate)
        assert a.diagnostics["noise_sigma"] == 0.1

    def test_noise_needs_a_stream(self):
        with pytest.raises(AggregationError):
            weak_dp_aggregate(_set([[1.0], [2.0]]), 1.0, 0.5)


class TestFlame:

    @pytest.mark.parametrize("n, expected", [(12, 7), (10, 6), (3, 3), (4, 3), (2, 2)])
    def test_min_cluster_size(self, n, expected):
        assert flame_min_cluster_size(n, 0.5) == expected

    def test_identical_updates_without_noise_equal_fedavg(self):
        s = _set([[0.5, -1.0, 2.0]] * 6)
        np.testing.assert_allclose(flame_aggregate(s, 0.0, 0.5).aggregate, fedavg(s).aggregate)

    def test_opposing_update_is_excluded(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=60)
        rows = [base + 0.15 * rng.normal(size=60) for _ in range(11)]
        rows.insert(0, -base * 3.0 + 0.15 * rng.normal(size=60))
        out = flame_aggregate(_set(rows), 0.001, 0.5, stream=RngStream.root(0).child(3, 0))
        assert 0 not in out.accepted_ids
        assert len(out.accepted_ids) >= out.diagnostics["min_cluster_size"] == 7
        norms = np.asarray(out.diagnostics["norms"])
        assert out.diagnostics["clip_bound"] == float(np.median(norms[out.accepted_ids]))
        assert out.diagnostics["noise_sigma"] == pytest.approx(0.001 * out.diagnostics["clip_bound"])

    def test_zero_update_is_left_out(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=40)
        rows = [base + 0.1 * rng.normal(size=40) for _ in range(6)]
        rows[2] = np.zeros(40)
        out = flame_aggregate(_set(rows), 0.001, 0.5, stream=RngStream.root(0).child(3, 0))
        assert 2 not in out.accepted_ids
        assert len(out.accepted_ids) >= out.diagnostics["min_cluster_size"] == 4
        assert out.diagnostics["clip_bound"] > 0
        assert np.all(np.isfinite(out.aggregate))

    def test_all_zero_updates_give_a_zero_aggregate(self):
        s = _set(np.zeros((5, 7)))
        out = flame_aggregate(s, 0.01, 0.5, stream=RngStream.root(0).child(3, 0))
        assert out.accepted_ids == [0, 1, 2, 3, 4]
        assert out.diagnostics["clip_bound"] == 0.0 and out.diagnostics["noise_sigma"] == 0.0
        np.testing.assert_array_equal(out.aggregate, np.zeros(7))

    def test_noise_is_seeded(self):
        rows = np.random.default_rng(2).normal(size=(5, 20)) + 3.0
        stream = RngStream.root(1).child(3, 4)
        a = flame_aggregate(_set(rows), 0.01, 0.5, stream=stream)
        b = flame_aggregate(_set(rows), 0.01, 0.5, stream=stream)
        np.testing.assert_array_equal(a.aggregate, b.aggregate)

    def test_needs_three_updates(self):
        with pytest.raises(AggregationError):
            flame_aggregate(_set([[1.0], [2.0]]), 0.0, 0.5)


class TestDispatch:

    def test_rules(self):
        rows = np.random.default_rng(3).normal(size=(12, 10))
        s = _set(rows)
        stream = RngStream.root(0).child(3, 0)
        np.testing.assert_array_equal(aggregate(s, DefenseConfig()).aggregate, fedavg(s).aggregate)
        mk = aggregate(s, DefenseConfig(rule="multi_krum", multi_krum=MultiKrumParams(f=4, m=8)))
        assert len(mk.accepted_ids) == 8
        dp = aggregate(s, DefenseConfig(rule="norm_clip_dp", norm_clip_dp=NormClipParams(0.5, 0.0)))
        assert np.linalg.norm(dp.aggregate) <= 0.5 + 1e-12
        fl = aggregate(s, DefenseConfig(rule="flame", flame=FlameParams(noise_lambda=0.0)), stream)
        assert "clip_bound" in fl.diagnostics

    def test_server_rate_scales_aggregate(self):
        s = _set([[2.0, 4.0], [4.0, 2.0]])
        np.testing.assert_allclose(aggregate(s, DefenseConfig(server_lr=0.5)).aggregate, [1.5, 1.5])

    @pytest.mark.parametrize("kwargs", [
        {"rule": "median"},
        {"norm_clip_dp": NormClipParams(clip_norm=0.0)},
        {"flame": FlameParams(noise_lambda=-1.0)},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(AggregationError):
            DefenseConfig(**kwargs)


class TestDistanceSummary:

    def test_statistics(self):
        d = pairwise_distance(_set([[0.0], [1.0], [2.0], [10.0]], ids=[0, 1, 2, 3]))
        summary = distance_summary(d, [0, 1, 2, 3], [3])
        assert summary["adversary_to_benign_mean"] == pytest.approx(9.0)
        assert summary["benign_mean"] == pytest.approx(4.0 / 3.0)
        assert summary["benign_p95"] == pytest.approx(1.9)

    def test_needs_both_groups(self):
        d = np.zeros((3, 3))
        with pytest.raises(AggregationError):
            distance_summary(d, [0, 1, 2], [])
