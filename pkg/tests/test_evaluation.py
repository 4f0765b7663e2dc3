import math

import pytest

from sigmon.base import InvariantError
from sigmon.evaluation import (Matching, de_novo_subset, evaluate, location_error_histogram, match_bulletins,
                               mean_location_error, pr_curve, precision_recall, recall_by_group,
                               threshold_at_precision)
from sigmon.geophys import great_circle_km
from sigmon.inference import ScoredEvent
from sigmon.worldmodel import Event, Gating

from tests.oracles import brute_force_matching, brute_force_precision_recall


def _ev(lon, lat=0.0, t=0.0, mb=4.0):
    return Event(lon, lat, 0.0, t, mb)


def _random_events(rng, n):
    return [_ev(rng.uniform(0.0, 4.0), rng.uniform(0.0, 4.0), rng.uniform(0.0, 120.0)) for _ in range(n)]


class TestMatching:
    def test_prefers_cardinality_over_distance(self):
        ref = [_ev(0.0), _ev(1.5)]
        inferred = [_ev(0.5), _ev(-1.5)]
        m = match_bulletins(inferred, ref)
        assert [(i, j) for i, j, _ in m.pairs] == [(0, 1), (1, 0)]
        assert m.cardinality == 2
        assert m.unmatched_inferred == [] and m.unmatched_reference == []

    def test_gate(self):
        m = match_bulletins([_ev(2.1)], [_ev(0.0)])
        assert m.cardinality == 0
        assert m.unmatched_inferred == [0] and m.unmatched_reference == [0]
        assert match_bulletins([_ev(0.0, t=51.0)], [_ev(0.0)]).cardinality == 0

    def test_empty(self):
        m = match_bulletins([], [_ev(0.0)])
        assert m.cardinality == 0
        assert precision_recall(m, 0, 1) == (1.0, 0.0)

    def test_distances_reported(self):
        m = match_bulletins([_ev(0.5)], [_ev(0.0)])
        ((_, _, d),) = m.pairs
        assert d == pytest.approx(float(great_circle_km(0.5, 0.0, 0.0, 0.0)))
        assert mean_location_error(m) == pytest.approx(d)

    def test_agrees_with_enumeration(self, rng):
        gating = Gating()
        for _ in range(100):
            inferred = _random_events(rng, int(rng.integers(0, 7)))
            reference = _random_events(rng, int(rng.integers(0, 7)))
            m = match_bulletins(inferred, reference, gating)
            k, total = brute_force_matching(inferred, reference, gating)
            assert m.cardinality == k
            assert m.total_km == pytest.approx(total, abs=1e-6)
            assert len({i for i, _, _ in m.pairs}) == k and len({j for _, j, _ in m.pairs}) == k


class TestPrecisionRecall:
    def test_values(self):
        two = Matching([(0, 0, 1.0), (1, 1, 2.0)])
        assert precision_recall(two, 4, 8) == (0.5, 0.25)
        assert precision_recall(Matching(), 3, 2) == (0.0, 0.0)
        assert precision_recall(Matching(), 0, 0) == (1.0, 1.0)

    def test_counts_below_cardinality(self):
        with pytest.raises(InvariantError):
            precision_recall(Matching([(0, 0, 1.0)]), 0, 1)

    def test_curve(self, rng):
        gating = Gating()
        reference = _random_events(rng, 6)
        scored = [ScoredEvent(e, float(c)) for e, c in zip(_random_events(rng, 8), rng.uniform(size=8))]
        scored += [ScoredEvent(reference[0].moved(lon=reference[0].lon + 0.2), 0.95)]
        curve = pr_curve(scored, reference, gating)
        assert [t for t, _, _ in curve] == sorted({s.confidence for s in scored})
        for t, p, r in curve:
            assert (p, r) == pytest.approx(brute_force_precision_recall(scored, reference, gating, t))
        recalls = [r for _, _, r in curve]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))

    def test_threshold_at_precision(self):
        curve = [(0.1, 0.5, 1.0), (0.5, 0.8, 0.6), (0.7, 0.8, 0.6), (0.9, 1.0, 0.2)]
        assert threshold_at_precision(curve, 0.75) == (0.5, 0.8, 0.6)
        assert threshold_at_precision(curve, 1.0) == (0.9, 1.0, 0.2)
        assert threshold_at_precision(curve, 1.1) is None


class TestBreakdowns:
    def test_de_novo(self):
        training = [_ev(0.0)]
        near, far = _ev(0.1), _ev(5.0)
        assert de_novo_subset([near, far], training) == [far]
        assert de_novo_subset([near, far], []) == [near, far]

    def test_recall_by_group(self):
        reference = [_ev(0.0, mb=2.5), _ev(1.0, mb=3.5), _ev(2.0, mb=3.7), _ev(3.0, mb=8.0)]
        m = Matching([(0, 1, 3.0), (1, 3, 4.0)])
        rows = recall_by_group(m, reference)
        assert rows[0] == (2.0, 3.0, 1, 0, 0.0)
        assert rows[1] == (3.0, 4.0, 2, 1, 0.5)
        assert rows[2][:4] == (4.0, 5.0, 0, 0) and math.isnan(rows[2][4])
        assert rows[3] == (5.0, 8.0, 1, 1, 1.0)

    def test_histogram(self):
        m = Matching([(0, 0, 5.0), (1, 1, 15.0), (2, 2, 15.5), (3, 3, 222.0)])
        hist = location_error_histogram(m)
        assert hist[0] == (0.0, 10.0, 1)
        assert hist[1] == (10.0, 20.0, 2)
        assert hist[-1] == (220.0, 230.0, 1)
        assert sum(c for _, _, c in hist) == 4

    def test_evaluate(self):
        metrics = evaluate([_ev(0.5), _ev(50.0)], [_ev(0.0)])
        assert (metrics.n_inferred, metrics.n_reference, metrics.n_matched) == (2, 1, 1)
        assert (metrics.precision, metrics.recall) == (0.5, 1.0)
        rows = dict(evaluate([], [_ev(0.0)]).rows())
        assert rows['mean_location_error_km'] == ''
        assert rows['recall'] == 0.0
