import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import poisson

from sigmon.base import ConfigurationError, InvariantError
from sigmon.geophys import great_circle_km
from sigmon.worldmodel import (SPHERE_AREA_KM2, Event, EventPrior, Gating, LocationPrior, PriorConfig, WorldState,
                               event_log_density, fit_event_prior, kde_density, kde_normalizer, location_log_density,
                               log_prior_events, mb_log_density, sample_location, sample_mb, sample_world,
                               within_gate)

from tests.conftest import make_arrival
from tests.oracles import permutations_agree


PRIOR = EventPrior(rate=1.0 / 600.0, window_s=3600.0, location=LocationPrior(np.array([[10.0, 20.0]])))


def _events():
    return [Event(10.0, 20.0, 5.0, 100.0, 3.0), Event(11.0, 19.5, 50.0, 900.0, 4.2),
            Event(-40.0, 0.0, 0.0, 2000.0, 2.5), Event(120.0, -30.0, 300.0, 3500.0, 5.1)]


class TestEventPrior:
    def test_empty_world_is_poisson_zero(self):
        assert log_prior_events([], PRIOR) == pytest.approx(-PRIOR.expected_count)

    def test_single_event(self):
        ev = _events()[0]
        expected = poisson.logpmf(1, PRIOR.expected_count) + event_log_density(ev, PRIOR)
        assert log_prior_events([ev], PRIOR) == pytest.approx(expected)

    def test_outside_window(self):
        ev = Event(10.0, 20.0, 5.0, 3601.0, 3.0)
        assert log_prior_events([ev], PRIOR) == -math.inf
        assert log_prior_events([Event(10.0, 20.0, -1.0, 10.0, 3.0)], PRIOR) == -math.inf

    def test_order_invariant(self):
        assert permutations_agree(_events(), lambda evs: log_prior_events(evs, PRIOR), tol=0.0)

    def test_mb_density_normalized(self):
        total, _ = quad(lambda m: math.exp(mb_log_density(m, PRIOR)), PRIOR.mb_min, PRIOR.mb_max)
        assert total == pytest.approx(1.0, rel=1e-8)
        assert mb_log_density(1.9, PRIOR) == -math.inf

    def test_sample_mb(self, rng):
        draws = np.array([sample_mb(PRIOR, rng) for _ in range(5000)])
        k, span = math.log(10.0), PRIOR.mb_max - PRIOR.mb_min
        expected = PRIOR.mb_min + 1.0 / k - span * math.exp(-k * span) / (1.0 - math.exp(-k * span))
        assert np.all((draws >= PRIOR.mb_min) & (draws <= PRIOR.mb_max))
        assert draws.mean() == pytest.approx(expected, abs=0.03)

    def test_validate(self):
        with pytest.raises(ConfigurationError):
            EventPrior(0.0, 10.0, LocationPrior()).validate()
        with pytest.raises(ConfigurationError):
            EventPrior(1.0, 10.0, LocationPrior(uniform_weight=1.0)).validate()

    def test_sample_world_in_window(self, rng):
        events = sample_world(PRIOR.with_window(1000.0, 600.0), rng)
        assert all(1000.0 <= e.origin_time <= 1600.0 for e in events)
        assert all(e.in_bounds() for e in events)


class TestLocationPrior:
    def test_normalizer_planar_limit(self):
        assert kde_normalizer(50.0) == pytest.approx(2.0 * math.pi * 50.0 ** 2, rel=1e-3)

    def test_uniform_only(self):
        empty = LocationPrior(np.zeros((0, 2)))
        assert location_log_density(3.0, 4.0, empty) == pytest.approx(-math.log(SPHERE_AREA_KM2))

    def test_kde_peak(self):
        loc = PRIOR.location
        assert kde_density(10.0, 20.0, loc) == pytest.approx(1.0 / kde_normalizer(50.0))
        assert kde_density(10.0, 20.0, loc) > kde_density(11.0, 20.0, loc)

    def test_kde_density_integrates_to_one(self):
        # rings of arc psi around the single KDE point
        loc = LocationPrior(np.array([[0.0, 0.0]]), kde_bandwidth=300.0)
        r = 6371.0

        def ring(psi):
            return kde_density(0.0, math.degrees(psi), loc) * 2.0 * math.pi * r * r * math.sin(psi)

        total, _ = quad(ring, 0.0, math.pi / 2, limit=200)
        assert total == pytest.approx(1.0, rel=1e-6)

    def test_samples_near_kde_point(self, rng):
        loc = LocationPrior(np.array([[10.0, 20.0]]), kde_bandwidth=50.0, uniform_weight=0.01)
        d = [great_circle_km(10.0, 20.0, *sample_location(loc, rng)) for _ in range(500)]
        assert np.median(d) < 200.0


class TestFitPrior:
    def test_rate_from_span(self):
        prior = fit_event_prior(_events(), PriorConfig())
        assert prior.rate == pytest.approx(4 / 3400.0)
        assert len(prior.location.kde_points) == 4

    def test_explicit_span(self):
        prior = fit_event_prior(_events(), PriorConfig(training_span_s=8000.0))
        assert prior.rate == pytest.approx(4 / 8000.0)

    def test_no_events_needs_rate(self):
        with pytest.raises(ConfigurationError):
            fit_event_prior([], PriorConfig())
        assert fit_event_prior([], PriorConfig(rate=0.01)).rate == 0.01


class TestWorldState:
    def _state(self):
        state = WorldState(['S1', 'S2'])
        evid = state.add_event(_events()[0])
        state.put_arrival(make_arrival(1, 30.0, 4, station='S1', evid=evid))
        state.put_arrival(make_arrival(2, 50.0, 4, station='S1', phase='S', evid=evid))
        state.put_arrival(make_arrival(3, 70.0, 4, station='S2', phase=None))
        return state, evid

    def test_remove_event_drops_arrivals(self):
        state, evid = self._state()
        state.check_invariants()
        state.remove_event(evid)
        assert state.events == {}
        assert [a.arid for a in state.station_arrivals('S1')] == []
        assert [a.arid for a in state.unassociated('S2')] == [3]
        state.check_invariants()

    def test_dangling_arrival(self):
        state, evid = self._state()
        del state.events[evid]
        with pytest.raises(InvariantError):
            state.check_invariants()

    def test_duplicate_phase(self):
        state, evid = self._state()
        state.put_arrival(make_arrival(4, 31.0, 4, station='S1', evid=evid))
        with pytest.raises(InvariantError):
            state.check_invariants()

    def test_copy_is_independent(self):
        state, evid = self._state()
        other = state.copy()
        other.remove_event(evid)
        assert evid in state.events
        assert len(state.station_arrivals('S1')) == 2
        assert state.new_arid() == other.new_arid()

    def test_lookup(self):
        state, evid = self._state()
        assert state.arrival_for(evid, 'S1', 'S').arid == 2
        assert state.arrival_for(evid, 'S2', 'P') is None
        assert state.n_unassociated() == 1
        assert state.new_evid() == evid + 1


class TestGating:
    def test_within(self):
        a = Event(0.0, 0.0, 0.0, 100.0, 3.0)
        assert within_gate(a, a.moved(lon=1.9, origin_time=149.0))
        assert not within_gate(a, a.moved(lon=2.1))
        assert not within_gate(a, a.moved(origin_time=151.0))
        assert Gating().distance_km == pytest.approx(math.radians(2.0) * 6371.0)
