import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import logsumexp
from scipy.stats import norm, truncnorm

from sigmon.geophys import GeoModel, predict_travel_time
from sigmon.model import Template
from sigmon.posterior import ChainConfig
from sigmon.proposals import (CorrelationProposal, HoughProposal, LibraryComponent, correlation_library,
                              hough_grid, hough_plan, normalized_xcorr, onset_proposal, rayleigh_log_density_km2)
from sigmon.signalmodel import StationSignal
from sigmon.worldmodel import Event, EventPrior, LocationPrior, event_log_density

from tests.conftest import make_arrival, make_stations


PRIOR = EventPrior(1.0 / 600.0, 600.0, LocationPrior(np.zeros((0, 2))), 0.0)
HOUGH = ChainConfig(hough_bbox=(0.0, 10.0, 0.0, 10.0))


class TestOnset:
    def test_density_normalized(self, rng):
        sig = StationSignal('S1', 100.0, 10.0, rng.standard_normal(500))
        prop = onset_proposal(sig, ChainConfig())
        assert prop.probs.sum() == pytest.approx(1.0)
        centres = sig.start_time + (np.arange(500) + 0.5) / sig.rate_hz
        mass = sum(math.exp(prop.log_density(t)) for t in centres) / sig.rate_hz
        assert mass == pytest.approx(1.0)
        assert prop.log_density(99.0) == -math.inf

    def test_samples_have_density(self, rng):
        sig = StationSignal('S1', 0.0, 10.0, rng.standard_normal(200))
        prop = onset_proposal(sig, ChainConfig())
        for _ in range(20):
            assert math.isfinite(prop.log_density(prop.sample(rng)))

    def test_favours_bursts(self, rng):
        samples = 0.1 * rng.standard_normal(1000)
        samples[600:650] += 20.0 * rng.standard_normal(50)
        prop = onset_proposal(StationSignal('S1', 0.0, 10.0, samples), ChainConfig())
        assert 590 <= int(np.argmax(prop.probs)) <= 660
        assert prop.probs[600:650].sum() > 0.5


class TestCorrelation:
    def test_xcorr_matches_brute_force(self, rng):
        t = rng.standard_normal(20)
        s = rng.standard_normal(100)
        s[37:57] = 2.0 * t + 5.0
        ncc = normalized_xcorr(t, s)
        assert len(ncc) == 81
        assert int(np.argmax(ncc)) == 37
        assert ncc[37] == pytest.approx(1.0)
        for lag in (0, 12, 60):
            assert ncc[lag] == pytest.approx(np.corrcoef(t, s[lag:lag + 20])[0, 1], abs=1e-9)

    def test_xcorr_short_signal(self):
        assert len(normalized_xcorr(np.ones(5), np.ones(3))) == 0

    def test_rayleigh_density_integrates(self):
        sigma = 10.0

        def ring(d):
            psi = d / 6371.0
            return math.exp(rayleigh_log_density_km2(d, sigma)) * 2.0 * math.pi * 6371.0 * math.sin(psi)

        total, _ = quad(ring, 0.0, 200.0, limit=200)
        assert total == pytest.approx(1.0, rel=1e-6)

    def test_wide_rayleigh_truncated_at_antipode(self):
        sigma = 15000.0
        radius = 6371.0

        def ring(d):
            return math.exp(rayleigh_log_density_km2(d, sigma)) * 2.0 * math.pi * radius * math.sin(d / radius)

        total, _ = quad(ring, 0.0, math.pi * radius, limit=200)
        assert total == pytest.approx(1.0, rel=1e-6)
        assert rayleigh_log_density_km2(math.pi * radius, sigma) == -math.inf

    def test_library_recovers_origin(self, rng):
        stations = make_stations((0.0, 0.0))
        sta = sorted(stations)[0]
        shape = rng.standard_normal(40)
        samples = 0.1 * rng.standard_normal(600)
        samples[250:290] += shape
        sig = StationSignal(sta, 1000.0, 10.0, samples)
        templates = [Template(3, 1.0, 2.0, 5.0, 4.0, sta, 'P', 12.0, 10.0, shape)]
        prop = correlation_library({sta: sig}, templates, PRIOR.with_window(900.0, 300.0), ChainConfig())
        (comp,) = prop.components
        assert comp.evid == 3
        assert comp.origin_time == pytest.approx(1000.0 + 25.0 - 12.0)
        assert comp.score > 0.95

    def test_mixture_density(self):
        cfg = ChainConfig()
        comp = LibraryComponent(1, 10.0, 20.0, 30.0, 4.0, 500.0, 0.8)
        prop = CorrelationProposal([comp], PRIOR, cfg)
        ev = Event(10.0, 20.0, 30.0, 500.0, 4.0)
        sd = cfg.corr_sigma_depth
        depth = truncnorm(-30.0 / sd, (PRIOR.depth_max - 30.0) / sd, loc=30.0, scale=sd).logpdf(30.0)
        expected = (-math.log(2.0 * math.pi * cfg.corr_sigma_loc_km ** 2) + depth
                    + norm.logpdf(0.0, 0.0, cfg.corr_sigma_t) + norm.logpdf(0.0, 0.0, cfg.corr_sigma_mb))
        assert prop.log_density(ev) == pytest.approx(expected)

    def test_weights_follow_scores(self):
        comps = [LibraryComponent(k, 10.0, 20.0, 30.0, 4.0, 500.0, s) for k, s in enumerate((0.1, 0.9))]
        prop = CorrelationProposal(comps, PRIOR, ChainConfig(corr_temperature=10.0))
        assert prop.weights.sum() == pytest.approx(1.0)
        assert prop.weights[1] / prop.weights[0] == pytest.approx(math.exp(8.0))

    def test_empty_library_falls_back_to_prior(self, rng):
        prop = CorrelationProposal([], PRIOR, ChainConfig())
        event, lq = prop.sample(rng)
        assert lq == pytest.approx(event_log_density(event, PRIOR))

    def test_sample_density_finite(self, rng):
        comp = LibraryComponent(1, 10.0, 20.0, 30.0, 4.0, 500.0, 0.8)
        prop = CorrelationProposal([comp], PRIOR, ChainConfig())
        for _ in range(10):
            event, lq = prop.sample(rng)
            assert math.isfinite(lq)
            assert lq == pytest.approx(prop.log_density(event))


class TestHough:
    def _setup(self):
        stations = make_stations((0.0, 0.0), (10.0, 0.0), (5.0, 12.0), (-3.0, 8.0))
        geo = GeoModel()
        truth = Event(3.0, 5.0, 350.0, 205.0, 4.0)
        ua = {}
        arid = 1
        for sta, st in sorted(stations.items()):
            ua[sta] = []
            for phase in geo.phases:
                tau = truth.origin_time + predict_travel_time(truth, st, phase, geo.velocity)
                ua[sta].append(make_arrival(arid, tau, 4, station=sta, phase=None))
                arid += 1
        return stations, geo, truth, ua

    def test_peak_at_true_cell(self):
        stations, geo, truth, ua = self._setup()
        grid = hough_grid(ua, stations, geo, PRIOR, HOUGH)
        assert logsumexp(grid.log_probs) == pytest.approx(0.0, abs=1e-9)
        best = np.unravel_index(int(np.argmax(grid.log_probs)), grid.shape)
        assert tuple(int(b) for b in best) == grid.cell_of(truth)

    def test_plan_associates_each_phase(self):
        stations, geo, truth, ua = self._setup()
        plan = hough_plan((truth.lon, truth.lat, truth.depth, truth.origin_time), ua, stations, geo, HOUGH)
        assert len(plan) == 2 * len(stations)
        by_arid = {a.arid: a for arrivals in ua.values() for a in arrivals}
        for sta, phase, arid in plan:
            assert by_arid[arid].station == sta
        assert [p for _, p, _ in plan[:2]] == ['P', 'S']
        assert plan[0][2] < plan[1][2]

    def test_proposal_density(self, rng):
        stations, geo, truth, ua = self._setup()
        grid = hough_grid(ua, stations, geo, PRIOR, HOUGH)
        prop = HoughProposal(grid, ua, stations, geo, PRIOR, HOUGH)
        for _ in range(10):
            event, plan, lq = prop.sample(rng)
            assert grid.cell_of(event) is not None
            assert lq == pytest.approx(prop.log_density(event))
        assert prop.log_density(Event(50.0, 5.0, 10.0, 205.0, 4.0)) == -math.inf

    def test_cell_edges(self):
        stations, geo, _, ua = self._setup()
        grid = hough_grid(ua, stations, geo, PRIOR, HOUGH)
        assert grid.cell_of(Event(10.0, 10.0, 700.0, 600.0, 4.0)) == (4, 4, 0, 59)
        assert grid.cell_of(Event(0.0, 0.0, 0.0, 0.0, 4.0)) == (0, 0, 0, 0)
