import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sigmon.base import ConfigurationError, DimensionError
from sigmon.geophys import GeoModel
from sigmon.model import default_noise_prior
from sigmon.posterior import ChainConfig
from sigmon.signalmodel import StationSignal
from sigmon.training import (StationEStep, TrainingConfig, covered_events, em_fit, fit_noise_prior,
                             station_e_step, usable_stations)
from sigmon.worldmodel import Event, PriorConfig

from tests.conftest import SMALL_SIGNAL, make_model, make_stations


BULLETIN = [Event(2.0, 2.0, 10.0, 5.0, 4.0), Event(3.0, 1.0, 10.0, 60.0, 4.5)]


def test_config_validation():
    TrainingConfig().validate()
    with pytest.raises(ConfigurationError):
        TrainingConfig(burn_in_frac=1.0).validate()
    with pytest.raises(ConfigurationError):
        TrainingConfig(n_sweeps=0).validate()


def test_usable_stations():
    stations = make_stations((0.0, 0.0), (1.0, 1.0))
    a, b = sorted(stations)
    signals = {a: StationSignal(a, 0.0, 10.0, np.zeros(100)), b: StationSignal(b, 0.0, 10.0, np.zeros(3)),
               'XX': StationSignal('XX', 0.0, 10.0, np.zeros(100))}
    assert list(usable_stations(signals, stations, 2)) == [a]


def test_covered_events():
    (sta, st), = make_stations((0.0, 0.0)).items()
    sig = StationSignal(sta, 0.0, 10.0, np.zeros(1200))
    late = Event(2.0, 2.0, 10.0, 1000.0, 4.0)
    early = Event(2.0, 2.0, 10.0, -500.0, 4.0)
    assert covered_events(BULLETIN + [late, early], sig, st, GeoModel(), 60.0) == [0, 1]


class TestNoisePriorFit:
    def test_moment_matching(self, rng):
        estep = StationEStep('S1')
        estep.mu_samples = rng.normal(0.5, 0.1, 400)
        estep.sigma2_samples = np.exp(rng.normal(0.0, 0.3, 400))
        estep.phi_samples = rng.normal([0.3, -0.1], 0.05, (400, 2))
        prior = fit_noise_prior(estep, 2)
        assert prior.mu_mean == pytest.approx(0.5, abs=0.02)
        assert prior.mu_var == pytest.approx(0.01, rel=0.2)
        assert_allclose(prior.phi_mean, [0.3, -0.1], atol=0.02)
        assert prior.phi_cov.shape == (2, 2)

    def test_no_samples_gives_default(self):
        prior = fit_noise_prior(StationEStep('S1'), 3)
        assert prior.to_dict() == default_noise_prior(3).to_dict()


class TestEStep:
    def test_station_summaries(self, rng):
        stations = make_stations((0.0, 0.0))
        (sta,) = stations
        model = make_model(stations)
        sig = StationSignal(sta, 0.0, 10.0, rng.standard_normal(1500))
        result = station_e_step(sta, sig, BULLETIN, model, ChainConfig(), TrainingConfig(n_sweeps=6, burn_in_frac=0.5),
                                np.random.SeedSequence(1))
        assert sorted(result.theta) == [(1, 'P'), (1, 'S'), (2, 'P'), (2, 'S')]
        for mean, var in result.theta.values():
            assert mean.shape == (5,) and np.all(var >= 1e-6)
        nu, xi = result.coeffs[(1, 'P')]
        assert nu.shape == xi.shape == (model.n_coeffs,)
        assert len(result.sigma2_samples) == 3
        assert result.noise.is_stable()

    def test_is_seeded(self, rng):
        stations = make_stations((0.0, 0.0))
        (sta,) = stations
        sig = StationSignal(sta, 0.0, 10.0, rng.standard_normal(1500))
        runs = [station_e_step(sta, sig, BULLETIN[:1], make_model(stations), ChainConfig(),
                               TrainingConfig(n_sweeps=3, burn_in_frac=0.0), np.random.SeedSequence(2))
                for _ in range(2)]
        assert_allclose(runs[0].sigma2_samples, runs[1].sigma2_samples, rtol=0, atol=0)


class TestEMFit:
    def test_no_usable_signal(self):
        stations = make_stations((0.0, 0.0))
        with pytest.raises(DimensionError):
            em_fit(BULLETIN, {}, stations)

    @pytest.mark.slow
    def test_small_fit(self, rng):
        stations = make_stations((0.0, 0.0))
        (sta,) = stations
        signals = {sta: StationSignal(sta, 0.0, 10.0, rng.standard_normal(2000))}
        model = em_fit(BULLETIN, signals, stations, signal_config=SMALL_SIGNAL,
                       prior_config=PriorConfig(window_s=600.0),
                       config=TrainingConfig(n_em=1, n_sweeps=4, burn_in_frac=0.25), seed=5)
        assert len(model.em_trace) == 1 and math.isfinite(model.em_trace[0])
        assert sorted(model.gp_models) == [(sta, 'P'), (sta, 'S')]
        assert model.event_prior.rate == pytest.approx(2.0 / 55.0)
        assert all(t.station == sta for t in model.templates)
