import numpy as np
import pytest

from sigmon.base import PhaseId, StationId
from sigmon.envelope import ArrivalParams
from sigmon.geophys import GeoModel, Station
from sigmon.model import NoisePriorSet, TrainedModel
from sigmon.signalmodel import Arrival, NoiseParams, SignalConfig
from sigmon.worldmodel import EventPrior, LocationPrior


# 32-sample wavelet window at 10 Hz keeps dense checks cheap
SMALL_SIGNAL = SignalConfig(rate_hz=10.0, window_s=3.2, levels=2, k_max=4, ar_order=2)

NOISE = NoiseParams(0.0, 1.0, (0.4, -0.1))


def make_arrival(arid, tau, n_coeffs, alpha=3.0, rho=1.0, gamma=0.3, beta=0.5, station='S1',
                 phase='P', evid=None, mean=None, var=None):
    mean = np.zeros(n_coeffs) if mean is None else np.broadcast_to(mean, (n_coeffs,))
    var = np.ones(n_coeffs) if var is None else np.broadcast_to(var, (n_coeffs,))
    return Arrival(arid, StationId(station), PhaseId(phase) if phase is not None else None,
                   ArrivalParams(tau, rho, alpha, gamma, beta), mean, var, evid)


def make_stations(*coords):
    out = {}
    for k, (lon, lat) in enumerate(coords, start=1):
        sta = StationId(f"ST{k:02d}")
        out[sta] = Station(sta, lon, lat)
    return out


def make_model(stations, signal=SMALL_SIGNAL, rate=1.0 / 600.0, window_s=600.0, start_time=0.0):
    prior = EventPrior(rate, window_s, LocationPrior(np.zeros((0, 2))), start_time)
    return TrainedModel(stations, GeoModel(), signal, prior, {}, NoisePriorSet({}, signal.ar_order))


@pytest.fixture
def rng():
    return np.random.default_rng(20241018)


@pytest.fixture
def small_signal():
    return SMALL_SIGNAL


@pytest.fixture
def small_basis():
    return SMALL_SIGNAL.basis()
