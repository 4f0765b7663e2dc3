"""Synthetic monitoring scenarios: events from the prior, arrivals from smooth per-station fields, waveforms."""
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from sigmon.base import ConfigurationError, DomainError, PhaseId, StationId
from sigmon.envelope import from_log_vector
from sigmon.geophys import (EARTH_RADIUS_KM, GeoModel, Station, destination_point, predict_log_amplitude,
                            predict_travel_time, unit_vectors)
from sigmon.signalmodel import Arrival, NoiseParams, SignalConfig, StationSignal, Window, synthesize
from sigmon.worldmodel import Event, EventPrior, sample_event, sample_world


_LOG = logging.getLogger('sigmon.scenario')


@dataclass(frozen=True)
class SynthConfig:
    start_time: float = 0.0
    duration_s: float = 3600.0
    # seconds of signal recorded past the last possible origin time
    tail_s: float = 600.0
    n_events: Optional[int] = None
    # lon_min, lon_max, lat_min, lat_max; None samples locations from the prior
    region: Optional[Tuple[float, float, float, float]] = None
    mb_range: Optional[Tuple[float, float]] = None
    noise_mu: float = 0.0
    noise_sigma2: float = 1.0
    noise_phi: Tuple[float, ...] = (0.4, -0.1)
    # repeatable structure: smooth fields over event location, one per (station, phase)
    field_seed: int = 1
    field_lengthscale_km: float = 100.0
    field_features: int = 64
    tt_sd: float = 1.0
    amp_sd: float = 0.3
    shape_sd: float = 0.1
    log_shape_mean: Tuple[float, float, float] = (math.log(1.5), math.log(0.3), math.log(0.15))
    coeff_field_var: float = 0.9
    coeff_nugget: float = 0.1
    # unassociated arrivals per station and second
    ua_rate: float = 0.0
    ua_log_shape_mean: Tuple[float, float, float, float] = (0.0, math.log(1.5), math.log(0.3), math.log(0.15))
    ua_log_shape_sd: Tuple[float, float, float, float] = (1.0, 0.5, 0.5, 0.5)
    # station layout used when no stations file exists
    ring_stations: int = 4
    ring_center: Tuple[float, float] = (0.0, 0.0)
    ring_radius_km: float = 1000.0

    def validate(self) -> None:
        if not self.duration_s > 0 or self.tail_s < 0:
            raise ConfigurationError("synth: duration_s must be positive and tail_s non-negative")
        if self.noise_sigma2 <= 0 or self.coeff_nugget <= 0 or self.coeff_field_var < 0:
            raise ConfigurationError("synth: variances must be positive")
        if self.region is not None:
            lon0, lon1, lat0, lat1 = self.region
            if not (-180.0 <= lon0 < lon1 <= 180.0 and -90.0 <= lat0 < lat1 <= 90.0):
                raise ConfigurationError(f"synth: bad region {self.region}")
        if self.mb_range is not None and not self.mb_range[0] <= self.mb_range[1]:
            raise ConfigurationError(f"synth: bad mb_range {self.mb_range}")
        NoiseParams(self.noise_mu, self.noise_sigma2, self.noise_phi).validate()

    @property
    def noise(self) -> NoiseParams:
        return NoiseParams(self.noise_mu, self.noise_sigma2, self.noise_phi)


class SmoothField:
    """Random-Fourier-feature field on the sphere, approximately unit variance per output.

    The field is a deterministic function of its seed, so separately generated
    training and test scenarios share the same repeatable structure.
    """

    def __init__(self, seed: int, n_outputs: int, lengthscale_km: float, n_features: int = 64) -> None:
        rng = np.random.default_rng(seed)
        self.omega = rng.normal(0.0, 1.0 / lengthscale_km, size=(n_outputs, n_features, 3))
        self.offset = rng.uniform(0.0, 2.0 * math.pi, size=(n_outputs, n_features))
        self.n_features = n_features

    def __call__(self, lon: float, lat: float) -> np.ndarray:
        x = EARTH_RADIUS_KM * unit_vectors(np.array([lon]), np.array([lat]))[0]
        return math.sqrt(2.0 / self.n_features) * np.cos(self.omega @ x + self.offset).sum(axis=1)


def field_seed(base: int, station: StationId, phase: str) -> int:
    return int(np.random.SeedSequence([base, zlib.crc32(f"{station}/{phase}".encode())]).generate_state(1)[0])


@dataclass
class Scenario:
    events: List[Event]
    signals: Dict[StationId, StationSignal]
    arrivals: Dict[StationId, List[Arrival]] = field(default_factory=dict)
    noise: Dict[StationId, NoiseParams] = field(default_factory=dict)


class ScenarioGenerator:
    def __init__(self, stations: Dict[StationId, Station], geo: GeoModel, signal: SignalConfig,
                 config: SynthConfig) -> None:
        config.validate()
        self.stations = stations
        self.geo = geo
        self.signal = signal
        self.config = config
        self.basis = signal.basis()
        self._fields: Dict[Tuple[StationId, str], SmoothField] = {}

    def _field(self, station: StationId, phase: str) -> SmoothField:
        key = (station, phase)
        if key not in self._fields:
            self._fields[key] = SmoothField(field_seed(self.config.field_seed, station, phase),
                                            5 + self.basis.n_coeffs, self.config.field_lengthscale_km,
                                            self.config.field_features)
        return self._fields[key]

    def arrival_for(self, arid: int, evid: int, event: Event, station: StationId, phase: PhaseId,
                    rng: np.random.Generator) -> Arrival:
        """Mean function plus field deviations; coefficients share the field, plus a nugget."""
        cfg = self.config
        f = self._field(station, phase)(event.lon, event.lat)
        sta = self.stations[station]
        tt = predict_travel_time(event, sta, phase, self.geo.velocity) + cfg.tt_sd * f[0]
        log_amp = predict_log_amplitude(event, sta, phase, self.geo.amplitude) + cfg.amp_sd * f[1]
        shape = np.asarray(cfg.log_shape_mean) + cfg.shape_sd * f[2:5]
        theta = from_log_vector(np.concatenate([[event.origin_time + tt, log_amp], shape]))
        mean = math.sqrt(cfg.coeff_field_var) * f[5:]
        var = np.full(self.basis.n_coeffs, cfg.coeff_nugget)
        return Arrival(arid, station, phase, theta, mean, var, evid)

    def unassociated(self, arid: int, station: StationId, t0: float, t1: float,
                     rng: np.random.Generator) -> Arrival:
        cfg = self.config
        shape = np.asarray(cfg.ua_log_shape_mean) + np.asarray(cfg.ua_log_shape_sd) * rng.standard_normal(4)
        theta = from_log_vector(np.concatenate([[rng.uniform(t0, t1)], shape]))
        return Arrival(arid, station, None, theta, np.zeros(self.basis.n_coeffs), np.ones(self.basis.n_coeffs))

    def sample_events(self, prior: EventPrior, rng: np.random.Generator) -> List[Event]:
        cfg = self.config
        prior = prior.with_window(cfg.start_time, cfg.duration_s)
        if cfg.mb_range is not None:
            prior = replace(prior, mb_min=cfg.mb_range[0], mb_max=cfg.mb_range[1])
        if cfg.n_events is None:
            events = sample_world(prior, rng)
        else:
            events = [sample_event(prior, rng) for _ in range(cfg.n_events)]
        if cfg.region is not None:
            lon0, lon1, lat0, lat1 = cfg.region
            s0, s1 = math.sin(math.radians(lat0)), math.sin(math.radians(lat1))
            events = [e.moved(lon=float(rng.uniform(lon0, lon1)),
                              lat=math.degrees(math.asin(rng.uniform(s0, s1)))) for e in events]
        return sorted(events, key=lambda e: (e.origin_time, e.lon, e.lat))

    def generate(self, prior: EventPrior, rng: np.random.Generator,
                 events: Optional[List[Event]] = None) -> Scenario:
        cfg = self.config
        if events is None:
            events = self.sample_events(prior, rng)
        n = int(round((cfg.duration_s + cfg.tail_s) * self.signal.rate_hz))
        out = Scenario(events, {})
        for station in sorted(self.stations):
            arrivals = []
            for evid, ev in enumerate(events, start=1):
                for phase in self.geo.phases:
                    try:
                        arrivals.append(self.arrival_for(len(arrivals) + 1, evid, ev, station, PhaseId(phase), rng))
                    except DomainError as exc:
                        _LOG.warning(f"event {evid} at {station}/{phase} skipped: {exc}")
            n_ua = int(rng.poisson(cfg.ua_rate * (cfg.duration_s + cfg.tail_s)))
            for _ in range(n_ua):
                arrivals.append(self.unassociated(len(arrivals) + 1, station, cfg.start_time,
                                                  cfg.start_time + cfg.duration_s + cfg.tail_s, rng))
            window = Window(station, cfg.start_time, n, self.signal.rate_hz)
            out.signals[station] = synthesize(arrivals, cfg.noise, window, rng, self.signal, self.basis)
            out.arrivals[station] = arrivals
            out.noise[station] = cfg.noise
        _LOG.info(f"synthesized {len(events)} events at {len(self.stations)} stations over {cfg.duration_s:.0f} s")
        return out


def ring_stations(n: int, lon: float, lat: float, radius_km: float) -> Dict[StationId, Station]:
    """n stations evenly spaced on a circle around (lon, lat)."""
    out = {}
    for k in range(n):
        slon, slat = destination_point(lon, lat, 2.0 * math.pi * k / n, radius_km)
        sta = StationId(f"ST{k + 1:02d}")
        out[sta] = Station(sta, slon, slat)
    return out
