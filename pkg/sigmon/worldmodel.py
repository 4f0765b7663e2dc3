"""Events, the MCMC world state and the event prior p(E)."""
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln
from scipy.stats import poisson

from sigmon.base import ConfigurationError, InvariantError, PhaseId, StationId
from sigmon.geophys import EARTH_RADIUS_KM, destination_point, great_circle_km
from sigmon.signalmodel import Arrival, NoiseParams


_LOG = logging.getLogger('sigmon.worldmodel')

SPHERE_AREA_KM2 = 4.0 * math.pi * EARTH_RADIUS_KM ** 2


@dataclass(frozen=True)
class Event:
    lon: float
    lat: float
    depth: float
    origin_time: float
    mb: float

    def in_bounds(self) -> bool:
        return -180.0 <= self.lon < 180.0 and -90.0 <= self.lat <= 90.0 and self.depth >= 0.0

    def moved(self, **changes) -> 'Event':
        return replace(self, **changes)


@dataclass(frozen=True)
class PriorConfig:
    rate: Optional[float] = None
    window_s: float = 7200.0
    start_time: float = 0.0
    training_span_s: Optional[float] = None
    kde_bandwidth_km: float = 50.0
    uniform_weight: float = 0.1
    depth_max: float = 700.0
    mb_min: float = 2.0
    mb_max: float = 8.0
    b_value: float = 1.0


@dataclass(frozen=True, eq=False)
class LocationPrior:
    kde_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    kde_bandwidth: float = 50.0
    uniform_weight: float = 0.1

    def __post_init__(self) -> None:
        pts = np.asarray(self.kde_points, dtype=float).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, 'kde_points', pts)

    def validate(self, allow_uniform: bool = False) -> None:
        if not self.kde_bandwidth > 0:
            raise ConfigurationError(f"prior: kde_bandwidth_km must be positive, got {self.kde_bandwidth}")
        hi_ok = self.uniform_weight <= 1.0 if allow_uniform else self.uniform_weight < 1.0
        if not (self.uniform_weight > 0.0 and hi_ok):
            raise ConfigurationError(f"prior: uniform_weight must lie in (0, 1), got {self.uniform_weight}")


@dataclass(frozen=True)
class EventPrior:
    rate: float
    window_s: float
    location: LocationPrior
    start_time: float = 0.0
    depth_max: float = 700.0
    mb_min: float = 2.0
    mb_max: float = 8.0
    b_value: float = 1.0

    def validate(self) -> None:
        if not self.rate > 0:
            raise ConfigurationError(f"prior: event rate must be positive, got {self.rate}")
        if not self.window_s > 0:
            raise ConfigurationError(f"prior: window must be positive, got {self.window_s}")
        if not (self.depth_max > 0 and self.mb_max > self.mb_min and self.b_value > 0):
            raise ConfigurationError("prior: bad depth/magnitude settings")
        self.location.validate()

    @property
    def expected_count(self) -> float:
        return self.rate * self.window_s

    @property
    def end_time(self) -> float:
        return self.start_time + self.window_s

    def with_window(self, start_time: float, window_s: float) -> 'EventPrior':
        return replace(self, start_time=start_time, window_s=window_s)


@functools.lru_cache(maxsize=64)
def kde_normalizer(bandwidth_km: float) -> float:
    """Integral over the sphere of exp(-d^2 / 2h^2), d the great-circle distance."""
    r, h = EARTH_RADIUS_KM, bandwidth_km

    def ring(psi: float) -> float:
        return math.exp(-0.5 * (r * psi / h) ** 2) * math.sin(psi)

    # the kernel is negligible past ~40 bandwidths
    upper = min(math.pi, 40.0 * h / r)
    value, _ = quad(ring, 0.0, upper, limit=200)
    return 2.0 * math.pi * r * r * value


def kde_density(lon, lat, location: LocationPrior):
    pts = location.kde_points
    if len(pts) == 0:
        return np.zeros(np.shape(lon)) if np.ndim(lon) else 0.0
    lon_a = np.asarray(lon, dtype=float)[..., None]
    lat_a = np.asarray(lat, dtype=float)[..., None]
    d = great_circle_km(lon_a, lat_a, pts[:, 0], pts[:, 1])
    k = np.exp(-0.5 * (np.asarray(d) / location.kde_bandwidth) ** 2)
    dens = k.mean(axis=-1) / kde_normalizer(location.kde_bandwidth)
    return float(dens) if np.ndim(dens) == 0 else dens


def location_log_density(lon, lat, prior):
    """log density per km^2 of the uniform + KDE location mixture."""
    location = prior.location if isinstance(prior, EventPrior) else prior
    location.validate(allow_uniform=True)
    w = location.uniform_weight
    if len(location.kde_points) == 0:
        w = 1.0
    dens = w / SPHERE_AREA_KM2 + (1.0 - w) * np.asarray(kde_density(lon, lat, location))
    out = np.log(dens)
    return float(out) if np.ndim(out) == 0 else out


def depth_log_density(depth: float, prior: EventPrior) -> float:
    if not 0.0 <= depth <= prior.depth_max:
        return -math.inf
    return -math.log(prior.depth_max)


def _gr_rate(prior: EventPrior) -> float:
    return prior.b_value * math.log(10.0)


def mb_log_density(mb: float, prior: EventPrior) -> float:
    """Gutenberg-Richter magnitudes: exponential with rate b ln 10, truncated."""
    if not prior.mb_min <= mb <= prior.mb_max:
        return -math.inf
    k = _gr_rate(prior)
    return math.log(k) - k * (mb - prior.mb_min) - math.log1p(-math.exp(-k * (prior.mb_max - prior.mb_min)))


def event_log_density(event: Event, prior: EventPrior) -> float:
    if not prior.start_time <= event.origin_time <= prior.end_time or not event.in_bounds():
        return -math.inf
    return (location_log_density(event.lon, event.lat, prior) + depth_log_density(event.depth, prior)
            + mb_log_density(event.mb, prior) - math.log(prior.window_s))


def log_prior_events(events: Sequence[Event], prior: EventPrior) -> float:
    prior.validate()
    n = len(events)
    terms = [float(poisson.logpmf(n, prior.expected_count)) + float(gammaln(n + 1))]
    for e in events:
        lp = event_log_density(e, prior)
        if lp == -math.inf:
            return -math.inf
        terms.append(lp)
    # fsum is exactly rounded, so the total does not depend on event order
    return math.fsum(terms)


def sample_location(location: LocationPrior, rng: np.random.Generator) -> Tuple[float, float]:
    if len(location.kde_points) == 0 or rng.random() < location.uniform_weight:
        lon = rng.uniform(-180.0, 180.0)
        lat = math.degrees(math.asin(rng.uniform(-1.0, 1.0)))
        return lon, lat
    lon0, lat0 = location.kde_points[rng.integers(len(location.kde_points))]
    # Rayleigh proposal on arc length, corrected by sin(psi)/psi for the sphere
    while True:
        dist = rng.rayleigh(location.kde_bandwidth)
        psi = dist / EARTH_RADIUS_KM
        if psi < math.pi and rng.random() < math.sin(psi) / psi:
            break
    return destination_point(float(lon0), float(lat0), rng.uniform(0.0, 2.0 * math.pi), dist)


def sample_mb(prior: EventPrior, rng: np.random.Generator) -> float:
    k = _gr_rate(prior)
    span = prior.mb_max - prior.mb_min
    u = rng.random()
    return prior.mb_min - math.log1p(-u * (-math.expm1(-k * span))) / k


def sample_event(prior: EventPrior, rng: np.random.Generator) -> Event:
    lon, lat = sample_location(prior.location, rng)
    depth = rng.uniform(0.0, prior.depth_max)
    mb = sample_mb(prior, rng)
    t = prior.start_time + rng.uniform(0.0, prior.window_s)
    return Event(lon, lat, depth, t, mb)


def sample_world(prior: EventPrior, rng: np.random.Generator) -> List[Event]:
    prior.validate()
    n = int(rng.poisson(prior.expected_count))
    return [sample_event(prior, rng) for _ in range(n)]


def fit_event_prior(bulletin: Sequence[Event], config: PriorConfig) -> EventPrior:
    """Rate by maximum likelihood n / T over the training span; KDE on training locations."""
    n = len(bulletin)
    span = config.training_span_s
    if span is None and n >= 2:
        times = [e.origin_time for e in bulletin]
        span = max(times) - min(times)
    rate = config.rate
    if rate is None:
        if n == 0 or not span:
            raise ConfigurationError("prior: cannot estimate the event rate; set [prior] rate")
        rate = n / span
    location = LocationPrior(np.array([(e.lon, e.lat) for e in bulletin]).reshape(-1, 2),
                             config.kde_bandwidth_km, config.uniform_weight)
    prior = EventPrior(rate, config.window_s, location, config.start_time, config.depth_max,
                       config.mb_min, config.mb_max, config.b_value)
    prior.validate()
    _LOG.info(f"event prior: rate {rate:.3g}/s from {n} events, {len(location.kde_points)} KDE points")
    return prior


class WorldState:
    """Events, arrivals per station and noise per station; one chain owns one state."""

    def __init__(self, stations: Iterable[StationId], noise: Optional[Dict[StationId, NoiseParams]] = None) -> None:
        self.events: Dict[int, Event] = {}
        self.arrivals: Dict[StationId, Dict[int, Arrival]] = {s: {} for s in stations}
        self.noise: Dict[StationId, NoiseParams] = dict(noise or {})
        self._next_evid = 1
        self._next_arid = 1

    def copy(self) -> 'WorldState':
        other = WorldState([])
        other.events = dict(self.events)
        other.arrivals = {s: dict(a) for s, a in self.arrivals.items()}
        other.noise = dict(self.noise)
        other._next_evid = self._next_evid
        other._next_arid = self._next_arid
        return other

    @property
    def stations(self) -> List[StationId]:
        return list(self.arrivals)

    def event_list(self) -> List[Event]:
        return [self.events[k] for k in sorted(self.events)]

    def new_evid(self) -> int:
        evid = self._next_evid
        self._next_evid += 1
        return evid

    def new_arid(self) -> int:
        arid = self._next_arid
        self._next_arid += 1
        return arid

    def add_event(self, event: Event, evid: Optional[int] = None) -> int:
        if evid is None:
            evid = self.new_evid()
        self._next_evid = max(self._next_evid, evid + 1)
        self.events[evid] = event
        return evid

    def remove_event(self, evid: int) -> Event:
        for station in self.arrivals:
            for a in self.associated_at(evid, station):
                del self.arrivals[station][a.arid]
        return self.events.pop(evid)

    def put_arrival(self, arrival: Arrival) -> None:
        self._next_arid = max(self._next_arid, arrival.arid + 1)
        self.arrivals[arrival.station][arrival.arid] = arrival

    def remove_arrival(self, station: StationId, arid: int) -> Arrival:
        return self.arrivals[station].pop(arid)

    def station_arrivals(self, station: StationId) -> List[Arrival]:
        return [self.arrivals[station][k] for k in sorted(self.arrivals[station])]

    def associated_at(self, evid: int, station: StationId) -> List[Arrival]:
        return [a for a in self.station_arrivals(station) if a.evid == evid]

    def associated(self, evid: int) -> List[Arrival]:
        return [a for s in self.arrivals for a in self.associated_at(evid, s)]

    def arrival_for(self, evid: int, station: StationId, phase: PhaseId) -> Optional[Arrival]:
        for a in self.associated_at(evid, station):
            if a.phase == phase:
                return a
        return None

    def unassociated(self, station: StationId) -> List[Arrival]:
        return [a for a in self.station_arrivals(station) if a.evid is None]

    def n_unassociated(self) -> int:
        return sum(len(self.unassociated(s)) for s in self.arrivals)

    def check_invariants(self) -> None:
        seen = set()
        for station, table in self.arrivals.items():
            for arid, a in table.items():
                if a.arid != arid or a.station != station:
                    raise InvariantError(f"arrival {arid} filed under the wrong key")
                if a.evid is None:
                    continue
                if a.evid not in self.events:
                    raise InvariantError(f"arrival {arid} references missing event {a.evid}")
                key = (a.evid, station, a.phase)
                if key in seen:
                    raise InvariantError(f"duplicate arrival for {key}")
                seen.add(key)

    def summary(self) -> List[Tuple[int, float, float, float, float, float]]:
        return [(evid, e.lon, e.lat, e.depth, e.origin_time, e.mb) for evid, e in sorted(self.events.items())]


@dataclass(frozen=True)
class Gating:
    """Two events are the same source when both separations are within these limits."""
    distance_deg: float = 2.0
    time_s: float = 50.0

    @property
    def distance_km(self) -> float:
        return math.radians(self.distance_deg) * EARTH_RADIUS_KM


def within_gate(a: Event, b: Event, gating: Gating = Gating()) -> bool:
    if abs(a.origin_time - b.origin_time) > gating.time_s:
        return False
    return great_circle_km(a.lon, a.lat, b.lon, b.lat) <= gating.distance_km
