"""Data-driven proposal distributions for arrivals and events.

Every sampler here has a matching log density that can be evaluated at any
point, so birth and death moves can use exact proposal densities in both
directions.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import correlate
from scipy.special import logsumexp
from scipy.stats import norm, truncnorm

from sigmon.base import PhaseId, StationId
from sigmon.geophys import (EARTH_RADIUS_KM, GeoModel, Station, destination_point, great_circle_km,
                            travel_time_array)
from sigmon.model import Template
from sigmon.posterior import ChainConfig
from sigmon.signalmodel import Arrival, StationSignal
from sigmon.worldmodel import (Event, EventPrior, event_log_density, mb_log_density, sample_event,
                               sample_mb)


_LOG = logging.getLogger('sigmon.proposals')


# onset times for unassociated-arrival births

@dataclass(frozen=True, eq=False)
class OnsetProposal:
    start_time: float
    rate_hz: float
    probs: np.ndarray

    def sample(self, rng: np.random.Generator) -> float:
        n = int(rng.choice(len(self.probs), p=self.probs))
        return self.start_time + (n + rng.random()) / self.rate_hz

    def log_density(self, tau: float) -> float:
        n = int(math.floor((tau - self.start_time) * self.rate_hz))
        if not 0 <= n < len(self.probs) or self.probs[n] <= 0:
            return -math.inf
        return math.log(self.probs[n] * self.rate_hz)


def smoothed_envelope(samples: np.ndarray, rate_hz: float, smoothing_s: float) -> np.ndarray:
    width = max(1, int(round(smoothing_s * rate_hz)))
    return uniform_filter1d(np.abs(samples - np.median(samples)), size=width, mode='nearest')


def onset_proposal(signal: StationSignal, config: ChainConfig) -> OnsetProposal:
    """Sample index chosen in proportion to the smoothed signal envelope, mixed with a uniform."""
    n = signal.n_samples
    env = smoothed_envelope(signal.samples, signal.rate_hz, config.ua_smoothing_s)
    total = float(env.sum())
    probs = np.full(n, 1.0 / n)
    if total > 0:
        probs = config.ua_uniform_mix / n + (1.0 - config.ua_uniform_mix) * env / total
    probs = probs / probs.sum()
    return OnsetProposal(signal.start_time, signal.rate_hz, probs)


# Hough transform over unassociated arrivals

@dataclass(frozen=True, eq=False)
class HoughGrid:
    lon_edges: np.ndarray
    lat_edges: np.ndarray
    depth_edges: np.ndarray
    time_edges: np.ndarray
    log_probs: np.ndarray

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.log_probs.shape

    def cell_of(self, event: Event) -> Optional[Tuple[int, int, int, int]]:
        idx = []
        for edges, v in ((self.lon_edges, event.lon), (self.lat_edges, event.lat),
                         (self.depth_edges, event.depth), (self.time_edges, event.origin_time)):
            k = int(np.searchsorted(edges, v, side='right')) - 1
            if k == len(edges) - 1 and v == edges[-1]:
                k -= 1
            if not 0 <= k < len(edges) - 1:
                return None
            idx.append(k)
        return tuple(idx)

    def cell_center(self, cell: Tuple[int, int, int, int]) -> Tuple[float, float, float, float]:
        i, j, k, b = cell
        return (0.5 * (self.lon_edges[i] + self.lon_edges[i + 1]), 0.5 * (self.lat_edges[j] + self.lat_edges[j + 1]),
                0.5 * (self.depth_edges[k] + self.depth_edges[k + 1]),
                0.5 * (self.time_edges[b] + self.time_edges[b + 1]))

    def cell_log_volume(self, cell: Tuple[int, int, int, int]) -> float:
        """log of area (km^2) x depth (km) x time (s) of one cell."""
        i, j, k, b = cell
        dlon = math.radians(self.lon_edges[i + 1] - self.lon_edges[i])
        band = math.sin(math.radians(self.lat_edges[j + 1])) - math.sin(math.radians(self.lat_edges[j]))
        area = EARTH_RADIUS_KM ** 2 * dlon * band
        return (math.log(area) + math.log(self.depth_edges[k + 1] - self.depth_edges[k])
                + math.log(self.time_edges[b + 1] - self.time_edges[b]))


def _edges(lo: float, hi: float, width: float) -> np.ndarray:
    n = max(1, int(math.ceil((hi - lo) / width - 1e-9)))
    return np.linspace(lo, hi, n + 1)


def _vote_sd(config: ChainConfig, velocity: float) -> float:
    half_diag_km = 0.5 * math.hypot(config.hough_lon_deg, config.hough_lat_deg) * EARTH_RADIUS_KM * math.pi / 180.0
    return math.sqrt(config.hough_vote_sd ** 2 + config.hough_time_s ** 2 / 12.0 + (half_diag_km / velocity) ** 2 / 3.0)


def hough_grid(unassociated: Dict[StationId, Sequence[Arrival]], stations: Dict[StationId, Station],
               geo: GeoModel, prior: EventPrior, config: ChainConfig) -> HoughGrid:
    """Score every (lon, lat, depth, time) cell by greedy association of unassociated arrivals.

    Each arrival votes log(1 + N(t_cell - (tau - tt); 0, sd) / ua_rate) for a
    cell, the log-likelihood ratio of being that cell's phase arrival against
    being background. Per station, phases take their best arrival in
    configured order and an arrival serves at most one phase.
    """
    lon_lo, lon_hi, lat_lo, lat_hi = config.hough_bbox
    lon_edges = _edges(lon_lo, lon_hi, config.hough_lon_deg)
    lat_edges = _edges(lat_lo, lat_hi, config.hough_lat_deg)
    depth_edges = np.linspace(0.0, prior.depth_max, config.hough_depth_layers + 1)
    time_edges = _edges(prior.start_time, prior.end_time, config.hough_time_s)
    lon_c = 0.5 * (lon_edges[:-1] + lon_edges[1:])
    lat_c = 0.5 * (lat_edges[:-1] + lat_edges[1:])
    depth_c = 0.5 * (depth_edges[:-1] + depth_edges[1:])
    time_c = 0.5 * (time_edges[:-1] + time_edges[1:])
    glon, glat, gdep = np.meshgrid(lon_c, lat_c, depth_c, indexing='ij')
    n_space, n_time = glon.size, len(time_c)
    score = np.zeros(n_space * n_time)
    t0, dt = time_edges[0], time_edges[1] - time_edges[0]

    for sta in sorted(unassociated):
        arrivals = list(unassociated[sta])
        if not arrivals or sta not in stations:
            continue
        taus = np.array([a.theta.tau for a in arrivals])
        taken: List[np.ndarray] = []
        for phase in geo.phases:
            velocity = geo.velocity.phases[phase].surface_velocity
            sd = _vote_sd(config, velocity)
            tt = travel_time_array(glon.ravel(), glat.ravel(), gdep.ravel(), stations[sta], phase, geo.velocity)
            reach = int(math.ceil(4.0 * sd / dt))
            offsets = np.arange(-reach, reach + 1)
            flat, votes, who = [], [], []
            for k, tau in enumerate(taus):
                origin = tau - tt
                centre = np.floor((origin - t0) / dt).astype(int)
                bins = centre[:, None] + offsets[None, :]
                ok = (bins >= 0) & (bins < n_time)
                space = np.broadcast_to(np.arange(n_space)[:, None], bins.shape)[ok]
                bins = bins[ok]
                dev = time_c[bins] - origin[space]
                v = np.log1p(norm.pdf(dev, 0.0, sd) / config.ua_rate)
                flat.append(space * n_time + bins)
                votes.append(v)
                who.append(np.full(len(v), k))
            flat = np.concatenate(flat)
            votes = np.concatenate(votes)
            who = np.concatenate(who)
            free = np.ones(len(flat), dtype=bool)
            for t in taken:
                free &= t[flat] != who
            flat, votes, who = flat[free], votes[free], who[free]
            order = np.argsort(votes, kind='stable')
            best = np.zeros(n_space * n_time)
            best_who = np.full(n_space * n_time, -1)
            # ascending order: the largest vote per cell is written last
            best[flat[order]] = votes[order]
            best_who[flat[order]] = who[order]
            score += best
            taken.append(best_who)
    score = score.reshape(len(lon_c), len(lat_c), len(depth_c), n_time)
    return HoughGrid(lon_edges, lat_edges, depth_edges, time_edges, score - logsumexp(score))


def hough_plan(event_like: Tuple[float, float, float, float], unassociated: Dict[StationId, Sequence[Arrival]],
               stations: Dict[StationId, Station], geo: GeoModel, config: ChainConfig) -> List[Tuple[StationId, PhaseId, int]]:
    """Greedy (station, phase, arid) association at one hypothesised origin."""
    lon, lat, depth, time = event_like
    plan = []
    for sta in sorted(unassociated):
        if sta not in stations:
            continue
        used = set()
        for phase in geo.phases:
            sd = _vote_sd(config, geo.velocity.phases[phase].surface_velocity)
            tt = float(travel_time_array(np.array([lon]), np.array([lat]), depth, stations[sta], phase,
                                         geo.velocity)[0])
            best, best_vote = None, 0.0
            for a in unassociated[sta]:
                if a.arid in used:
                    continue
                vote = math.log1p(norm.pdf(a.theta.tau - time - tt, 0.0, sd) / config.ua_rate)
                if vote > best_vote and abs(a.theta.tau - time - tt) <= 4.0 * sd:
                    best, best_vote = a, vote
            if best is not None:
                used.add(best.arid)
                plan.append((sta, phase, best.arid))
    return plan


def _plan_mb(plan, unassociated, stations, geo, centre) -> Optional[float]:
    lon, lat = centre[0], centre[1]
    by_arid = {a.arid: a for arrivals in unassociated.values() for a in arrivals}
    estimates = []
    for sta, phase, arid in plan:
        pa = geo.amplitude.phases.get(phase)
        dist = great_circle_km(lon, lat, stations[sta].lon, stations[sta].lat)
        if pa is None or dist <= 0:
            continue
        estimates.append((math.log(by_arid[arid].theta.alpha) + pa.c_dist * math.log(dist) + pa.c_0) / pa.c_mb)
    return float(np.mean(estimates)) if estimates else None


class HoughProposal:
    """Event proposal from a Hough grid; magnitude from amplitude consistency inside the cell."""

    def __init__(self, grid: HoughGrid, unassociated: Dict[StationId, Sequence[Arrival]],
                 stations: Dict[StationId, Station], geo: GeoModel, prior: EventPrior, config: ChainConfig) -> None:
        self.grid = grid
        self.unassociated = unassociated
        self.stations = stations
        self.geo = geo
        self.prior = prior
        self.config = config
        self._mb_memo: Dict[tuple, Optional[float]] = {}

    def _cell_mb(self, cell) -> Optional[float]:
        if cell not in self._mb_memo:
            centre = self.grid.cell_center(cell)
            plan = hough_plan(centre, self.unassociated, self.stations, self.geo, self.config)
            self._mb_memo[cell] = _plan_mb(plan, self.unassociated, self.stations, self.geo, centre)
        return self._mb_memo[cell]

    def _mb_log_density(self, mb: float, cell) -> float:
        centre = self._cell_mb(cell)
        if centre is None:
            return mb_log_density(mb, self.prior)
        return float(norm.logpdf(mb, centre, self.config.hough_mb_sd))

    def sample(self, rng: np.random.Generator) -> Tuple[Event, List[Tuple[StationId, PhaseId, int]], float]:
        g = self.grid
        probs = np.exp(g.log_probs.ravel())
        flat = int(rng.choice(len(probs), p=probs / probs.sum()))
        cell = tuple(int(c) for c in np.unravel_index(flat, g.shape))
        i, j, k, b = cell
        lon = rng.uniform(g.lon_edges[i], g.lon_edges[i + 1])
        s_lo, s_hi = (math.sin(math.radians(g.lat_edges[j])), math.sin(math.radians(g.lat_edges[j + 1])))
        lat = math.degrees(math.asin(min(1.0, max(-1.0, rng.uniform(s_lo, s_hi)))))
        depth = rng.uniform(g.depth_edges[k], g.depth_edges[k + 1])
        time = rng.uniform(g.time_edges[b], g.time_edges[b + 1])
        centre = self._cell_mb(cell)
        if centre is None:
            mb = sample_mb(self.prior, rng)
        else:
            mb = rng.normal(centre, self.config.hough_mb_sd)
        event = Event(lon, lat, depth, time, mb)
        plan = hough_plan(g.cell_center(cell), self.unassociated, self.stations, self.geo, self.config)
        return event, plan, self.log_density(event)

    def log_density(self, event: Event) -> float:
        cell = self.grid.cell_of(event)
        if cell is None:
            return -math.inf
        return float(self.grid.log_probs[cell]) - self.grid.cell_log_volume(cell) + self._mb_log_density(event.mb, cell)


def hough_propose(unassociated: Dict[StationId, Sequence[Arrival]], stations: Dict[StationId, Station],
                  geo: GeoModel, prior: EventPrior, config: ChainConfig,
                  rng: np.random.Generator) -> Tuple[Event, List[Tuple[StationId, PhaseId, int]], float]:
    grid = hough_grid(unassociated, stations, geo, prior, config)
    return HoughProposal(grid, unassociated, stations, geo, prior, config).sample(rng)


# waveform correlation against training templates

def normalized_xcorr(template: np.ndarray, signal: np.ndarray) -> np.ndarray:
    """Pearson correlation of template with every full-overlap window of signal."""
    t = np.asarray(template, dtype=float)
    s = np.asarray(signal, dtype=float)
    m = len(t)
    if m == 0 or len(s) < m:
        return np.zeros(0)
    tc = t - t.mean()
    t_norm = math.sqrt(float(tc @ tc))
    num = correlate(s, tc, mode='valid', method='auto')
    c1 = np.concatenate([[0.0], np.cumsum(s)])
    c2 = np.concatenate([[0.0], np.cumsum(s * s)])
    wsum = c1[m:] - c1[:-m]
    wsq = c2[m:] - c2[:-m]
    var = np.maximum(wsq - wsum * wsum / m, 0.0)
    den = t_norm * np.sqrt(var)
    out = np.zeros(len(num))
    ok = den > 1e-12 * max(1.0, t_norm)
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def rayleigh_log_density_km2(distance_km: float, sigma_km: float) -> float:
    """Density per km^2 of a point at Rayleigh(sigma) arc distance in a uniform direction.

    Distances are truncated at the antipode, as the sampler redraws beyond it.
    """
    psi = distance_km / EARTH_RADIUS_KM
    if psi >= math.pi:
        return -math.inf
    log_mass = math.log(-math.expm1(-0.5 * (math.pi * EARTH_RADIUS_KM / sigma_km) ** 2))
    if psi < 1e-9:
        return -math.log(2.0 * math.pi * sigma_km ** 2) - log_mass
    return (math.log(distance_km / sigma_km ** 2) - 0.5 * (distance_km / sigma_km) ** 2
            - math.log(2.0 * math.pi * EARTH_RADIUS_KM * math.sin(psi)) - log_mass)


@dataclass(frozen=True)
class LibraryComponent:
    evid: int
    lon: float
    lat: float
    depth: float
    mb: float
    origin_time: float
    score: float


class CorrelationProposal:
    """Gaussian mixture around training events weighted by waveform correlation."""

    def __init__(self, components: List[LibraryComponent], prior: EventPrior, config: ChainConfig) -> None:
        self.components = components
        self.prior = prior
        self.config = config
        if components:
            logits = config.corr_temperature * np.array([c.score for c in components])
            self.log_weights = logits - logsumexp(logits)
        else:
            self.log_weights = np.zeros(0)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def _depth_dist(self, centre: float):
        sd = self.config.corr_sigma_depth
        return truncnorm((0.0 - centre) / sd, (self.prior.depth_max - centre) / sd, loc=centre, scale=sd)

    def sample(self, rng: np.random.Generator) -> Tuple[Event, float]:
        if not self.components:
            event = sample_event(self.prior, rng)
            return event, self.log_density(event)
        k = int(rng.choice(len(self.components), p=self.weights / self.weights.sum()))
        c = self.components[k]
        while True:
            dist = rng.rayleigh(self.config.corr_sigma_loc_km)
            if dist < math.pi * EARTH_RADIUS_KM:
                break
        lon, lat = destination_point(c.lon, c.lat, rng.uniform(0.0, 2.0 * math.pi), dist)
        depth = float(self._depth_dist(c.depth).rvs(random_state=rng))
        time = rng.normal(c.origin_time, self.config.corr_sigma_t)
        mb = rng.normal(c.mb, self.config.corr_sigma_mb)
        event = Event(lon, lat, depth, time, mb)
        return event, self.log_density(event)

    def log_density(self, event: Event) -> float:
        if not self.components:
            return event_log_density(event, self.prior)
        terms = []
        for lw, c in zip(self.log_weights, self.components):
            d = great_circle_km(event.lon, event.lat, c.lon, c.lat)
            terms.append(lw + rayleigh_log_density_km2(d, self.config.corr_sigma_loc_km)
                         + float(self._depth_dist(c.depth).logpdf(event.depth))
                         + float(norm.logpdf(event.origin_time, c.origin_time, self.config.corr_sigma_t))
                         + float(norm.logpdf(event.mb, c.mb, self.config.corr_sigma_mb)))
        return float(logsumexp(terms))


def correlation_library(signals: Dict[StationId, StationSignal], templates: Sequence[Template],
                        prior: EventPrior, config: ChainConfig) -> CorrelationProposal:
    """Score each training event: per station the best correlation over lags, summed over stations."""
    by_event: Dict[int, List[Template]] = {}
    for t in templates:
        by_event.setdefault(t.evid, []).append(t)
    components = []
    for evid in sorted(by_event):
        group = by_event[evid]
        per_station: Dict[StationId, Tuple[float, float]] = {}
        for t in group:
            sig = signals.get(t.station)
            if sig is None or abs(t.rate_hz - sig.rate_hz) > 1e-9:
                continue
            ncc = normalized_xcorr(t.samples, sig.samples)
            if len(ncc) == 0:
                continue
            lag = int(np.argmax(ncc))
            origin = sig.start_time + lag / sig.rate_hz - t.offset_s
            if ncc[lag] > per_station.get(t.station, (-math.inf, 0.0))[0]:
                per_station[t.station] = (float(ncc[lag]), origin)
        if not per_station:
            continue
        best_station = max(per_station, key=lambda s: (per_station[s][0], s))
        score = math.fsum(v for v, _ in per_station.values())
        head = group[0]
        components.append(LibraryComponent(evid, head.lon, head.lat, head.depth, head.mb,
                                           per_station[best_station][1], score))
    _LOG.debug(f"correlation library: {len(components)} components from {len(by_event)} training events")
    return CorrelationProposal(components, prior, config)


def correlation_propose(signals: Dict[StationId, StationSignal], templates: Sequence[Template], prior: EventPrior,
                        config: ChainConfig, rng: np.random.Generator) -> Tuple[Event, float]:
    return correlation_library(signals, templates, prior, config).sample(rng)
