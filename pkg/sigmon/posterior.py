"""The collapsed posterior over a WorldState, with the caches MCMC moves rely on."""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm, poisson

from sigmon.base import CapacityError, ConfigurationError, PhaseId, StationId
from sigmon.envelope import ArrivalParams, from_log_vector, log_shape
from sigmon.gp import predict_theta, predict_wavelets
from sigmon.model import TrainedModel
from sigmon.signalmodel import (Arrival, LikelihoodCache, NoiseParams, StationSignal,
                                collapsed_log_likelihood, estimate_noise)
from sigmon.worldmodel import Event, EventPrior, WorldState, log_prior_events


_LOG = logging.getLogger('sigmon.posterior')


@dataclass(frozen=True)
class ChainConfig:
    n_sweeps: int = 200
    burn_in_frac: float = 0.2
    thin: int = 1
    # random-walk step sizes
    step_tau: float = 0.5
    step_log_shape: float = 0.2
    step_location_km: float = 25.0
    step_depth: float = 20.0
    step_time: float = 2.0
    step_mb: float = 0.2
    step_mu: float = 0.05
    step_log_sigma2: float = 0.1
    step_phi: float = 0.05
    # unassociated arrivals
    ua_rate: float = 1.0 / 600.0
    ua_log_shape_mean: Tuple[float, float, float, float] = (0.0, math.log(1.5), math.log(0.3), math.log(0.15))
    ua_log_shape_sd: Tuple[float, float, float, float] = (1.0, 0.5, 0.5, 0.5)
    ua_uniform_mix: float = 0.1
    ua_smoothing_s: float = 2.0
    # event proposals
    hough_lon_deg: float = 2.0
    hough_lat_deg: float = 2.0
    hough_depth_layers: int = 1
    hough_time_s: float = 10.0
    hough_bbox: Tuple[float, float, float, float] = (-180.0, 180.0, -90.0, 90.0)
    hough_vote_sd: float = 3.0
    hough_mb_sd: float = 0.3
    hough_weight: float = 0.5
    corr_temperature: float = 10.0
    corr_sigma_loc_km: float = 10.0
    corr_sigma_t: float = 2.0
    corr_sigma_depth: float = 10.0
    corr_sigma_mb: float = 0.5
    assoc_gate_s: float = 15.0
    assoc_sd_s: float = 3.0
    assoc_none_weight: float = 0.2
    n_aux: int = 20
    p_keep: float = 0.5
    # custom moves
    align_max_lag_s: float = 3.0
    align_sd_s: float = 0.3
    peak_search_s: float = 10.0
    # per-sweep attempt counts
    event_moves: int = 2
    ua_moves: int = 1
    k_max: int = 4
    seed: int = 0

    def validate(self) -> None:
        steps = (self.step_tau, self.step_log_shape, self.step_location_km, self.step_depth, self.step_time,
                 self.step_mb, self.step_mu, self.step_log_sigma2, self.step_phi)
        if any(s < 0 for s in steps):
            raise ConfigurationError("inference: step sizes must be >= 0")
        for name in ('hough_weight', 'p_keep', 'ua_uniform_mix', 'burn_in_frac'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"inference: {name} must lie in [0, 1]")
        if self.n_aux < 0 or self.n_sweeps < 0:
            raise ConfigurationError("inference: counts must be >= 0")

    def scaled_steps(self, factor: float) -> 'ChainConfig':
        return replace(self, step_tau=self.step_tau * factor, step_log_shape=self.step_log_shape * factor,
                       step_mu=self.step_mu * factor, step_log_sigma2=self.step_log_sigma2 * factor,
                       step_phi=self.step_phi * factor)


def theta_vector(theta: ArrivalParams) -> np.ndarray:
    return np.array((theta.tau,) + log_shape(theta))


def event_key(event: Event) -> tuple:
    return (event.lon, event.lat, event.depth, event.origin_time, event.mb)


class Posterior:
    """log p(state, signals) split into the pieces moves need to update locally."""

    def __init__(self, signals: Dict[StationId, StationSignal], model: TrainedModel, config: ChainConfig,
                 prior: Optional[EventPrior] = None, leave_one_out: bool = False,
                 use_signals: bool = True) -> None:
        self.signals = signals
        self.model = model
        self.config = config
        self.prior = prior or model.event_prior
        self.leave_one_out = leave_one_out
        self.use_signals = use_signals
        self.signal_config = replace(model.signal, k_max=config.k_max)
        self.basis = self.signal_config.basis()
        self.n_coeffs = self.basis.n_coeffs
        self._segment_caches = {s: LikelihoodCache() for s in signals}
        self._station_memo: Dict[tuple, float] = {}
        self._gp_memo: Dict[tuple, tuple] = {}
        self._ua_mean = np.zeros(self.n_coeffs)
        self._ua_var = np.ones(self.n_coeffs)

    @property
    def stations(self) -> List[StationId]:
        return sorted(self.signals)

    @property
    def phases(self) -> Tuple[str, ...]:
        return self.model.phases

    def window(self, station: StationId) -> Tuple[float, float]:
        sig = self.signals[station]
        return sig.start_time, sig.end_time

    # GP priors

    def _gp(self, event: Event, evid: Optional[int], station: StationId, phase: PhaseId) -> tuple:
        exclude = evid if self.leave_one_out else None
        key = (event_key(event), exclude, station, phase)
        hit = self._gp_memo.get(key)
        if hit is None:
            spm = self.model.gp_for(station, phase)
            th_mean, th_var = predict_theta(event, spm, exclude)
            w_mean, w_var = predict_wavelets(event, spm, exclude)
            hit = (th_mean, th_var, w_mean, w_var)
            if len(self._gp_memo) > 50000:
                self._gp_memo.clear()
            self._gp_memo[key] = hit
        return hit

    def theta_prior(self, event: Event, evid: Optional[int], station: StationId,
                    phase: PhaseId) -> Tuple[np.ndarray, np.ndarray]:
        """Mean/variance of (tau, log alpha, log rho, log gamma, log beta)."""
        th_mean, th_var, _, _ = self._gp(event, evid, station, phase)
        mean = th_mean.copy()
        mean[0] += event.origin_time
        return mean, th_var

    def make_event_arrival(self, arid: int, evid: int, event: Event, station: StationId, phase: PhaseId,
                           theta: ArrivalParams) -> Arrival:
        _, _, w_mean, w_var = self._gp(event, evid, station, phase)
        return Arrival(arid, station, phase, theta, w_mean, w_var, evid)

    def make_unassociated(self, arid: int, station: StationId, theta: ArrivalParams) -> Arrival:
        return Arrival(arid, station, None, theta, self._ua_mean, self._ua_var, None)

    def rebind(self, arrival: Arrival, event: Event) -> Arrival:
        """Same theta, coefficient prior recomputed for a moved event."""
        return self.make_event_arrival(arrival.arid, arrival.evid, event, arrival.station, arrival.phase,
                                       arrival.theta)

    def sample_parent_theta(self, event: Event, evid: Optional[int], station: StationId, phase: PhaseId,
                            rng: np.random.Generator) -> Tuple[ArrivalParams, float]:
        mean, var = self.theta_prior(event, evid, station, phase)
        x = mean + np.sqrt(var) * rng.standard_normal(5)
        return from_log_vector(x), float(np.sum(norm.logpdf(x, mean, np.sqrt(var))))

    # prior terms

    def arrival_theta_log_prior(self, arrival: Arrival, event: Event) -> float:
        mean, var = self.theta_prior(event, arrival.evid, arrival.station, arrival.phase)
        return float(np.sum(norm.logpdf(theta_vector(arrival.theta), mean, np.sqrt(var))))

    def ua_shape_log_prior(self, theta: ArrivalParams) -> float:
        x = np.array(log_shape(theta))
        return float(np.sum(norm.logpdf(x, self.config.ua_log_shape_mean, self.config.ua_log_shape_sd)))

    def ua_log_prior(self, state: WorldState, station: StationId) -> float:
        t0, t1 = self.window(station)
        span = t1 - t0
        arrivals = state.unassociated(station)
        n = len(arrivals)
        terms = [float(poisson.logpmf(n, self.config.ua_rate * span)) + float(gammaln(n + 1))]
        for a in arrivals:
            if not t0 <= a.theta.tau <= t1:
                return -math.inf
            terms.append(self.ua_shape_log_prior(a.theta) - math.log(span))
        return math.fsum(terms)

    def noise_log_prior(self, station: StationId, noise: NoiseParams) -> float:
        if not noise.sigma2 > 0 or not noise.is_stable():
            return -math.inf
        return self.model.noise_priors.for_station(station).log_pdf(noise)

    def event_arrivals_log_prior(self, state: WorldState, evid: int) -> float:
        event = state.events[evid]
        return math.fsum(self.arrival_theta_log_prior(a, event) for a in state.associated(evid))

    def log_prior(self, state: WorldState) -> float:
        lp = log_prior_events(state.event_list(), self.prior)
        if lp == -math.inf:
            return lp
        terms = [lp]
        terms += [self.event_arrivals_log_prior(state, evid) for evid in sorted(state.events)]
        terms += [self.ua_log_prior(state, s) for s in self.stations]
        terms += [self.noise_log_prior(s, state.noise[s]) for s in self.stations]
        return math.fsum(terms)

    # likelihood

    def station_log_likelihood(self, state: WorldState, station: StationId) -> float:
        if not self.use_signals:
            return 0.0
        arrivals = state.station_arrivals(station)
        noise = state.noise[station]
        key = (station, noise, tuple(sorted(a.fingerprint for a in arrivals)))
        value = self._station_memo.get(key)
        if value is None:
            try:
                value = collapsed_log_likelihood(self.signals[station], arrivals, noise, self.signal_config,
                                                 self.basis, self._segment_caches[station])
            except CapacityError:
                value = -math.inf
            if len(self._station_memo) > 20000:
                self._station_memo.clear()
            self._station_memo[key] = value
        return value

    def log_likelihood(self, state: WorldState, stations: Optional[Iterable[StationId]] = None) -> float:
        stations = self.stations if stations is None else stations
        return math.fsum(self.station_log_likelihood(state, s) for s in stations)

    def log_joint(self, state: WorldState) -> float:
        lp = self.log_prior(state)
        if lp == -math.inf:
            return lp
        return lp + self.log_likelihood(state)

    def local_log_joint(self, state: WorldState, stations: Iterable[StationId], evids: Iterable[int]) -> float:
        """The terms of log_joint that touch the given stations and events.

        Differences of local_log_joint between two states equal differences of
        log_joint whenever nothing outside the scope changed.
        """
        lp = log_prior_events(state.event_list(), self.prior)
        if lp == -math.inf:
            return lp
        terms = [lp]
        for evid in sorted(set(evids)):
            if evid in state.events:
                terms.append(self.event_arrivals_log_prior(state, evid))
        for s in sorted(set(stations)):
            terms.append(self.ua_log_prior(state, s))
            terms.append(self.noise_log_prior(s, state.noise[s]))
        total = math.fsum(terms)
        if total == -math.inf:
            return total
        return total + math.fsum(self.station_log_likelihood(state, s) for s in sorted(set(stations)))

    # state construction

    def initial_state(self, noise: Optional[Dict[StationId, NoiseParams]] = None) -> WorldState:
        if noise is None:
            noise = {s: estimate_noise(self.signals[s].samples, self.signal_config.ar_order) for s in self.stations}
        return WorldState(self.stations, noise)

    def add_event_with_parents(self, state: WorldState, event: Event, rng: np.random.Generator,
                               evid: Optional[int] = None) -> int:
        """Add an event and parent-sample every (station, phase) arrival."""
        evid = state.add_event(event, evid)
        for station in self.stations:
            for phase in self.phases:
                theta, _ = self.sample_parent_theta(event, evid, station, phase, rng)
                state.put_arrival(self.make_event_arrival(state.new_arid(), evid, event, station, phase, theta))
        return evid

    def add_event_at_mean(self, state: WorldState, event: Event, evid: Optional[int] = None) -> int:
        evid = state.add_event(event, evid)
        for station in self.stations:
            for phase in self.phases:
                mean, _ = self.theta_prior(event, evid, station, phase)
                state.put_arrival(self.make_event_arrival(state.new_arid(), evid, event, station, phase,
                                                          from_log_vector(mean)))
        return evid
