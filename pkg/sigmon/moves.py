"""Metropolis-Hastings and reversible-jump moves over a WorldState.

Every move builds a proposed copy of the state, computes the log acceptance
ratio from Posterior.local_log_joint plus exact proposal densities in both
directions, and keeps the copy if accepted. Moves never edit the state they
were given.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
from scipy.stats import norm

from sigmon.base import StationId
from sigmon.envelope import ArrivalParams, envelope_at, from_log_vector
from sigmon.geophys import destination_point
from sigmon.posterior import Posterior, theta_vector
from sigmon.proposals import (CorrelationProposal, HoughProposal, OnsetProposal, correlation_library,
                              hough_grid, onset_proposal, smoothed_envelope)
from sigmon.signalmodel import Arrival, first_sample_after
from sigmon.worldmodel import Event, WorldState, log_prior_events


_LOG = logging.getLogger('sigmon.moves')


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """One uniform draw per decision, so the random stream never depends on the outcome."""
    u = rng.random()
    if not log_ratio > -math.inf:
        return False
    return u < math.exp(min(0.0, log_ratio))


@dataclass
class MoveStats:
    proposed: Dict[str, int] = field(default_factory=dict)
    accepted: Dict[str, int] = field(default_factory=dict)

    def record(self, name: str, ok: bool) -> None:
        self.proposed[name] = self.proposed.get(name, 0) + 1
        self.accepted[name] = self.accepted.get(name, 0) + int(ok)

    def rate(self, name: str) -> float:
        n = self.proposed.get(name, 0)
        return self.accepted.get(name, 0) / n if n else 0.0

    def merge(self, other: 'MoveStats') -> None:
        for k, v in other.proposed.items():
            self.proposed[k] = self.proposed.get(k, 0) + v
            self.accepted[k] = self.accepted.get(k, 0) + other.accepted.get(k, 0)

    def summary(self) -> str:
        return ' '.join(f"{k}={self.accepted.get(k, 0)}/{v}" for k, v in sorted(self.proposed.items()))


class ProposalCache:
    """Proposal distributions that depend on the signals, or on the unassociated arrivals only."""

    def __init__(self, post: Posterior) -> None:
        self.post = post
        self._onsets: Dict[StationId, OnsetProposal] = {}
        self._envelopes: Dict[StationId, np.ndarray] = {}
        self._library: Optional[CorrelationProposal] = None
        self._hough_key = None
        self._hough: Optional[HoughProposal] = None

    def onset(self, station: StationId) -> OnsetProposal:
        if station not in self._onsets:
            self._onsets[station] = onset_proposal(self.post.signals[station], self.post.config)
        return self._onsets[station]

    def envelope(self, station: StationId) -> np.ndarray:
        if station not in self._envelopes:
            sig = self.post.signals[station]
            self._envelopes[station] = smoothed_envelope(sig.samples, sig.rate_hz, self.post.config.ua_smoothing_s)
        return self._envelopes[station]

    def library(self) -> CorrelationProposal:
        if self._library is None:
            post = self.post
            self._library = correlation_library(post.signals, post.model.templates, post.prior, post.config)
        return self._library

    def hough(self, state: WorldState) -> HoughProposal:
        post = self.post
        ua = {s: state.unassociated(s) for s in post.stations}
        key = tuple((s, tuple((a.arid, a.theta.tau, a.theta.alpha) for a in ua[s])) for s in sorted(ua))
        if key != self._hough_key:
            grid = hough_grid(ua, post.model.stations, post.model.geo, post.prior, post.config)
            self._hough = HoughProposal(grid, ua, post.model.stations, post.model.geo, post.prior, post.config)
            self._hough_key = key
        return self._hough

    def sample_event(self, state: WorldState, rng: np.random.Generator) -> Event:
        if rng.random() < self.post.config.hough_weight:
            return self.hough(state).sample(rng)[0]
        return self.library().sample(rng)[0]

    def event_log_density(self, event: Event, state: WorldState) -> float:
        w = self.post.config.hough_weight
        terms = []
        if w > 0:
            terms.append(math.log(w) + self.hough(state).log_density(event))
        if w < 1:
            terms.append(math.log(1.0 - w) + self.library().log_density(event))
        return float(np.logaddexp.reduce(terms))


class Sampler:
    def __init__(self, post: Posterior) -> None:
        self.post = post
        self.proposals = ProposalCache(post)
        self.stats = MoveStats()


# helpers

def with_theta(arrival: Arrival, theta: ArrivalParams) -> Arrival:
    return Arrival(arrival.arid, arrival.station, arrival.phase, theta, arrival.coeff_mean, arrival.coeff_var,
                   arrival.evid)


def _evids(*arrivals: Arrival) -> List[int]:
    return sorted({a.evid for a in arrivals if a.evid is not None})


def _delta(post: Posterior, old: WorldState, new: WorldState, stations, evids) -> float:
    stations, evids = list(stations), list(evids)
    return post.local_log_joint(new, stations, evids) - post.local_log_joint(old, stations, evids)


def _replace_event(post: Posterior, state: WorldState, evid: int, event: Event) -> None:
    state.events[evid] = event
    for a in state.associated(evid):
        state.put_arrival(post.rebind(a, event))


# single-site random-walk moves

def _theta_moves(state: WorldState, sampler: Sampler, station: StationId, arid: int,
                 rng: np.random.Generator, stats: MoveStats) -> WorldState:
    post, cfg = sampler.post, sampler.post.config
    for comp in range(5):
        name = 'tau' if comp == 0 else 'shape'
        step = cfg.step_tau if comp == 0 else cfg.step_log_shape
        if step == 0:
            stats.record(name, True)
            continue
        a = state.arrivals[station][arid]
        x = theta_vector(a.theta)
        x[comp] += step * rng.standard_normal()
        try:
            moved = with_theta(a, from_log_vector(x))
        except OverflowError:
            rng.random()
            stats.record(name, False)
            continue
        proposal = state.copy()
        proposal.put_arrival(moved)
        ok = accept(_delta(post, state, proposal, [station], _evids(a)), rng)
        stats.record(name, ok)
        if ok:
            state = proposal
    return state


def _noise_moves(state: WorldState, sampler: Sampler, station: StationId, rng: np.random.Generator,
                 stats: MoveStats) -> WorldState:
    post, cfg = sampler.post, sampler.post.config
    candidates = [('mu', cfg.step_mu, None), ('sigma2', cfg.step_log_sigma2, None)]
    candidates += [('phi', cfg.step_phi, i) for i in range(state.noise[station].order)]
    for name, step, index in candidates:
        if step == 0:
            stats.record(name, True)
            continue
        noise = state.noise[station]
        z = step * rng.standard_normal()
        log_jacobian = 0.0
        if name == 'mu':
            moved = replace(noise, mu=noise.mu + z)
        elif name == 'sigma2':
            # random walk on log sigma2, target density is on sigma2
            moved = replace(noise, sigma2=noise.sigma2 * math.exp(z))
            log_jacobian = z
        else:
            phi = list(noise.phi)
            phi[index] += z
            moved = replace(noise, phi=tuple(phi))
        proposal = state.copy()
        proposal.noise[station] = moved
        ok = accept(_delta(post, state, proposal, [station], []) + log_jacobian, rng)
        stats.record(name, ok)
        if ok:
            state = proposal
    return state


def _event_moves(state: WorldState, sampler: Sampler, evid: int, rng: np.random.Generator,
                 stats: MoveStats) -> WorldState:
    post, cfg = sampler.post, sampler.post.config
    for name, step in (('location', cfg.step_location_km), ('depth', cfg.step_depth),
                       ('time', cfg.step_time), ('mb', cfg.step_mb)):
        if step == 0:
            stats.record(name, True)
            continue
        event = state.events[evid]
        if name == 'location':
            # uniform azimuth and half-normal arc length: symmetric on the sphere
            dist = abs(step * rng.standard_normal())
            lon, lat = destination_point(event.lon, event.lat, rng.uniform(0.0, 2.0 * math.pi), dist)
            moved = event.moved(lon=lon, lat=lat)
        elif name == 'depth':
            moved = event.moved(depth=event.depth + step * rng.standard_normal())
        elif name == 'time':
            moved = event.moved(origin_time=event.origin_time + step * rng.standard_normal())
        else:
            moved = event.moved(mb=event.mb + step * rng.standard_normal())
        if not moved.in_bounds():
            rng.random()
            stats.record(name, False)
            continue
        proposal = state.copy()
        _replace_event(post, proposal, evid, moved)
        ok = accept(_delta(post, state, proposal, post.stations, [evid]), rng)
        stats.record(name, ok)
        if ok:
            state = proposal
    return state


def mh_sweep(state: WorldState, sampler: Sampler, rng: np.random.Generator,
             fixed_events: bool = False) -> Tuple[WorldState, MoveStats]:
    """One cycle over every arrival's theta, every station's noise and every event's attributes."""
    stats = MoveStats()
    for station in sampler.post.stations:
        for arid in sorted(state.arrivals[station]):
            state = _theta_moves(state, sampler, station, arid, rng, stats)
        state = _noise_moves(state, sampler, station, rng, stats)
    if not fixed_events:
        for evid in sorted(state.events):
            state = _event_moves(state, sampler, evid, rng, stats)
    sampler.stats.merge(stats)
    return state, stats


# unassociated arrivals

def ua_birth_log_ratio(small: WorldState, big: WorldState, sampler: Sampler, station: StationId,
                       arrival: Arrival) -> float:
    """log ratio for adding arrival to small, giving big; its negation is the reverse death."""
    post = sampler.post
    log_q_birth = sampler.proposals.onset(station).log_density(arrival.theta.tau) + post.ua_shape_log_prior(arrival.theta)
    log_q_death = -math.log(len(big.unassociated(station)))
    return _delta(post, small, big, [station], []) - log_q_birth + log_q_death


def ua_birth(state: WorldState, sampler: Sampler, station: StationId,
             rng: np.random.Generator) -> Tuple[WorldState, float]:
    post, cfg = sampler.post, sampler.post.config
    tau = sampler.proposals.onset(station).sample(rng)
    shape = np.asarray(cfg.ua_log_shape_mean) + np.asarray(cfg.ua_log_shape_sd) * rng.standard_normal(4)
    proposal = state.copy()
    arrival = post.make_unassociated(proposal.new_arid(), station, from_log_vector(np.concatenate([[tau], shape])))
    proposal.put_arrival(arrival)
    return proposal, ua_birth_log_ratio(state, proposal, sampler, station, arrival)


def ua_death(state: WorldState, sampler: Sampler, station: StationId, rng: np.random.Generator,
             arid: Optional[int] = None) -> Tuple[WorldState, float]:
    candidates = state.unassociated(station)
    if not candidates:
        return state, -math.inf
    arrival = state.arrivals[station][arid] if arid is not None else candidates[int(rng.integers(len(candidates)))]
    proposal = state.copy()
    proposal.remove_arrival(station, arrival.arid)
    return proposal, -ua_birth_log_ratio(proposal, state, sampler, station, arrival)


def unassociated_birth_death(state: WorldState, sampler: Sampler, rng: np.random.Generator) -> WorldState:
    for station in sampler.post.stations:
        if rng.random() < 0.5:
            name, (proposal, log_ratio) = 'ua_birth', ua_birth(state, sampler, station, rng)
        else:
            name, (proposal, log_ratio) = 'ua_death', ua_death(state, sampler, station, rng)
        ok = accept(log_ratio, rng)
        sampler.stats.record(name, ok)
        if ok:
            state = proposal
    return state


# event birth and death

@dataclass
class JumpPlan:
    state: WorldState
    log_ratio: float
    terms: Dict[str, float]


def associate(state: WorldState, post: Posterior, event: Event, evid: int,
              rng: Optional[np.random.Generator] = None,
              forced: Optional[Dict[Tuple[StationId, str], Optional[int]]] = None):
    """Sequential stochastic association of unassociated arrivals to a hypothesised event.

    Per (station, phase), in order: candidates are unclaimed unassociated
    arrivals within the gate of the predicted arrival time, weighted by a
    Gaussian in the residual, plus a 'none' option. With forced, the choices
    are given and only their probability is computed.
    """
    cfg = post.config
    choices = []
    log_prob = 0.0
    claimed: Set[int] = set()
    for station in post.stations:
        ua = state.unassociated(station)
        for phase in post.phases:
            mean, _ = post.theta_prior(event, evid, station, phase)
            cands = [a for a in ua if a.arid not in claimed and abs(a.theta.tau - mean[0]) <= cfg.assoc_gate_s]
            weights = [math.exp(-0.5 * ((a.theta.tau - mean[0]) / cfg.assoc_sd_s) ** 2) for a in cands]
            probs = np.array(weights + [cfg.assoc_none_weight])
            probs = probs / probs.sum()
            if forced is not None:
                target = forced.get((station, phase))
                arids = [a.arid for a in cands]
                if target is None:
                    k = len(cands)
                elif target in arids:
                    k = arids.index(target)
                else:
                    return choices, -math.inf
            else:
                k = int(rng.choice(len(probs), p=probs))
            log_prob += _log(float(probs[k]))
            arid = cands[k].arid if k < len(cands) else None
            if arid is not None:
                claimed.add(arid)
            choices.append(((station, phase), arid))
    return choices, log_prob


def aux_sites(parents: List[Tuple[StationId, int]], reverse: bool = False) -> List[Tuple[StationId, int, int]]:
    """(station, arid, theta component) in scan order. The reversed scan is the
    time reversal of the forward one, which the backward annealing path needs."""
    sites = [(station, arid, comp) for station, arid in parents for comp in range(5)]
    return sites[::-1] if reverse else sites


def _aux_transition(state: WorldState, post: Posterior, parents: List[Tuple[StationId, int]], beta: float,
                    rng: np.random.Generator, reverse: bool = False) -> WorldState:
    """One random-walk pass over the parent-sampled thetas, targeting prior x likelihood^beta."""
    cfg = post.config
    for station, arid, comp in aux_sites(parents, reverse):
        step = cfg.step_tau if comp == 0 else cfg.step_log_shape
        a = state.arrivals[station][arid]
        x = theta_vector(a.theta)
        x[comp] += step * rng.standard_normal()
        try:
            moved = with_theta(a, from_log_vector(x))
        except OverflowError:
            rng.random()
            continue
        event = state.events[a.evid]
        proposal = state.copy()
        proposal.put_arrival(moved)
        log_ratio = (post.arrival_theta_log_prior(moved, event) - post.arrival_theta_log_prior(a, event)
                     + beta * (post.station_log_likelihood(proposal, station)
                               - post.station_log_likelihood(state, station)))
        if accept(log_ratio, rng):
            state = proposal
    return state


def _betas(n_aux: int) -> np.ndarray:
    return np.arange(n_aux + 2, dtype=float) / (n_aux + 1)


def anneal_forward(big: WorldState, small: WorldState, post: Posterior, parents: List[Tuple[StationId, int]],
                   rng: np.random.Generator) -> Tuple[float, WorldState]:
    """Annealed importance weight for the parent-sampled thetas, and the adapted state."""
    betas = _betas(post.config.n_aux)
    base = post.log_likelihood(small)
    log_w = 0.0
    x = big
    for t in range(1, len(betas)):
        log_w += (betas[t] - betas[t - 1]) * (post.log_likelihood(x) - base)
        if t < len(betas) - 1:
            x = _aux_transition(x, post, parents, betas[t], rng)
    return log_w, x


def anneal_reverse(big: WorldState, small: WorldState, post: Posterior, parents: List[Tuple[StationId, int]],
                   rng: np.random.Generator) -> float:
    """The same weight along a path generated backwards from the current state."""
    betas = _betas(post.config.n_aux)
    n = len(betas) - 1
    base = post.log_likelihood(small)
    path: List[Optional[WorldState]] = [None] * n
    path[n - 1] = big
    for t in range(n - 1, 0, -1):
        path[t - 1] = _aux_transition(path[t], post, parents, betas[t], rng, reverse=True)
    return math.fsum((betas[t] - betas[t - 1]) * (post.log_likelihood(path[t - 1]) - base) for t in range(1, n + 1))


def _jump_terms(small: WorldState, big: WorldState, sampler: Sampler, evid: int, kept: List[Arrival],
                n_parents: int, log_w: float, log_q_assoc: float, log_q_event: float) -> Tuple[float, Dict[str, float]]:
    """Birth log ratio from small to big; the death from big to small is its negation."""
    post, cfg = sampler.post, sampler.post.config
    event = big.events[evid]
    terms = {
        'prior_events': log_prior_events(big.event_list(), post.prior) - log_prior_events(small.event_list(), post.prior),
        'ua_prior': math.fsum(post.ua_log_prior(big, s) - post.ua_log_prior(small, s) for s in post.stations),
        'assoc_prior': math.fsum(post.arrival_theta_log_prior(big.arrivals[a.station][a.arid], event) for a in kept),
        'log_w': log_w,
        'log_q_event': log_q_event,
        'log_q_assoc': log_q_assoc,
        'log_q_reverse': (-math.log(len(big.events)) + len(kept) * _log(cfg.p_keep)
                          + n_parents * _log(1.0 - cfg.p_keep)),
    }
    log_ratio = (terms['prior_events'] + terms['ua_prior'] + terms['assoc_prior'] + terms['log_w']
                 - terms['log_q_event'] - terms['log_q_assoc'] + terms['log_q_reverse'])
    if math.isnan(log_ratio):
        log_ratio = -math.inf
    return log_ratio, terms


def birth_plan(state: WorldState, sampler: Sampler, rng: np.random.Generator,
               event: Optional[Event] = None) -> JumpPlan:
    post = sampler.post
    if event is None:
        event = sampler.proposals.sample_event(state, rng)
    log_q_event = sampler.proposals.event_log_density(event, state)
    big = state.copy()
    evid = big.add_event(event)
    if not event.in_bounds() or log_prior_events(big.event_list(), post.prior) == -math.inf:
        return JumpPlan(state, -math.inf, {})
    choices, log_q_assoc = associate(state, post, event, evid, rng=rng)
    kept, parents = [], []
    for (station, phase), arid in choices:
        if arid is not None:
            a = post.make_event_arrival(arid, evid, event, station, phase, state.arrivals[station][arid].theta)
            kept.append(a)
        else:
            theta, _ = post.sample_parent_theta(event, evid, station, phase, rng)
            a = post.make_event_arrival(big.new_arid(), evid, event, station, phase, theta)
            parents.append((station, a.arid))
        big.put_arrival(a)
    log_q_parents = math.fsum(post.arrival_theta_log_prior(big.arrivals[s][k], event) for s, k in parents)
    log_w, big = anneal_forward(big, state, post, parents, rng)
    log_ratio, terms = _jump_terms(state, big, sampler, evid, kept, len(parents), log_w, log_q_assoc, log_q_event)
    terms['log_q_parents'] = log_q_parents
    return JumpPlan(big, log_ratio, terms)


def death_plan(state: WorldState, sampler: Sampler, rng: np.random.Generator, evid: Optional[int] = None,
               keep: Optional[Set[int]] = None) -> JumpPlan:
    post = sampler.post
    if not state.events:
        return JumpPlan(state, -math.inf, {})
    if evid is None:
        evids = sorted(state.events)
        evid = evids[int(rng.integers(len(evids)))]
    event = state.events[evid]
    arrivals = state.associated(evid)
    if keep is None:
        keep = {a.arid for a in arrivals if rng.random() < post.config.p_keep}
    small = state.copy()
    small.remove_event(evid)
    kept = [a for a in arrivals if a.arid in keep]
    for a in kept:
        small.put_arrival(post.make_unassociated(a.arid, a.station, a.theta))
    # same (station, phase) order a birth creates them in
    order = {(s, p): k for k, (s, p) in enumerate((s, p) for s in post.stations for p in post.phases)}
    parents = [(a.station, a.arid) for a in sorted(arrivals, key=lambda a: order[(a.station, a.phase)])
               if a.arid not in keep]
    forced = {(a.station, a.phase): (a.arid if a.arid in keep else None) for a in arrivals}
    _, log_q_assoc = associate(small, post, event, evid, forced=forced)
    log_q_event = sampler.proposals.event_log_density(event, small)
    log_w = anneal_reverse(state, small, post, parents, rng)
    log_ratio, terms = _jump_terms(small, state, sampler, evid, kept, len(parents), log_w, log_q_assoc, log_q_event)
    return JumpPlan(small, -log_ratio, terms)


def event_birth_death(state: WorldState, sampler: Sampler, rng: np.random.Generator) -> WorldState:
    if rng.random() < 0.5:
        name, plan = 'birth', birth_plan(state, sampler, rng)
    else:
        name, plan = 'death', death_plan(state, sampler, rng)
    ok = accept(plan.log_ratio, rng)
    sampler.stats.record(name, ok)
    if ok:
        _LOG.debug(f"{name} accepted: {len(plan.state.events)} events")
        return plan.state
    return state


def split_merge_repropose(state: WorldState, sampler: Sampler, rng: np.random.Generator) -> WorldState:
    """Compositions of deaths and births accepted with the product of their ratios.

    split = death, birth, birth; merge = death, death, birth; repropose =
    death, birth. split and merge are each other's reverse and are chosen
    with equal probability.
    """
    kind = ('split', 'merge', 'repropose')[int(rng.integers(3))]
    needed = 2 if kind == 'merge' else 1
    if len(state.events) < needed:
        return state
    steps = {'split': 'dbb', 'merge': 'ddb', 'repropose': 'db'}[kind]
    current, log_ratio = state, 0.0
    for step in steps:
        plan = death_plan(current, sampler, rng) if step == 'd' else birth_plan(current, sampler, rng)
        log_ratio += plan.log_ratio
        current = plan.state
        if log_ratio == -math.inf:
            break
    ok = log_ratio > -math.inf and accept(log_ratio, rng)
    sampler.stats.record(kind, ok)
    return current if ok else state


# swap, align and peak-shift

def _relabel(post: Posterior, state: WorldState, arrival: Arrival, evid: Optional[int], phase) -> Arrival:
    if evid is None:
        return post.make_unassociated(arrival.arid, arrival.station, arrival.theta)
    return post.make_event_arrival(arrival.arid, evid, state.events[evid], arrival.station, phase, arrival.theta)


def _swap_pairs(state: WorldState, station: StationId) -> Tuple[List[Arrival], List[int]]:
    """Arrivals in time order, and the adjacent positions holding at least one associated arrival."""
    ordered = sorted(state.station_arrivals(station), key=lambda a: (a.theta.tau, a.arid))
    pairs = [i for i in range(len(ordered) - 1) if ordered[i].associated or ordered[i + 1].associated]
    return ordered, pairs


def swap_plan(state: WorldState, sampler: Sampler, station: StationId, i: int) -> Tuple[WorldState, float]:
    """Swap the labels at positions i and i+1. The number of eligible pairs can
    differ after the swap, so it enters the ratio."""
    post = sampler.post
    ordered, pairs = _swap_pairs(state, station)
    a, b = ordered[i], ordered[i + 1]
    proposal = state.copy()
    proposal.put_arrival(_relabel(post, state, a, b.evid, b.phase))
    proposal.put_arrival(_relabel(post, state, b, a.evid, a.phase))
    _, pairs_after = _swap_pairs(proposal, station)
    log_ratio = (_delta(post, state, proposal, [station], _evids(a, b))
                 + math.log(len(pairs)) - math.log(len(pairs_after)))
    return proposal, log_ratio


def swap_move(state: WorldState, sampler: Sampler, rng: np.random.Generator) -> WorldState:
    """Exchange the (event, phase) labels of two arrivals adjacent in time."""
    post = sampler.post
    if not post.stations:
        return state
    station = post.stations[int(rng.integers(len(post.stations)))]
    _, pairs = _swap_pairs(state, station)
    if not pairs:
        return state
    proposal, log_ratio = swap_plan(state, sampler, station, pairs[int(rng.integers(len(pairs)))])
    ok = accept(log_ratio, rng)
    sampler.stats.record('swap', ok)
    return proposal if ok else state


def align_target(arrival: Arrival, sampler: Sampler, state: WorldState) -> float:
    """tau shifted by the lag that best aligns the predicted waveform with the signal."""
    post = sampler.post
    sig = post.signals[arrival.station]
    noise = state.noise[arrival.station]
    rate = sig.rate_hz
    width = post.basis.signal_len
    lag_max = int(round(post.config.align_max_lag_s * rate))
    n0 = first_sample_after(arrival.theta.tau, sig.start_time, rate)
    k = np.arange(width)
    g = envelope_at(sig.start_time + (n0 + k) / rate, arrival.theta)
    modulation = post.basis.matrix @ arrival.coeff_mean
    y = sig.samples - noise.mu
    if float(np.abs(modulation).max(initial=0.0)) > 1e-12:
        template, observed = g * modulation, y
    else:
        template, observed = g, np.abs(y)
    best_lag, best = 0, -math.inf
    for lag in range(-lag_max, lag_max + 1):
        idx = n0 + k + lag
        ok = (idx >= 0) & (idx < sig.n_samples)
        if not ok.any():
            continue
        score = float(template[ok] @ observed[idx[ok]])
        if score > best:
            best_lag, best = lag, score
    return arrival.theta.tau + best_lag / rate


def peak_target(arrival: Arrival, sampler: Sampler) -> float:
    """tau that puts the modelled peak on the largest smoothed-envelope sample after the onset."""
    post = sampler.post
    sig = post.signals[arrival.station]
    env = sampler.proposals.envelope(arrival.station)
    theta = arrival.theta
    lo = max(0, first_sample_after(theta.tau, sig.start_time, sig.rate_hz))
    hi = min(sig.n_samples, first_sample_after(theta.tau + theta.rho + post.config.peak_search_s,
                                               sig.start_time, sig.rate_hz))
    if hi <= lo:
        return theta.tau
    peak = sig.start_time + (lo + int(np.argmax(env[lo:hi]))) / sig.rate_hz
    return peak - theta.rho


def _targeted_tau_move(state: WorldState, sampler: Sampler, rng: np.random.Generator, name: str,
                       associated_only: bool) -> WorldState:
    post = sampler.post
    pool = [a for s in post.stations for a in state.station_arrivals(s) if a.associated or not associated_only]
    if not pool:
        return state
    a = pool[int(rng.integers(len(pool)))]
    sd = post.config.align_sd_s

    def target(arr: Arrival) -> float:
        return align_target(arr, sampler, state) if name == 'align' else peak_target(arr, sampler)

    centre = target(a)
    moved = with_theta(a, replace(a.theta, tau=centre + sd * rng.standard_normal()))
    back = target(moved)
    proposal = state.copy()
    proposal.put_arrival(moved)
    log_ratio = (_delta(post, state, proposal, [a.station], _evids(a))
                 + float(norm.logpdf(a.theta.tau, back, sd)) - float(norm.logpdf(moved.theta.tau, centre, sd)))
    ok = accept(log_ratio, rng)
    sampler.stats.record(name, ok)
    return proposal if ok else state


def align_move(state: WorldState, sampler: Sampler, rng: np.random.Generator) -> WorldState:
    return _targeted_tau_move(state, sampler, rng, 'align', associated_only=True)


def peak_shift_move(state: WorldState, sampler: Sampler, rng: np.random.Generator) -> WorldState:
    return _targeted_tau_move(state, sampler, rng, 'peak_shift', associated_only=False)
