"""EM fitting of the GP models and noise priors from a ground-truth training bulletin."""
import concurrent.futures
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sigmon.base import ConfigurationError, DimensionError, PhaseId, StationId
from sigmon.envelope import from_log_vector
from sigmon.geophys import GeoModel, Station, predict_travel_time
from sigmon.gp import (DEFAULT_GP, THETA_OUTPUTS, WAVELET_GROUP, GPConfig, OutputTraining, StationPhaseModel,
                       fit_output_model, partition_regions, training_channels, untrained_model)
from sigmon.model import (NoisePriorSet, StationNoisePrior, Template, TrainedModel, default_noise_prior,
                          fit_variance_prior)
from sigmon.moves import MoveStats, Sampler, mh_sweep
from sigmon.posterior import ChainConfig, Posterior, theta_vector
from sigmon.signalmodel import (CoeffMessages, NoiseParams, SignalConfig, StationSignal, coefficient_messages,
                                estimate_noise, joint_training_density)
from sigmon.worldmodel import Event, EventPrior, PriorConfig, fit_event_prior


_LOG = logging.getLogger('sigmon.training')

THETA_VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainingConfig:
    n_em: int = 3
    n_sweeps: int = 100
    burn_in_frac: float = 0.3
    # non-mixing detector: all theta acceptance rates below this trigger a retry
    min_accept: float = 0.01
    retry_factor: float = 2.0
    max_retries: int = 1
    template_s: float = 30.0
    template_pre_s: float = 1.0
    coverage_margin_s: float = 60.0

    def validate(self) -> None:
        if self.n_em < 0 or self.n_sweeps < 1 or self.max_retries < 0:
            raise ConfigurationError("training: n_em, n_sweeps and max_retries must be non-negative")
        if not 0.0 <= self.burn_in_frac < 1.0:
            raise ConfigurationError(f"training: burn_in_frac must lie in [0, 1), got {self.burn_in_frac}")
        if not self.retry_factor > 0 or not self.template_s > 0:
            raise ConfigurationError("training: retry_factor and template_s must be positive")


DEFAULT_TRAINING = TrainingConfig()


@dataclass
class StationEStep:
    """Posterior summaries of one station's training signal with every covered event held fixed."""
    station: StationId
    # (evid, phase) -> moment-fitted mean and variance of (tt, log alpha, log rho, log gamma, log beta)
    theta: Dict[Tuple[int, PhaseId], Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    # (evid, phase) -> coefficient messages (nu, xi)
    coeffs: Dict[Tuple[int, PhaseId], Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    messages: Optional[CoeffMessages] = None
    sigma2_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phi_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    noise: Optional[NoiseParams] = None
    stats: MoveStats = field(default_factory=MoveStats)
    retries: int = 0


@dataclass
class EStepResult:
    stations: Dict[StationId, StationEStep]

    def evids_at(self, station: StationId, phase: PhaseId) -> List[int]:
        return sorted(evid for evid, ph in self.stations[station].theta if ph == phase)

    def noise(self) -> Dict[StationId, NoiseParams]:
        return {s: r.noise for s, r in self.stations.items() if r.noise is not None}


def usable_stations(signals: Dict[StationId, StationSignal], stations: Dict[StationId, Station],
                    order: int) -> Dict[StationId, StationSignal]:
    """Signals of known stations with enough samples for an AR fit; the rest are dropped with a warning."""
    out = {}
    for sta in sorted(stations):
        sig = signals.get(sta)
        if sig is None or sig.n_samples <= order + 1:
            _LOG.warning(f"station {sta}: no usable training signal, excluded")
            continue
        out[sta] = sig
    for sta in sorted(set(signals) - set(stations)):
        _LOG.warning(f"signal for unknown station {sta} ignored")
    return out


def covered_events(bulletin: Sequence[Event], signal: StationSignal, station: Station, geo: GeoModel,
                   margin_s: float) -> List[int]:
    """Indices of events with some predicted phase arrival inside the signal span."""
    out = []
    for i, ev in enumerate(bulletin):
        for phase in geo.phases:
            t = ev.origin_time + predict_travel_time(ev, station, phase, geo.velocity)
            if signal.start_time - margin_s <= t <= signal.end_time:
                out.append(i)
                break
    return out


def _estep_prior(prior: EventPrior, events: Sequence[Event], signal: StationSignal) -> EventPrior:
    """The event prior widened to contain every fixed training event."""
    t0 = min([signal.start_time] + [e.origin_time for e in events]) - 1.0
    t1 = max([signal.end_time] + [e.origin_time for e in events]) + 1.0
    mbs = [e.mb for e in events] or [prior.mb_min]
    depth = max([e.depth for e in events] + [0.0])
    return replace(prior, start_time=t0, window_s=t1 - t0, mb_min=min(prior.mb_min, min(mbs)),
                   mb_max=max(prior.mb_max, max(mbs)), depth_max=max(prior.depth_max, depth + 1.0))


def _mixing_failed(stats: MoveStats, min_accept: float) -> bool:
    names = [n for n in ('tau', 'shape') if stats.proposed.get(n)]
    return bool(names) and all(stats.rate(n) < min_accept for n in names)


def station_e_step(station: StationId, signal: StationSignal, bulletin: Sequence[Event], model: TrainedModel,
                   chain: ChainConfig, config: TrainingConfig, seed: np.random.SeedSequence,
                   noise: Optional[NoiseParams] = None) -> StationEStep:
    """MCMC over theta and noise at one station, then moment fits and coefficient messages."""
    idx = covered_events(bulletin, signal, model.stations[station], model.geo, config.coverage_margin_s)
    events = {i + 1: bulletin[i] for i in idx}
    prior = _estep_prior(model.event_prior, list(events.values()), signal)
    rng = np.random.default_rng(seed)
    cfg = replace(chain, n_sweeps=config.n_sweeps, burn_in_frac=config.burn_in_frac)
    retries = 0
    while True:
        post = Posterior({station: signal}, model, cfg, prior, leave_one_out=True)
        state = post.initial_state(None if noise is None else {station: noise})
        for evid, ev in sorted(events.items()):
            post.add_event_at_mean(state, ev, evid)
        sampler = Sampler(post)
        burn = int(math.floor(cfg.burn_in_frac * cfg.n_sweeps))
        thetas: Dict[Tuple[int, PhaseId], List[np.ndarray]] = {}
        noises: List[NoiseParams] = []
        for sweep in range(cfg.n_sweeps):
            state, _ = mh_sweep(state, sampler, rng, fixed_events=True)
            if sweep < burn:
                continue
            noises.append(state.noise[station])
            for a in state.station_arrivals(station):
                x = theta_vector(a.theta)
                x[0] -= events[a.evid].origin_time
                thetas.setdefault((a.evid, a.phase), []).append(x)
        if not events or not _mixing_failed(sampler.stats, config.min_accept) or retries >= config.max_retries:
            break
        retries += 1
        _LOG.warning(f"station {station}: theta moves not mixing ({sampler.stats.summary()}); "
                     f"retrying with steps x{config.retry_factor}")
        cfg = cfg.scaled_steps(config.retry_factor)

    result = StationEStep(station, stats=sampler.stats, retries=retries)
    for key, xs in sorted(thetas.items()):
        arr = np.array(xs)
        result.theta[key] = (arr.mean(axis=0), np.maximum(arr.var(axis=0), THETA_VAR_FLOOR))
    result.sigma2_samples = np.array([n.sigma2 for n in noises])
    result.mu_samples = np.array([n.mu for n in noises])
    result.phi_samples = np.array([n.phi for n in noises], dtype=float).reshape(len(noises), noises[0].order)
    mean_noise = NoiseParams(float(result.mu_samples.mean()), float(result.sigma2_samples.mean()),
                             tuple(result.phi_samples.mean(axis=0)))
    result.noise = mean_noise if mean_noise.is_stable() else state.noise[station]

    # messages at the posterior-mean arrivals
    arrivals = []
    keys = {}
    for (evid, phase), (mean, _) in sorted(result.theta.items()):
        x = mean.copy()
        x[0] += events[evid].origin_time
        arid = len(arrivals) + 1
        arrivals.append(post.make_event_arrival(arid, evid, events[evid], station, phase, from_log_vector(x)))
        keys[arid] = (evid, phase)
    if arrivals:
        msgs = coefficient_messages(signal, arrivals, result.noise, post.signal_config, post.basis)
        result.messages = msgs
        for arid, key in keys.items():
            result.coeffs[key] = (msgs.nu[arid], msgs.xi[arid])
    _LOG.debug(f"station {station}: {len(events)} events, {sampler.stats.summary()}")
    return result


def e_step(bulletin: Sequence[Event], signals: Dict[StationId, StationSignal], model: TrainedModel,
           chain: ChainConfig, config: TrainingConfig, seed: np.random.SeedSequence, jobs: int = 1,
           noise: Optional[Dict[StationId, NoiseParams]] = None) -> EStepResult:
    """One fixed-event MCMC per station, each conditioned on the other events' messages."""
    stations = sorted(signals)
    seeds = seed.spawn(len(stations))
    noise = noise or {}
    out: Dict[StationId, StationEStep] = {}
    if jobs > 1 and len(stations) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(station_e_step, s, signals[s], bulletin, model, chain, config, seeds[i],
                                   noise.get(s)): s for i, s in enumerate(stations)}
            for fut in concurrent.futures.as_completed(futures):
                out[futures[fut]] = fut.result()
    else:
        for i, s in enumerate(stations):
            out[s] = station_e_step(s, signals[s], bulletin, model, chain, config, seeds[i], noise.get(s))
    return EStepResult({s: out[s] for s in stations})


def _output_training(estep: StationEStep, bulletin: Sequence[Event], evids: List[int], phase: PhaseId,
                     group: str, n_coeffs: int) -> OutputTraining:
    evs = [bulletin[e - 1] for e in evids]
    lon = np.array([e.lon for e in evs], dtype=float)
    lat = np.array([e.lat for e in evs], dtype=float)
    depth = np.array([e.depth for e in evs], dtype=float)
    mb = np.array([e.mb for e in evs], dtype=float)
    if group == WAVELET_GROUP:
        nu = np.zeros((n_coeffs, len(evids)))
        xi = np.ones((n_coeffs, len(evids)))
        for j, evid in enumerate(evids):
            nu[:, j], xi[:, j] = estep.coeffs[(evid, phase)]
    else:
        k = THETA_OUTPUTS.index(group)
        nu = np.array([[estep.theta[(evid, phase)][0][k] for evid in evids]])
        xi = np.array([[estep.theta[(evid, phase)][1][k] for evid in evids]])
    return OutputTraining(list(evids), lon, lat, depth, mb, nu, xi)


def fit_noise_prior(estep: StationEStep, order: int) -> StationNoisePrior:
    """Gaussian priors on mu and phi by moment matching, variance family by maximum likelihood."""
    if len(estep.mu_samples) == 0:
        return default_noise_prior(order)
    mu_var = max(float(np.var(estep.mu_samples)), 1e-6)
    phi = estep.phi_samples.reshape(len(estep.mu_samples), order)
    if order and len(phi) > 1:
        phi_cov = np.atleast_2d(np.cov(phi, rowvar=False)) + 1e-6 * np.eye(order)
    else:
        phi_cov = 0.25 * np.eye(order)
    return StationNoisePrior(float(np.mean(estep.mu_samples)), mu_var, phi.mean(axis=0) if order else np.zeros(0),
                             phi_cov, fit_variance_prior(estep.sigma2_samples))


def m_step(estep: EStepResult, bulletin: Sequence[Event], model: TrainedModel, labels: np.ndarray,
           gp_config: GPConfig, rng: np.random.Generator) -> Tuple[Dict[Tuple[StationId, PhaseId], StationPhaseModel],
                                                                   NoisePriorSet]:
    """Refit every GP output group and every station noise prior from E-step summaries."""
    gp_models = {}
    for station in sorted(estep.stations):
        result = estep.stations[station]
        for phase in model.phases:
            spm = model.gp_for(station, phase)
            evids = sorted(e for e, ph in result.coeffs if ph == phase)
            groups = dict(spm.groups)
            if evids:
                sub = labels[np.array(evids) - 1]
                for group in THETA_OUTPUTS + (WAVELET_GROUP,):
                    data = _output_training(result, bulletin, evids, phase, group, spm.n_coeffs)
                    groups[group] = fit_output_model(group, data, spm, sub, gp_config, rng, spm.groups.get(group))
            gp_models[(station, phase)] = StationPhaseModel(spm.station, phase, spm.centroids, groups, model.geo)
    order = model.noise_priors.order
    priors = {s: fit_noise_prior(r, order) for s, r in sorted(estep.stations.items())}
    for s, p in priors.items():
        _LOG.debug(f"station {s}: variance prior {p.variance.family} {p.variance.params}")
    return gp_models, NoisePriorSet(priors, order)


def em_objective(estep: EStepResult, gp_models: Dict[Tuple[StationId, PhaseId], StationPhaseModel]) -> float:
    """Approximate joint density of the training signals: message normalizers plus GP marginals."""
    messages = [r.messages for _, r in sorted(estep.stations.items()) if r.messages is not None]
    channels = []
    for _, spm in sorted(gp_models.items()):
        for group in THETA_OUTPUTS + (WAVELET_GROUP,):
            channels.extend(training_channels(spm, group))
    return joint_training_density(messages, channels)


def extract_templates(estep: EStepResult, bulletin: Sequence[Event], signals: Dict[StationId, StationSignal],
                      config: TrainingConfig) -> List[Template]:
    """Observed signal from just before each fitted first-phase arrival, for correlation proposals."""
    out = []
    for station in sorted(estep.stations):
        sig = signals[station]
        for (evid, phase), (mean, _) in sorted(estep.stations[station].theta.items()):
            ev = bulletin[evid - 1]
            t0 = ev.origin_time + float(mean[0]) - config.template_pre_s
            piece = sig.slice_time(t0, t0 + config.template_s)
            if piece.n_samples < 0.5 * config.template_s * sig.rate_hz:
                continue
            out.append(Template(evid, ev.lon, ev.lat, ev.depth, ev.mb, station, phase,
                                piece.start_time - ev.origin_time, sig.rate_hz, piece.samples.copy()))
    return out


def initial_model(bulletin: Sequence[Event], signals: Dict[StationId, StationSignal],
                  stations: Dict[StationId, Station], geo: GeoModel, signal_config: SignalConfig,
                  event_prior: EventPrior, gp_config: GPConfig, rng: np.random.Generator) -> Tuple[TrainedModel, np.ndarray]:
    """Untrained GPs over shared regions, noise priors centred on Yule-Walker fits."""
    n = len(bulletin)
    if n:
        labels, centroids = partition_regions([e.lon for e in bulletin], [e.lat for e in bulletin],
                                              gp_config.region_count(n), rng)
    else:
        labels, centroids = np.zeros(0, dtype=int), np.zeros((0, 3))
    n_coeffs = signal_config.basis().n_coeffs
    gp_models = {}
    for sta in sorted(signals):
        for phase in geo.phases:
            spm = untrained_model(stations[sta], phase, n_coeffs, gp_config, geo)
            spm.centroids = np.asarray(centroids, dtype=float).reshape(-1, 3)
            gp_models[(sta, PhaseId(phase))] = spm
    priors = {}
    for sta, sig in sorted(signals.items()):
        yw = estimate_noise(sig.samples, signal_config.ar_order)
        priors[sta] = default_noise_prior(signal_config.ar_order, yw.sigma2)
    model = TrainedModel({s: stations[s] for s in sorted(signals)}, geo, signal_config, event_prior, gp_models,
                         NoisePriorSet(priors, signal_config.ar_order))
    return model, labels


def em_fit(bulletin: Sequence[Event], signals: Dict[StationId, StationSignal], stations: Dict[StationId, Station],
           geo: GeoModel = GeoModel(), signal_config: SignalConfig = SignalConfig(),
           prior_config: PriorConfig = PriorConfig(), gp_config: GPConfig = DEFAULT_GP,
           chain: ChainConfig = ChainConfig(), config: TrainingConfig = DEFAULT_TRAINING,
           seed: int = 0, jobs: int = 1) -> TrainedModel:
    """Alternate e_step and m_step; the returned model carries the objective trace and templates."""
    config.validate()
    chain.validate()
    geo.velocity.validate()
    signals = usable_stations(signals, stations, signal_config.ar_order)
    if not signals:
        raise DimensionError("no station has a usable training signal")
    bulletin = sorted(bulletin, key=lambda e: (e.origin_time, e.lon, e.lat))
    if not bulletin and prior_config.rate is None:
        _LOG.warning("empty training bulletin and no [prior] rate; assuming one event per window")
        prior_config = replace(prior_config, rate=1.0 / prior_config.window_s)
    event_prior = fit_event_prior(bulletin, prior_config)

    root = np.random.SeedSequence(seed)
    region_seed, *iter_seeds = root.spawn(config.n_em + 1)
    model, labels = initial_model(bulletin, signals, stations, geo, signal_config, event_prior, gp_config,
                                  np.random.default_rng(region_seed))
    _LOG.info(f"training on {len(bulletin)} events at {len(signals)} stations, "
              f"{len(model.gp_for(sorted(signals)[0], model.phases[0]).centroids)} regions")

    uncovered = set(range(1, len(bulletin) + 1))
    trace: List[float] = []
    noise = None
    estep = None
    for it in range(config.n_em):
        estep_seed, mstep_seed = iter_seeds[it].spawn(2)
        estep = e_step(bulletin, signals, model, chain, config, estep_seed, jobs, noise)
        noise = estep.noise()
        gp_models, noise_priors = m_step(estep, bulletin, model, labels, gp_config, np.random.default_rng(mstep_seed))
        model = TrainedModel(model.stations, geo, signal_config, event_prior, gp_models, noise_priors)
        objective = em_objective(estep, gp_models)
        if trace and objective < trace[-1]:
            _LOG.debug(f"EM objective decreased by {trace[-1] - objective:.3g}")
        trace.append(objective)
        _LOG.info(f"EM iteration {it + 1}/{config.n_em}: objective {objective:.6g}")
        for r in estep.stations.values():
            uncovered -= {k[0] for k in r.theta}
    if estep is not None and uncovered:
        _LOG.warning(f"{len(uncovered)} training events are not covered by any station signal")

    templates = extract_templates(estep, bulletin, signals, config) if estep is not None else []
    return TrainedModel(model.stations, geo, signal_config, event_prior, model.gp_models, model.noise_priors,
                        templates, trace)
