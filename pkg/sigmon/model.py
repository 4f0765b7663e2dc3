"""The trained model: GP models, noise priors, templates and the event prior."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import invgamma, norm

from sigmon.base import ConfigurationError, PhaseId, StationId
from sigmon.geophys import (AmplitudeModel, GeoModel, PhaseAmplitude, PhaseVelocity, Station,
                            VelocityModel)
from sigmon.gp import DEFAULT_GP, StationPhaseModel, untrained_model
from sigmon.signalmodel import NoiseParams, SignalConfig
from sigmon.worldmodel import EventPrior, LocationPrior


_LOG = logging.getLogger('sigmon.model')

MODEL_VERSION = 1

VARIANCE_FAMILIES = ('lognormal', 'invgamma', 'truncnorm')


@dataclass(frozen=True)
class VariancePrior:
    family: str
    params: Tuple[float, float]

    def __post_init__(self) -> None:
        if self.family not in VARIANCE_FAMILIES:
            raise ConfigurationError(f"unknown variance prior family {self.family!r}")
        if not self.params[1] > 0 or (self.family == 'invgamma' and not self.params[0] > 0):
            raise ConfigurationError(f"invalid {self.family} parameters {self.params}")

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a, b = self.params
        with np.errstate(divide='ignore', invalid='ignore'):
            if self.family == 'lognormal':
                out = norm.logpdf(np.log(x), a, b) - np.log(x)
            elif self.family == 'invgamma':
                out = invgamma.logpdf(x, a, loc=0.0, scale=b)
            else:
                out = norm.logpdf(x, a, b) - norm.logsf(0.0, a, b)
        return np.where(x > 0, out, -np.inf)

    def sample(self, rng: np.random.Generator) -> float:
        a, b = self.params
        if self.family == 'lognormal':
            return float(math.exp(rng.normal(a, b)))
        if self.family == 'invgamma':
            return float(b / rng.gamma(a))
        while True:
            x = rng.normal(a, b)
            if x > 0:
                return float(x)


def _fit_lognormal(x: np.ndarray) -> VariancePrior:
    lx = np.log(x)
    return VariancePrior('lognormal', (float(lx.mean()), float(max(lx.std(), 1e-6))))


def _fit_invgamma(x: np.ndarray) -> VariancePrior:
    a, _, scale = invgamma.fit(x, floc=0.0)
    return VariancePrior('invgamma', (float(a), float(scale)))


def _fit_truncnorm(x: np.ndarray) -> VariancePrior:
    def negative(p: np.ndarray) -> float:
        loc, log_scale = p
        return -float(np.sum(norm.logpdf(x, loc, math.exp(log_scale)) - norm.logsf(0.0, loc, math.exp(log_scale))))

    start = np.array([x.mean(), math.log(max(x.std(), 1e-6))])
    res = minimize(negative, start, method='Nelder-Mead', options={'xatol': 1e-8, 'fatol': 1e-10, 'maxiter': 2000})
    return VariancePrior('truncnorm', (float(res.x[0]), float(math.exp(res.x[1]))))


def default_variance_prior(samples: Sequence[float] = ()) -> VariancePrior:
    x = np.asarray([s for s in samples if s > 0], dtype=float)
    center = float(np.log(x.mean())) if len(x) else 0.0
    return VariancePrior('lognormal', (center, 1.0))


def fit_variance_prior(samples: Sequence[float]) -> VariancePrior:
    """Fit every family by maximum likelihood and keep the most likely one."""
    x = np.asarray(samples, dtype=float)
    x = x[x > 0]
    if len(x) < 2 or np.ptp(x) <= 0:
        _LOG.debug(f"variance prior: {len(x)} usable samples, keeping the default family")
        return default_variance_prior(x)
    best, best_ll = None, -math.inf
    for fitter in (_fit_lognormal, _fit_invgamma, _fit_truncnorm):
        try:
            cand = fitter(x)
        except (ConfigurationError, ValueError, RuntimeError, FloatingPointError) as exc:
            _LOG.debug(f"variance prior fit {fitter.__name__} failed: {exc}")
            continue
        ll = float(np.sum(cand.log_pdf(x)))
        if np.isfinite(ll) and ll > best_ll:
            best, best_ll = cand, ll
    return best if best is not None else default_variance_prior(x)


@dataclass(frozen=True, eq=False)
class StationNoisePrior:
    mu_mean: float
    mu_var: float
    phi_mean: np.ndarray
    phi_cov: np.ndarray
    variance: VariancePrior

    def log_pdf(self, noise: NoiseParams) -> float:
        lp = float(norm.logpdf(noise.mu, self.mu_mean, math.sqrt(self.mu_var)))
        phi = np.asarray(noise.phi, dtype=float)
        if len(phi) != len(self.phi_mean):
            return -math.inf
        if len(phi):
            diff = phi - self.phi_mean
            sign, logdet = np.linalg.slogdet(self.phi_cov)
            lp += -0.5 * (len(phi) * math.log(2 * math.pi) + logdet + float(diff @ np.linalg.solve(self.phi_cov, diff)))
        return lp + float(self.variance.log_pdf(noise.sigma2))

    def to_dict(self) -> dict:
        return {"mu": [self.mu_mean, self.mu_var], "phi_mean": self.phi_mean.tolist(),
                "phi_cov": self.phi_cov.tolist(), "variance": [self.variance.family, list(self.variance.params)]}

    @classmethod
    def from_dict(cls, d: dict) -> 'StationNoisePrior':
        r = len(d["phi_mean"])
        fam, params = d["variance"]
        return cls(d["mu"][0], d["mu"][1], np.array(d["phi_mean"], dtype=float),
                   np.array(d["phi_cov"], dtype=float).reshape(r, r), VariancePrior(fam, tuple(params)))


def default_noise_prior(order: int, sigma2_center: float = 1.0) -> StationNoisePrior:
    return StationNoisePrior(0.0, 1.0, np.zeros(order), 0.25 * np.eye(order),
                             VariancePrior('lognormal', (math.log(sigma2_center), 1.0)))


@dataclass
class NoisePriorSet:
    priors: Dict[StationId, StationNoisePrior] = field(default_factory=dict)
    order: int = 2

    def for_station(self, station: StationId) -> StationNoisePrior:
        return self.priors.get(station) or default_noise_prior(self.order)

    def to_dict(self) -> dict:
        return {"order": self.order, "priors": {s: p.to_dict() for s, p in sorted(self.priors.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> 'NoisePriorSet':
        return cls({StationId(s): StationNoisePrior.from_dict(p) for s, p in d["priors"].items()}, d["order"])


@dataclass(frozen=True, eq=False)
class Template:
    """Observed signal of a training event at one station, starting at its arrival."""
    evid: int
    lon: float
    lat: float
    depth: float
    mb: float
    station: StationId
    phase: PhaseId
    offset_s: float
    rate_hz: float
    samples: np.ndarray

    def to_dict(self) -> dict:
        return {"evid": self.evid, "loc": [self.lon, self.lat, self.depth, self.mb], "station": self.station,
                "phase": self.phase, "offset_s": self.offset_s, "rate_hz": self.rate_hz,
                "samples": np.asarray(self.samples).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> 'Template':
        lon, lat, depth, mb = d["loc"]
        return cls(d["evid"], lon, lat, depth, mb, StationId(d["station"]), PhaseId(d["phase"]), d["offset_s"],
                   d["rate_hz"], np.array(d["samples"], dtype=float))


def geo_to_dict(geo: GeoModel) -> dict:
    return {"velocity": {p: [v.surface_velocity, v.depth_coefficient, v.fixed_delay]
                         for p, v in geo.velocity.phases.items()},
            "amplitude": {p: [a.c_mb, a.c_dist, a.c_0] for p, a in geo.amplitude.phases.items()}}


def geo_from_dict(d: dict) -> GeoModel:
    return GeoModel(VelocityModel({p: PhaseVelocity(*v) for p, v in d["velocity"].items()}),
                    AmplitudeModel({p: PhaseAmplitude(*a) for p, a in d["amplitude"].items()}))


def prior_to_dict(prior: EventPrior) -> dict:
    return {"rate": prior.rate, "window_s": prior.window_s, "start_time": prior.start_time,
            "depth_max": prior.depth_max, "mb_min": prior.mb_min, "mb_max": prior.mb_max, "b_value": prior.b_value,
            "kde_points": prior.location.kde_points.tolist(), "kde_bandwidth": prior.location.kde_bandwidth,
            "uniform_weight": prior.location.uniform_weight}


def prior_from_dict(d: dict) -> EventPrior:
    location = LocationPrior(np.array(d["kde_points"], dtype=float).reshape(-1, 2), d["kde_bandwidth"],
                             d["uniform_weight"])
    return EventPrior(d["rate"], d["window_s"], location, d["start_time"], d["depth_max"], d["mb_min"],
                      d["mb_max"], d["b_value"])


class TrainedModel:
    def __init__(self, stations: Dict[StationId, Station], geo: GeoModel, signal: SignalConfig,
                 event_prior: EventPrior, gp_models: Dict[Tuple[StationId, PhaseId], StationPhaseModel],
                 noise_priors: NoisePriorSet, templates: Optional[List[Template]] = None,
                 em_trace: Optional[List[float]] = None, version: int = MODEL_VERSION) -> None:
        self.stations = stations
        self.geo = geo
        self.signal = signal
        self.event_prior = event_prior
        self.gp_models = gp_models
        self.noise_priors = noise_priors
        self.templates = templates or []
        self.em_trace = em_trace or []
        self.version = version

    @property
    def phases(self) -> Tuple[str, ...]:
        return self.geo.phases

    @property
    def n_coeffs(self) -> int:
        return self.signal.basis().n_coeffs

    def gp_for(self, station: StationId, phase: PhaseId) -> StationPhaseModel:
        key = (station, phase)
        if key not in self.gp_models:
            self.gp_models[key] = untrained_model(self.stations[station], phase, self.n_coeffs, DEFAULT_GP, self.geo)
        return self.gp_models[key]

    def to_dict(self) -> dict:
        sig = self.signal
        return {
            "version": self.version,
            "stations": {s: [st.lon, st.lat] for s, st in sorted(self.stations.items())},
            "geo": geo_to_dict(self.geo),
            "signal": {"rate_hz": sig.rate_hz, "window_s": sig.window_s, "levels": sig.levels,
                       "wavelet": sig.wavelet, "mode": sig.mode, "envelope_floor": sig.envelope_floor,
                       "max_coda_s": sig.max_coda_s, "k_max": sig.k_max, "xi_max": sig.xi_max,
                       "ar_order": sig.ar_order},
            "basis": sig.basis().descriptor(),
            "event_prior": prior_to_dict(self.event_prior),
            "gp": [m.to_dict() for _, m in sorted(self.gp_models.items())],
            "noise_priors": self.noise_priors.to_dict(),
            "templates": [t.to_dict() for t in self.templates],
            "em_trace": list(self.em_trace),
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'TrainedModel':
        stations = {StationId(s): Station(StationId(s), lon, lat) for s, (lon, lat) in d["stations"].items()}
        geo = geo_from_dict(d["geo"])
        signal = SignalConfig(**d["signal"])
        realized = signal.basis().n_coeffs
        if realized != d["basis"]["n_coeffs"]:
            raise ConfigurationError(f"model basis has {d['basis']['n_coeffs']} coefficients, "
                                     f"this build produces {realized}")
        gp_models = {}
        for m in d["gp"]:
            spm = StationPhaseModel.from_dict(m, geo)
            gp_models[(spm.station.sta, spm.phase)] = spm
        return cls(stations, geo, signal, prior_from_dict(d["event_prior"]), gp_models,
                   NoisePriorSet.from_dict(d["noise_priors"]), [Template.from_dict(t) for t in d["templates"]],
                   list(d["em_trace"]), d["version"])
