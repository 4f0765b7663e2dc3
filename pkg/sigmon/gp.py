"""Gaussian-process models of arrival parameters and wavelet coefficients.

Every output shares the covariance

    k(e, e') = phi(e)^T B phi(e') + sigma_f2 * Matern32(d(e, e'); l) + sigma_n2 * [same instance]

with d the great-circle distance between event locations. The linear feature
part is fitted once per output in weight space; the Matern part is factored
into independent k-means regions, each with its own hyperparameters. Wavelet
coefficient outputs of one (station, phase, region) share hyperparameters.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize
from sklearn.cluster import KMeans

from sigmon.base import ConfigurationError, DimensionError, FitFailure
from sigmon.geophys import (GeoModel, Station, great_circle_km, predict_log_amplitude,
                            predict_travel_time, unit_vectors)
from sigmon.signalmodel import ChannelData


_LOG = logging.getLogger('sigmon.gp')

SQRT3 = math.sqrt(3.0)
THETA_OUTPUTS = ('tt', 'amp', 'onset', 'peak_decay', 'coda_decay')
WAVELET_GROUP = 'wavelet'


def wavelet_output(c: int) -> str:
    return f"w{c}"


def parse_output(output_id: str) -> Tuple[str, int]:
    """Map an output id to (group, index within group)."""
    if output_id in THETA_OUTPUTS:
        return output_id, 0
    if output_id.startswith('w') and output_id[1:].isdigit():
        return WAVELET_GROUP, int(output_id[1:])
    raise ConfigurationError(f"unknown GP output {output_id!r}")


class FeatureMap:
    """Parameter-specific linear features of an event seen from a station."""

    _DIMS = {'none': 0, 'amp': 4, 'onset': 2, 'decay': 3}

    def __init__(self, name: str) -> None:
        if name not in self._DIMS:
            raise ConfigurationError(f"unknown feature map {name!r}")
        self.name = name

    @property
    def dim(self) -> int:
        return self._DIMS[self.name]

    def __call__(self, lon, lat, mb, station: Optional[Station]) -> np.ndarray:
        lon, lat, mb = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (lon, lat, mb))
        n = len(lon)
        if self.name == 'none':
            return np.zeros((n, 0))
        ones = np.ones(n)
        if self.name == 'onset':
            return np.stack([ones, mb], axis=1)
        if station is None:
            raise ConfigurationError(f"feature map {self.name!r} needs the station location")
        delta = np.atleast_1d(great_circle_km(lon, lat, station.lon, station.lat))
        if self.name == 'amp':
            return np.stack([ones, delta, np.sin(delta / 15000.0), np.cos(delta / 15000.0)], axis=1)
        return np.stack([ones, mb, delta], axis=1)


GROUP_FEATURES = {'tt': 'none', 'amp': 'amp', 'onset': 'onset', 'peak_decay': 'decay',
                  'coda_decay': 'decay', WAVELET_GROUP: 'none'}


@dataclass(frozen=True, eq=False)
class GPHyper:
    sigma_f2: float
    lengthscale: float
    sigma_n2: float
    B: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    features: str = 'none'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'B', np.atleast_2d(np.asarray(self.B, dtype=float)).reshape(
            FeatureMap(self.features).dim, FeatureMap(self.features).dim))

    def validate(self) -> None:
        if self.sigma_f2 < 0 or not self.lengthscale > 0 or not self.sigma_n2 > 0:
            raise ConfigurationError(f"invalid GP hyperparameters {self}")
        if self.B.size:
            cholesky(self.B + 1e-8 * np.eye(len(self.B)), lower=True)

    def with_scalars(self, sigma_f2: float, lengthscale: float, sigma_n2: float) -> 'GPHyper':
        return GPHyper(sigma_f2, lengthscale, sigma_n2, self.B, self.features)

    def to_dict(self) -> dict:
        return {"sigma_f2": self.sigma_f2, "lengthscale": self.lengthscale, "sigma_n2": self.sigma_n2,
                "B": self.B.tolist(), "features": self.features}

    @classmethod
    def from_dict(cls, d: dict) -> 'GPHyper':
        return cls(d["sigma_f2"], d["lengthscale"], d["sigma_n2"], np.array(d["B"], dtype=float), d["features"])


@dataclass(frozen=True)
class GPConfig:
    n_regions: Optional[int] = None
    points_per_region: int = 20
    restarts: int = 5
    lengthscale_bounds: Tuple[float, float] = (5.0, 5000.0)
    variance_bounds: Tuple[float, float] = (1e-6, 1e3)
    jitter_max: float = 1e-8
    # default (sigma_f2, lengthscale_km, sigma_n2) per output group
    defaults: Dict[str, Tuple[float, float, float]] = field(default_factory=lambda: {
        'tt': (4.0, 500.0, 1.0),
        'amp': (0.5, 500.0, 0.25),
        'onset': (0.1, 500.0, 0.05),
        'peak_decay': (0.1, 500.0, 0.05),
        'coda_decay': (0.1, 500.0, 0.05),
        WAVELET_GROUP: (0.5, 200.0, 0.5),
    })
    # prior mean of the linear intercept per output group
    intercepts: Dict[str, float] = field(default_factory=lambda: {
        'amp': 0.0, 'onset': math.log(1.5), 'peak_decay': math.log(0.3), 'coda_decay': math.log(0.15),
    })
    # prior weight variances per feature map
    weight_variances: Dict[str, Tuple[float, ...]] = field(default_factory=lambda: {
        'none': (), 'amp': (1.0, 1e-6, 1.0, 1.0), 'onset': (1.0, 0.1), 'decay': (1.0, 0.1, 1e-7),
    })

    def region_count(self, n_train: int) -> int:
        if self.n_regions is not None:
            return max(1, min(self.n_regions, max(n_train, 1)))
        return max(1, n_train // self.points_per_region)

    def default_hyper(self, group: str) -> GPHyper:
        sf2, ell, sn2 = self.defaults[group]
        feats = GROUP_FEATURES[group]
        return GPHyper(sf2, ell, sn2, np.diag(self.weight_variances[feats]), feats)

    def prior_weights(self, group: str) -> Tuple[np.ndarray, np.ndarray]:
        feats = GROUP_FEATURES[group]
        var = np.asarray(self.weight_variances[feats], dtype=float)
        b0 = np.zeros(len(var))
        if len(var):
            b0[0] = self.intercepts.get(group, 0.0)
        return b0, np.diag(var)


DEFAULT_GP = GPConfig()


def matern32(dist: np.ndarray, lengthscale: float) -> np.ndarray:
    a = SQRT3 * np.asarray(dist, dtype=float) / lengthscale
    return (1.0 + a) * np.exp(-a)


def covariance(e1, e2, hyper: GPHyper, features: FeatureMap, station: Optional[Station] = None,
               same_instance: bool = False) -> float:
    d = great_circle_km(e1.lon, e1.lat, e2.lon, e2.lat)
    value = hyper.sigma_f2 * float(matern32(d, hyper.lengthscale))
    if features.dim:
        p1 = features(e1.lon, e1.lat, e1.mb, station)[0]
        p2 = features(e2.lon, e2.lat, e2.mb, station)[0]
        value += float(p1 @ hyper.B @ p2)
    if same_instance:
        value += hyper.sigma_n2
    return value


def partition_regions(lons: Sequence[float], lats: Sequence[float], k: int,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """k-means on unit vectors. Returns (assignment, centroids)."""
    n = len(lons)
    if k < 1 or k > n:
        raise ConfigurationError(f"cannot form {k} regions from {n} events")
    x = unit_vectors(np.asarray(lons), np.asarray(lats)).reshape(n, 3)
    if k == 1:
        return np.zeros(n, dtype=int), x.mean(axis=0, keepdims=True)
    km = KMeans(n_clusters=k, n_init=10, max_iter=100, random_state=int(rng.integers(2 ** 31 - 1)))
    labels = km.fit_predict(x)
    return labels.astype(int), km.cluster_centers_


def assign_region(lon: float, lat: float, centroids: np.ndarray) -> Optional[int]:
    if len(centroids) == 0:
        return None
    u = unit_vectors(np.array([lon]), np.array([lat]))[0]
    return int(np.argmin(np.sum((centroids - u) ** 2, axis=1)))


def _cholesky_stack(a: np.ndarray, jitter_max: float) -> np.ndarray:
    n = a.shape[-1]
    scale = max(float(np.mean(np.trace(a, axis1=-2, axis2=-1))) / max(n, 1), 1e-300)
    eye = np.eye(n)
    for rel in (0.0, 1e-12, 1e-10, jitter_max):
        try:
            return np.linalg.cholesky(a + rel * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise FitFailure(f"covariance not positive definite after jitter {jitter_max:g} * trace / n")


@dataclass
class RegionData:
    """Inputs of one region: residual targets (outputs x points) with message variances."""
    lon: np.ndarray
    lat: np.ndarray
    resid: np.ndarray
    xi: np.ndarray
    linear_cov: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.lon = np.asarray(self.lon, dtype=float)
        self.lat = np.asarray(self.lat, dtype=float)
        self.resid = np.atleast_2d(np.asarray(self.resid, dtype=float))
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        n = len(self.lon)
        if self.resid.shape[1] != n or self.xi.shape != self.resid.shape:
            raise DimensionError(f"region targets {self.resid.shape} / {self.xi.shape} do not fit {n} points")
        if self.linear_cov is None:
            self.linear_cov = np.zeros((n, n))

    @property
    def n_points(self) -> int:
        return len(self.lon)

    def distances(self) -> np.ndarray:
        return np.asarray(great_circle_km(self.lon[:, None], self.lat[:, None], self.lon[None, :], self.lat[None, :]))


def log_marginal_likelihood(data: RegionData, log_params: np.ndarray, jitter_max: float = 1e-8,
                            dist: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Summed log N(resid_m; 0, K + diag xi_m) and its gradient in
    (log sigma_f2, log lengthscale, log sigma_n2)."""
    sf2, ell, sn2 = np.exp(log_params)
    d = data.distances() if dist is None else dist
    n, m = data.n_points, data.resid.shape[0]
    eye = np.eye(n)
    a = SQRT3 * d / ell
    ea = np.exp(-a)
    mat = (1.0 + a) * ea
    k = sf2 * mat + sn2 * eye + data.linear_cov
    big = k[None, :, :] + data.xi[:, :, None] * eye[None, :, :]
    low = _cholesky_stack(big, jitter_max)
    low_inv = np.linalg.inv(low)
    a_inv = np.swapaxes(low_inv, 1, 2) @ low_inv
    alpha = np.einsum('mij,mj->mi', a_inv, data.resid)
    logdet = 2.0 * np.sum(np.log(np.diagonal(low, axis1=1, axis2=2)))
    value = -0.5 * float(np.sum(data.resid * alpha)) - 0.5 * logdet - 0.5 * m * n * math.log(2.0 * math.pi)
    w = np.einsum('mi,mj->ij', alpha, alpha) - a_inv.sum(axis=0)
    grad = 0.5 * np.array([
        np.sum(w * sf2 * mat),
        np.sum(w * sf2 * a * a * ea),
        np.trace(w) * sn2,
    ])
    return value, grad


def fit_hyperparameters(data: RegionData, init: GPHyper, config: GPConfig = DEFAULT_GP,
                        rng: Optional[np.random.Generator] = None) -> GPHyper:
    """Multi-restart L-BFGS-B on the regional marginal likelihood in log space."""
    if data.n_points < 2:
        return init
    rng = rng if rng is not None else np.random.default_rng(0)
    v_lo, v_hi = np.log(config.variance_bounds)
    l_lo, l_hi = np.log(config.lengthscale_bounds)
    bounds = [(v_lo, v_hi), (l_lo, l_hi), (v_lo, v_hi)]
    dist = data.distances()
    x0 = np.clip(np.log([max(init.sigma_f2, 1e-300), init.lengthscale, init.sigma_n2]),
                 [b[0] for b in bounds], [b[1] for b in bounds])

    def negative(x: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            value, grad = log_marginal_likelihood(data, x, config.jitter_max, dist)
        except FitFailure:
            return 1e25, np.zeros(3)
        return -value, -grad

    best_x, best_f = x0, negative(x0)[0]
    if best_f >= 1e25:
        raise FitFailure("initial hyperparameters give a singular system")
    starts = [x0] + [np.array([rng.uniform(lo, hi) for lo, hi in bounds]) for _ in range(config.restarts - 1)]
    for start in starts:
        res = minimize(negative, start, jac=True, method='L-BFGS-B', bounds=bounds)
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    sf2, ell, sn2 = np.exp(best_x)
    _LOG.debug(f"GP fit on {data.n_points} points x {data.resid.shape[0]} outputs: "
               f"sigma_f2={sf2:.3g} l={ell:.3g}km sigma_n2={sn2:.3g} ll={-best_f:.4g}")
    return init.with_scalars(float(sf2), float(ell), float(sn2))


def fit_linear(phi: np.ndarray, targets: np.ndarray, noise_var: np.ndarray,
               b0: np.ndarray, B0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bayesian linear regression with prior N(b0, B0) and independent noise."""
    p = phi.shape[1]
    if p == 0:
        return np.zeros(0), np.zeros((0, 0))
    prior_prec = np.linalg.inv(B0)
    prec = prior_prec + phi.T @ (phi / noise_var[:, None])
    low = cholesky(prec, lower=True)
    cov = cho_solve((low, True), np.eye(p))
    mean = cov @ (prior_prec @ b0 + phi.T @ (targets / noise_var))
    return mean, 0.5 * (cov + cov.T)


@dataclass(eq=False)
class RegionFit:
    evids: List[int]
    lon: np.ndarray
    lat: np.ndarray
    depth: np.ndarray
    mb: np.ndarray
    nu: np.ndarray
    xi: np.ndarray
    hyper: GPHyper
    fit_ok: bool = True
    _cache: Optional[dict] = field(default=None, repr=False)

    @property
    def n_points(self) -> int:
        return len(self.evids)

    def to_dict(self) -> dict:
        return {"evids": list(self.evids), "lon": self.lon.tolist(), "lat": self.lat.tolist(),
                "depth": self.depth.tolist(), "mb": self.mb.tolist(), "nu": self.nu.tolist(), "xi": self.xi.tolist(),
                "hyper": self.hyper.to_dict(), "fit_ok": self.fit_ok}

    @classmethod
    def from_dict(cls, d: dict) -> 'RegionFit':
        n_out = len(d["nu"])
        n = len(d["evids"])
        return cls([int(e) for e in d["evids"]], np.array(d["lon"], dtype=float), np.array(d["lat"], dtype=float),
                   np.array(d["depth"], dtype=float), np.array(d["mb"], dtype=float), np.array(d["nu"], dtype=float).reshape(n_out, n),
                   np.array(d["xi"], dtype=float).reshape(n_out, n), GPHyper.from_dict(d["hyper"]), d["fit_ok"])


@dataclass(eq=False)
class OutputModel:
    """One output group at one (station, phase): the 'tt' output or all wavelet outputs."""
    group: str
    n_outputs: int
    hyper_default: GPHyper
    b_post: np.ndarray
    B_post: np.ndarray
    regions: List[RegionFit]

    @property
    def features(self) -> FeatureMap:
        return FeatureMap(GROUP_FEATURES[self.group])

    def to_dict(self) -> dict:
        return {"group": self.group, "n_outputs": self.n_outputs, "hyper_default": self.hyper_default.to_dict(),
                "b_post": np.asarray(self.b_post).tolist(), "B_post": np.asarray(self.B_post).tolist(),
                "regions": [r.to_dict() for r in self.regions]}

    @classmethod
    def from_dict(cls, d: dict) -> 'OutputModel':
        p = FeatureMap(GROUP_FEATURES[d["group"]]).dim
        return cls(d["group"], d["n_outputs"], GPHyper.from_dict(d["hyper_default"]),
                   np.array(d["b_post"], dtype=float).reshape(p), np.array(d["B_post"], dtype=float).reshape(p, p),
                   [RegionFit.from_dict(r) for r in d["regions"]])


class StationPhaseModel:
    """All GP outputs of one (station, phase) plus their shared regions."""

    def __init__(self, station: Station, phase: str, centroids: np.ndarray, groups: Dict[str, OutputModel],
                 geo: Optional[GeoModel] = None) -> None:
        self.station = station
        self.phase = phase
        self.centroids = np.asarray(centroids, dtype=float).reshape(-1, 3)
        self.groups = groups
        self.geo = geo or GeoModel()

    @property
    def n_coeffs(self) -> int:
        return self.groups[WAVELET_GROUP].n_outputs

    def mean_function(self, group: str, event) -> float:
        if group == 'tt':
            return predict_travel_time(event, self.station, self.phase, self.geo.velocity)
        if group == 'amp':
            return predict_log_amplitude(event, self.station, self.phase, self.geo.amplitude)
        return 0.0

    def to_dict(self) -> dict:
        return {"station": [self.station.sta, self.station.lon, self.station.lat], "phase": self.phase,
                "centroids": self.centroids.tolist(), "groups": {g: m.to_dict() for g, m in self.groups.items()}}

    @classmethod
    def from_dict(cls, d: dict, geo: Optional[GeoModel] = None) -> 'StationPhaseModel':
        sta, lon, lat = d["station"]
        return cls(Station(sta, lon, lat), d["phase"], np.array(d["centroids"], dtype=float),
                   {g: OutputModel.from_dict(m) for g, m in d["groups"].items()}, geo)


def untrained_model(station: Station, phase: str, n_coeffs: int, config: GPConfig = DEFAULT_GP,
                    geo: Optional[GeoModel] = None) -> StationPhaseModel:
    groups = {}
    for group in THETA_OUTPUTS + (WAVELET_GROUP,):
        b0, B0 = config.prior_weights(group)
        groups[group] = OutputModel(group, n_coeffs if group == WAVELET_GROUP else 1,
                                    config.default_hyper(group), b0, B0, [])
    return StationPhaseModel(station, phase, np.zeros((0, 3)), groups, geo)


def _region_arrays(region: RegionFit, model: StationPhaseModel, group: OutputModel):
    """Cached per-output precision matrices and dual weights of a region."""
    if region._cache is not None:
        return region._cache
    h = region.hyper
    feats = group.features
    phi = feats(region.lon, region.lat, region.mb, model.station)
    d = np.asarray(great_circle_km(region.lon[:, None], region.lat[:, None], region.lon[None, :], region.lat[None, :]))
    n = region.n_points
    k = h.sigma_f2 * matern32(d, h.lengthscale) + h.sigma_n2 * np.eye(n) + phi @ group.B_post @ phi.T
    big = k[None] + region.xi[:, :, None] * np.eye(n)[None]
    low = _cholesky_stack(big, 1e-8)
    low_inv = np.linalg.inv(low)
    prec = np.swapaxes(low_inv, 1, 2) @ low_inv
    mean = _training_mean(region, model, group, phi)
    resid = region.nu - mean
    region._cache = {"prec": prec, "resid": resid, "phi": phi}
    return region._cache


def _training_mean(region: RegionFit, model: StationPhaseModel, group: OutputModel, phi: np.ndarray) -> np.ndarray:
    """Prior mean (outputs x points) at the training events of a region."""
    base = np.zeros(region.n_points)
    if group.group in ('tt', 'amp'):
        for i in range(region.n_points):
            ev = _PointEvent(region.lon[i], region.lat[i], region.depth[i], region.mb[i])
            base[i] = model.mean_function(group.group, ev)
    lin = phi @ group.b_post if phi.shape[1] else np.zeros(region.n_points)
    return np.broadcast_to(base + lin, region.nu.shape)


@dataclass(frozen=True)
class _PointEvent:
    lon: float
    lat: float
    depth: float
    mb: float


def predict_group(event, model: StationPhaseModel, group_name: str,
                  exclude: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of every output in a group at a test event."""
    group = model.groups[group_name]
    feats = group.features
    phi_star = feats(event.lon, event.lat, event.mb, model.station)[0]
    prior_mean = model.mean_function(group_name, event)
    if phi_star.size:
        prior_mean = prior_mean + float(phi_star @ group.b_post)
    linear_var = float(phi_star @ group.B_post @ phi_star) if phi_star.size else 0.0
    r = assign_region(event.lon, event.lat, model.centroids)
    region = group.regions[r] if r is not None and r < len(group.regions) else None
    hyper = region.hyper if region is not None else group.hyper_default
    prior_var = hyper.sigma_f2 + hyper.sigma_n2 + linear_var
    mean = np.full(group.n_outputs, prior_mean)
    var = np.full(group.n_outputs, prior_var)
    if region is None or region.n_points == 0:
        return mean, var
    cache = _region_arrays(region, model, group)
    prec, resid, phi = cache["prec"], cache["resid"], cache["phi"]
    d = np.asarray(great_circle_km(event.lon, event.lat, region.lon, region.lat))
    k_star = hyper.sigma_f2 * matern32(d, hyper.lengthscale)
    if phi.shape[1]:
        k_star = k_star + phi @ group.B_post @ phi_star
    if exclude is not None and exclude in region.evids:
        i = region.evids.index(exclude)
        keep = np.array([j for j in range(region.n_points) if j != i], dtype=int)
        if len(keep) == 0:
            return mean, var
        col = prec[:, keep, i]
        prec = prec[:, keep[:, None], keep[None, :]] - col[:, :, None] * col[:, None, :] / prec[:, i, i][:, None, None]
        resid = resid[:, keep]
        k_star = k_star[keep]
    mean = mean + np.einsum('mij,j,mi->m', prec, k_star, resid)
    var = var - np.einsum('i,mij,j->m', k_star, prec, k_star)
    return mean, np.maximum(var, hyper.sigma_n2)


def posterior_predict(test_event, model: StationPhaseModel, output_id: str,
                      exclude: Optional[int] = None) -> Tuple[float, float]:
    group, index = parse_output(output_id)
    if group == WAVELET_GROUP and index >= model.n_coeffs:
        raise ConfigurationError(f"unknown GP output {output_id!r}: only {model.n_coeffs} coefficients")
    mean, var = predict_group(test_event, model, group, exclude)
    return float(mean[index]), float(var[index])


def predict_theta(event, model: StationPhaseModel, exclude: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Prior mean/variance of (tt, log alpha, log rho, log gamma, log beta)."""
    out = [predict_group(event, model, g, exclude) for g in THETA_OUTPUTS]
    return np.array([m[0] for m, _ in out]), np.array([v[0] for _, v in out])


def predict_wavelets(event, model: StationPhaseModel, exclude: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    return predict_group(event, model, WAVELET_GROUP, exclude)


@dataclass
class OutputTraining:
    """Messages of one output group at one (station, phase), one column per training event."""
    evids: List[int]
    lon: np.ndarray
    lat: np.ndarray
    depth: np.ndarray
    mb: np.ndarray
    nu: np.ndarray
    xi: np.ndarray


def fit_output_model(group_name: str, data: OutputTraining, model: StationPhaseModel, labels: np.ndarray,
                     config: GPConfig, rng: np.random.Generator,
                     previous: Optional[OutputModel] = None) -> OutputModel:
    """Fit the global linear part, then one hyperparameter set per region."""
    feats = FeatureMap(GROUP_FEATURES[group_name])
    n = len(data.evids)
    nu = np.atleast_2d(data.nu).reshape(-1, n)
    xi = np.atleast_2d(data.xi).reshape(-1, n)
    default = config.default_hyper(group_name)
    b0, B0 = config.prior_weights(group_name)
    base = np.zeros(n)
    if group_name in ('tt', 'amp'):
        for i in range(n):
            base[i] = model.mean_function(group_name, _PointEvent(data.lon[i], data.lat[i], data.depth[i], data.mb[i]))
    phi = feats(data.lon, data.lat, data.mb, model.station)
    if feats.dim and n:
        noise_var = xi.mean(axis=0) + default.sigma_f2 + default.sigma_n2
        b_post, B_post = fit_linear(phi, nu.mean(axis=0) - base, noise_var, b0, B0)
    else:
        b_post, B_post = b0, B0
    regions = []
    n_regions = len(model.centroids)
    for r in range(n_regions):
        idx = np.flatnonzero(labels == r)
        init = default
        if previous is not None and r < len(previous.regions):
            init = previous.regions[r].hyper
        init = GPHyper(init.sigma_f2, init.lengthscale, init.sigma_n2, B_post, feats.name)
        fit_ok = True
        hyper = init
        if len(idx) >= 2:
            phi_r = phi[idx]
            lin = phi_r @ b_post if feats.dim else np.zeros(len(idx))
            resid = nu[:, idx] - (base[idx] + lin)[None, :]
            rdata = RegionData(data.lon[idx], data.lat[idx], resid, xi[:, idx], phi_r @ B_post @ phi_r.T)
            try:
                hyper = fit_hyperparameters(rdata, init, config, rng)
            except FitFailure as exc:
                _LOG.warning(f"{model.station.sta}/{model.phase}/{group_name} region {r}: {exc}; using defaults")
                hyper, fit_ok = GPHyper(default.sigma_f2, default.lengthscale, default.sigma_n2, B_post,
                                        feats.name), False
        regions.append(RegionFit([data.evids[i] for i in idx], data.lon[idx], data.lat[idx], data.depth[idx], data.mb[idx],
                                 nu[:, idx], xi[:, idx], hyper, fit_ok))
    hyper_default = GPHyper(default.sigma_f2, default.lengthscale, default.sigma_n2, B_post, feats.name)
    return OutputModel(group_name, nu.shape[0], hyper_default, b_post, B_post, regions)


def training_channels(model: StationPhaseModel, group_name: str) -> List[ChannelData]:
    """Per output and region: training messages with the GP prior at those events."""
    group = model.groups[group_name]
    out = []
    for region in group.regions:
        if region.n_points == 0:
            continue
        h = region.hyper
        phi = group.features(region.lon, region.lat, region.mb, model.station)
        d = np.asarray(great_circle_km(region.lon[:, None], region.lat[:, None],
                                       region.lon[None, :], region.lat[None, :]))
        k = h.sigma_f2 * matern32(d, h.lengthscale) + h.sigma_n2 * np.eye(region.n_points)
        if phi.shape[1]:
            k = k + phi @ group.B_post @ phi.T
        mean = _training_mean(region, model, group, phi)
        for m in range(group.n_outputs):
            out.append(ChannelData(region.nu[m], region.xi[m], np.array(mean[m]), k))
    return out
