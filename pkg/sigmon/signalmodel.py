"""Station signal model: synthesis, AR noise and the collapsed likelihood.

A station signal is

    s(t) = mu + sum_k g_k(t) m_k(t - tau_k) + z(t)

with g_k the arrival envelope, m_k the modulation (D w_k inside the wavelet
window, unit white noise after it) and z an AR(R) process started from zero
pre-history. Wavelet coefficients are integrated out by a Kalman filter whose
state holds the AR lags plus the coefficients touching the current sample.

The filter only runs on *segments*: maximal runs of samples that some arrival
covers, extended by R uncovered samples so that the AR lags are observed
exactly at both ends. Outside segments the likelihood is the plain AR density
of the observed samples. Segment likelihoods are independent of each other,
which lets callers cache them across MCMC proposals.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, signal as spsignal
from scipy.stats import multivariate_normal, norm

from sigmon.base import CapacityError, DimensionError, DomainError, PhaseId, StationId
from sigmon.envelope import ArrivalParams, envelope_at, envelope_support
from sigmon.wavelet import WaveletBasis, build_basis


_LOG = logging.getLogger('sigmon.signalmodel')

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SignalConfig:
    rate_hz: float = 10.0
    window_s: float = 20.0
    levels: int = 5
    wavelet: str = 'db4'
    mode: str = 'zero'
    envelope_floor: float = 0.01
    max_coda_s: float = 600.0
    k_max: int = 4
    xi_max: float = 1e6
    ar_order: int = 2

    @property
    def window_len(self) -> int:
        return int(round(self.window_s * self.rate_hz))

    def basis(self) -> WaveletBasis:
        return build_basis(self.window_len, self.levels, self.wavelet, self.mode)


DEFAULT_SIGNAL = SignalConfig()


@dataclass(frozen=True)
class NoiseParams:
    mu: float
    sigma2: float
    phi: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, 'phi', tuple(float(p) for p in self.phi))

    @property
    def order(self) -> int:
        return len(self.phi)

    def is_stable(self) -> bool:
        if not self.phi:
            return True
        return spectral_radius(self.phi) < 1.0

    def validate(self) -> None:
        if not self.sigma2 > 0:
            raise DomainError(f"innovation variance must be positive, got {self.sigma2}")
        if not self.is_stable():
            raise DomainError(f"unstable AR coefficients {self.phi}")


def spectral_radius(phi: Sequence[float]) -> float:
    return float(np.max(np.abs(np.roots(np.concatenate([[1.0], -np.asarray(phi, dtype=float)])))))


@dataclass(frozen=True, eq=False)
class Arrival:
    """One phase arrival at one station.

    evid is None for an unassociated arrival. The coefficient prior is a
    diagonal Gaussian with mean coeff_mean and variances coeff_var.
    """
    arid: int
    station: StationId
    phase: Optional[PhaseId]
    theta: ArrivalParams
    coeff_mean: np.ndarray
    coeff_var: np.ndarray
    evid: Optional[int] = None
    fingerprint: str = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.asarray(self.coeff_mean, dtype=float)
        var = np.asarray(self.coeff_var, dtype=float)
        if mean.shape != var.shape or mean.ndim != 1:
            raise DimensionError(f"arrival {self.arid}: coefficient mean/variance shapes differ")
        if np.any(var <= 0):
            raise DomainError(f"arrival {self.arid}: coefficient variances must be positive")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, 'coeff_mean', mean)
        object.__setattr__(self, 'coeff_var', var)
        h = hashlib.sha1()
        h.update(np.array([self.theta.tau, self.theta.rho, self.theta.alpha,
                           self.theta.gamma, self.theta.beta]).tobytes())
        h.update(mean.tobytes())
        h.update(var.tobytes())
        object.__setattr__(self, 'fingerprint', h.hexdigest())

    @property
    def associated(self) -> bool:
        return self.evid is not None

    def sort_key(self) -> Tuple[float, str]:
        return (self.theta.tau, self.fingerprint)


@dataclass(frozen=True)
class Window:
    station: StationId
    start_time: float
    n_samples: int
    rate_hz: float


@dataclass(frozen=True, eq=False)
class StationSignal:
    station: StationId
    start_time: float
    rate_hz: float
    samples: np.ndarray

    def __post_init__(self) -> None:
        if not self.rate_hz > 0:
            raise DomainError(f"{self.station}: sample rate must be positive")
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or not np.all(np.isfinite(samples)):
            raise DomainError(f"{self.station}: samples must be a finite vector")
        object.__setattr__(self, 'samples', samples)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def end_time(self) -> float:
        return self.start_time + self.n_samples / self.rate_hz

    def window(self) -> Window:
        return Window(self.station, self.start_time, self.n_samples, self.rate_hz)

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_samples, dtype=float) / self.rate_hz

    def slice_time(self, t0: float, t1: float) -> 'StationSignal':
        lo = min(max(0, int(math.ceil((t0 - self.start_time) * self.rate_hz - 1e-9))), self.n_samples)
        hi = min(max(lo, int(math.ceil((t1 - self.start_time) * self.rate_hz - 1e-9))), self.n_samples)
        return StationSignal(self.station, self.start_time + lo / self.rate_hz, self.rate_hz, self.samples[lo:hi])


@dataclass
class CoeffMessages:
    nu: Dict[int, np.ndarray]
    xi: Dict[int, np.ndarray]
    log_z: float
    n_clamped: int = 0


def first_sample_after(t: float, start_time: float, rate_hz: float) -> int:
    """Smallest n with start_time + n / rate_hz > t (may be negative)."""
    n = int(math.floor((t - start_time) * rate_hz)) + 1
    while start_time + (n - 1) / rate_hz > t:
        n -= 1
    while start_time + n / rate_hz <= t:
        n += 1
    return n


@dataclass(frozen=True)
class Footprint:
    """Samples [lo, hi) where an arrival's envelope is modelled as nonzero.

    n0 is the sample whose modulation index is zero; g holds the envelope on
    [lo, hi).
    """
    n0: int
    lo: int
    hi: int
    g: np.ndarray

    def window_end(self, window_len: int) -> int:
        return min(self.hi, self.n0 + window_len)


def footprint(arrival: Arrival, start_time: float, n_samples: int, rate_hz: float,
              config: SignalConfig = DEFAULT_SIGNAL) -> Footprint:
    theta = arrival.theta
    n0 = first_sample_after(theta.tau, start_time, rate_hz)
    n_end = first_sample_after(envelope_support(theta, config.envelope_floor, config.max_coda_s),
                               start_time, rate_hz)
    lo, hi = max(n0, 0), min(n_end, n_samples)
    if hi <= lo:
        return Footprint(n0, lo, lo, np.zeros(0))
    g = envelope_at(start_time + np.arange(lo, hi, dtype=float) / rate_hz, theta)
    return Footprint(n0, lo, hi, g)


def _check_basis(arrivals: Sequence[Arrival], basis: WaveletBasis) -> None:
    for a in arrivals:
        if len(a.coeff_mean) != basis.n_coeffs:
            raise DimensionError(f"arrival {a.arid} has {len(a.coeff_mean)} coefficients, "
                                 f"basis has {basis.n_coeffs}")


def _resolve_basis(config: Optional[SignalConfig], basis: Optional[WaveletBasis]) -> Tuple[SignalConfig, WaveletBasis]:
    config = config or DEFAULT_SIGNAL
    return config, basis if basis is not None else config.basis()


def ar_filter(phi: Sequence[float]) -> np.ndarray:
    return np.concatenate([[1.0], -np.asarray(phi, dtype=float)])


def innovation_log_pdf(z: np.ndarray, noise: NoiseParams) -> np.ndarray:
    """Per-sample log N(e_t; 0, sigma2) of the AR innovations of z (zero pre-history)."""
    e = spsignal.lfilter(ar_filter(noise.phi), [1.0], np.asarray(z, dtype=float))
    return norm.logpdf(e, loc=0.0, scale=math.sqrt(noise.sigma2))


def ar_log_density(z: np.ndarray, noise: NoiseParams) -> float:
    return float(np.sum(innovation_log_pdf(z, noise)))


def ar_covariance(n: int, noise: NoiseParams) -> np.ndarray:
    """Dense covariance of n samples of the AR process started from zero pre-history."""
    a = np.eye(n)
    for i, p in enumerate(noise.phi, start=1):
        a -= p * np.eye(n, k=-i)
    a_inv = linalg.solve_triangular(a, np.eye(n), lower=True)
    return noise.sigma2 * a_inv @ a_inv.T


def stationary_variance(noise: NoiseParams) -> float:
    r = max(noise.order, 1)
    f = _companion(noise.phi, r)
    q = np.zeros((r, r))
    q[0, 0] = noise.sigma2
    return float(linalg.solve_discrete_lyapunov(f, q)[0, 0])


def _companion(phi: Sequence[float], r: int) -> np.ndarray:
    f = np.zeros((r, r))
    f[0, :len(phi)] = phi
    f[1:, :-1] += np.eye(r - 1)
    return f


def synthesize(arrivals: Sequence[Arrival], noise: NoiseParams, window: Window,
               rng: np.random.Generator, config: Optional[SignalConfig] = None,
               basis: Optional[WaveletBasis] = None) -> StationSignal:
    config, basis = _resolve_basis(config, basis)
    noise.validate()
    _check_basis(arrivals, basis)
    n = window.n_samples
    clean = np.zeros(n)
    for a in arrivals:
        w = a.coeff_mean + np.sqrt(a.coeff_var) * rng.standard_normal(basis.n_coeffs)
        fp = footprint(a, window.start_time, n, window.rate_hz, config)
        if fp.hi <= fp.lo:
            continue
        j = np.arange(fp.lo, fp.hi) - fp.n0
        modulation = rng.standard_normal(fp.hi - fp.lo)
        inside = j < basis.signal_len
        modulation[inside] = (basis.matrix[j[inside]] @ w)
        clean[fp.lo:fp.hi] += fp.g * modulation
    e = math.sqrt(noise.sigma2) * rng.standard_normal(n)
    z = spsignal.lfilter([1.0], ar_filter(noise.phi), e)
    return StationSignal(window.station, window.start_time, window.rate_hz, noise.mu + clean + z)


def predicted_signal(arrivals: Sequence[Arrival], noise: NoiseParams, window: Window,
                     config: Optional[SignalConfig] = None,
                     basis: Optional[WaveletBasis] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Prior predictive mean and marginal variance of every sample."""
    config, basis = _resolve_basis(config, basis)
    _check_basis(arrivals, basis)
    n = window.n_samples
    mean = np.full(n, float(noise.mu))
    var = np.zeros(n)
    ar_var = np.diag(ar_covariance(n, noise)) if n <= 2048 else np.full(n, stationary_variance(noise))
    d2 = basis.matrix ** 2
    for a in arrivals:
        fp = footprint(a, window.start_time, n, window.rate_hz, config)
        if fp.hi <= fp.lo:
            continue
        j = np.arange(fp.lo, fp.hi) - fp.n0
        inside = j < basis.signal_len
        m = np.zeros(fp.hi - fp.lo)
        v = np.ones(fp.hi - fp.lo)
        m[inside] = basis.matrix[j[inside]] @ a.coeff_mean
        v[inside] = d2[j[inside]] @ a.coeff_var
        mean[fp.lo:fp.hi] += fp.g * m
        var[fp.lo:fp.hi] += fp.g ** 2 * v
    return mean, var + ar_var


def estimate_noise(samples: np.ndarray, order: int, sigma2_floor: float = 1e-12) -> NoiseParams:
    """Yule-Walker fit of mean, AR coefficients and innovation variance."""
    x = np.asarray(samples, dtype=float)
    if len(x) <= order + 1:
        raise DimensionError(f"need more than {order + 1} samples for an AR({order}) fit")
    mu = float(np.mean(x))
    y = x - mu
    n = len(y)
    acov = np.array([np.dot(y[:n - k], y[k:]) / n for k in range(order + 1)])
    if acov[0] <= 0:
        return NoiseParams(mu, sigma2_floor, (0.0,) * order)
    if order == 0:
        return NoiseParams(mu, max(float(acov[0]), sigma2_floor))
    phi = linalg.solve_toeplitz(acov[:order], acov[1:order + 1])
    # biased autocovariances keep Yule-Walker stable up to rounding; shrink if not
    while spectral_radius(phi) >= 1.0:
        phi = 0.95 * phi
    sigma2 = float(acov[0] - np.dot(phi, acov[1:order + 1]))
    return NoiseParams(mu, max(sigma2, sigma2_floor), tuple(phi))


@dataclass(frozen=True)
class Segment:
    lo: int
    hi: int
    members: Tuple[int, ...]

    def key(self, arrivals: Sequence[Arrival], noise: NoiseParams) -> tuple:
        return (self.lo, self.hi, noise, tuple(arrivals[i].fingerprint for i in self.members))


def plan_segments(footprints: Sequence[Footprint], n_samples: int, order: int,
                  window_len: int, k_max: int) -> List[Segment]:
    """Group arrivals into independent filter segments.

    Raises CapacityError when more than k_max wavelet windows overlap.
    """
    spans = [(fp.lo, fp.hi, i) for i, fp in enumerate(footprints) if fp.hi > fp.lo]
    if not spans:
        return []
    _check_capacity(footprints, window_len, k_max)
    spans.sort()
    segments = []
    lo, hi, members = spans[0][0], spans[0][1], [spans[0][2]]
    for s_lo, s_hi, i in spans[1:]:
        # `order` uncovered samples between spans leave the AR lags exactly observed
        if s_lo >= hi + order:
            segments.append(Segment(lo, min(hi + order, n_samples), tuple(sorted(members))))
            lo, hi, members = s_lo, s_hi, [i]
            continue
        hi = max(hi, s_hi)
        members.append(i)
    segments.append(Segment(lo, min(hi + order, n_samples), tuple(sorted(members))))
    return segments


def _check_capacity(footprints: Sequence[Footprint], window_len: int, k_max: int) -> None:
    events = []
    for fp in footprints:
        w_hi = fp.window_end(window_len)
        if w_hi > fp.lo:
            events.append((fp.lo, 1))
            events.append((w_hi, -1))
    live = 0
    for _, step in sorted(events, key=lambda e: (e[0], e[1])):
        live += step
        if live > k_max:
            raise CapacityError(f"more than {k_max} overlapping wavelet windows")


class _SegmentFilter:
    """Kalman filter over one segment; state = AR lags then live coefficients."""

    def __init__(self, y: np.ndarray, seg: Segment, arrivals: Sequence[Arrival], fps: Sequence[Footprint],
                 noise: NoiseParams, basis: WaveletBasis, prior_mean: Sequence[np.ndarray],
                 prior_var: Sequence[np.ndarray], keep: bool) -> None:
        self.y = y
        self.seg = seg
        self.arrivals = arrivals
        self.fps = fps
        self.basis = basis
        self.prior_mean = prior_mean
        self.prior_var = prior_var
        self.keep = keep
        self.phi = np.asarray(noise.phi, dtype=float)
        self.sigma2 = noise.sigma2
        self.r = max(noise.order, 1)
        self.f = _companion(self.phi, self.r)
        # per member: coefficient index -> state slot; slots of dropped ones vanish
        self.slots: Dict[int, Dict[int, int]] = {k: {} for k in seg.members}
        self.done: Dict[int, set] = {k: set() for k in seg.members}
        self.labels: List[Tuple[int, int]] = []
        self.finished: Dict[Tuple[int, int], Tuple[float, float]] = {}
        lags = np.array([y[seg.lo - i] if seg.lo - i >= 0 else 0.0 for i in range(1, self.r + 1)])
        self.x = lags
        self.p = np.zeros((self.r, self.r))

    def _predict(self) -> None:
        r = self.r
        x, p = self.x, self.p
        head = float(np.dot(self.phi, x[:len(self.phi)])) if len(self.phi) else 0.0
        x[1:r] = x[0:r - 1].copy()
        x[0] = head
        p[:r, :] = self.f @ p[:r, :]
        p[:, :r] = p[:, :r] @ self.f.T
        p[0, 0] += self.sigma2

    def _add(self, k: int, coeffs: np.ndarray) -> None:
        new = [c for c in coeffs if c not in self.slots[k] and c not in self.done[k]]
        if not new:
            return
        m = len(new)
        d = len(self.x)
        self.x = np.concatenate([self.x, self.prior_mean[k][new]])
        p = np.zeros((d + m, d + m))
        p[:d, :d] = self.p
        p[d:, d:] = np.diag(self.prior_var[k][new])
        self.p = p
        for i, c in enumerate(new):
            self.slots[k][int(c)] = d + i
            self.labels.append((k, int(c)))

    def _drop(self, expired: List[Tuple[int, int]]) -> None:
        if not expired:
            return
        gone = set()
        for k, c in expired:
            slot = self.slots[k].pop(c)
            self.done[k].add(c)
            gone.add(slot)
            self.finished[(k, c)] = (float(self.x[slot]), float(self.p[slot, slot]))
        keep = np.array([i for i in range(len(self.x)) if i not in gone])
        remap = {old: new for new, old in enumerate(keep)}
        self.x = self.x[keep]
        self.p = self.p[np.ix_(keep, keep)]
        self.labels = [lab for i, lab in enumerate(self.labels) if i not in gone]
        for k in self.slots:
            self.slots[k] = {c: remap[s] for c, s in self.slots[k].items()}

    def run(self) -> float:
        ll = 0.0
        n_win = self.basis.signal_len
        for n in range(self.seg.lo, self.seg.hi):
            self._predict()
            extra = 0.0
            touches = []
            for k in self.seg.members:
                fp = self.fps[k]
                if not fp.lo <= n < fp.hi:
                    continue
                g = fp.g[n - fp.lo]
                j = n - fp.n0
                if j < n_win:
                    coeffs = self.basis.active[j]
                    self._add(k, coeffs)
                    touches.append((k, j, g, coeffs))
                else:
                    extra += g * g
            h = np.zeros(len(self.x))
            h[0] = 1.0
            for k, j, g, coeffs in touches:
                slots = [self.slots[k][int(c)] for c in coeffs]
                h[slots] += g * self.basis.matrix[j, coeffs]
            ph = self.p @ h
            s = float(h @ ph) + extra
            innov = self.y[n] - float(h @ self.x)
            ll += -0.5 * (_LOG_2PI + math.log(s) + innov * innov / s)
            gain = ph / s
            self.x = self.x + gain * innov
            self.p = self.p - np.outer(gain, ph)
            self.p = 0.5 * (self.p + self.p.T)
            if not self.keep:
                self._drop(self._expired(n))
        return ll

    def _expired(self, n: int) -> List[Tuple[int, int]]:
        out = []
        for k in self.seg.members:
            fp = self.fps[k]
            if not self.slots[k]:
                continue
            j = n - fp.n0
            j_stop = fp.hi - 1 - fp.n0
            for c in self.slots[k]:
                if min(self.basis.last_row[c], j_stop) <= j:
                    out.append((k, c))
        return out

    def marginals(self) -> Dict[Tuple[int, int], Tuple[float, float]]:
        out = dict(self.finished)
        for k in self.slots:
            for c, slot in self.slots[k].items():
                out[(k, c)] = (float(self.x[slot]), float(self.p[slot, slot]))
        return out


class LikelihoodCache:
    """Segment log-likelihoods keyed by (span, noise, member fingerprints).

    One cache serves one station signal: it also keeps cumulative innovation
    log densities of that signal per noise setting.
    """

    def __init__(self, max_entries: int = 20000) -> None:
        self.max_entries = max_entries
        self.entries: Dict[tuple, float] = {}
        self.innovations: Dict[NoiseParams, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def get(self, key: tuple) -> Optional[float]:
        value = self.entries.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def put(self, key: tuple, value: float) -> None:
        if len(self.entries) >= self.max_entries:
            self.entries.clear()
        self.entries[key] = value

    def cumulative_innovations(self, y: np.ndarray, noise: NoiseParams) -> np.ndarray:
        cum = self.innovations.get(noise)
        if cum is None:
            if len(self.innovations) >= 64:
                self.innovations.clear()
            cum = np.concatenate([[0.0], np.cumsum(innovation_log_pdf(y, noise))])
            self.innovations[noise] = cum
        return cum


def _prepare(signal: StationSignal, arrivals: Sequence[Arrival], noise: NoiseParams,
             config: SignalConfig, basis: WaveletBasis):
    noise.validate()
    _check_basis(arrivals, basis)
    ordered = sorted(arrivals, key=Arrival.sort_key)
    fps = [footprint(a, signal.start_time, signal.n_samples, signal.rate_hz, config) for a in ordered]
    segments = plan_segments(fps, signal.n_samples, noise.order, basis.signal_len, config.k_max)
    return ordered, fps, segments


def collapsed_log_likelihood(signal: StationSignal, arrivals: Sequence[Arrival], noise: NoiseParams,
                             config: Optional[SignalConfig] = None, basis: Optional[WaveletBasis] = None,
                             cache: Optional[LikelihoodCache] = None) -> float:
    """log p(s | theta) with every arrival's wavelet coefficients integrated out."""
    config, basis = _resolve_basis(config, basis)
    ordered, fps, segments = _prepare(signal, arrivals, noise, config, basis)
    y = signal.samples - noise.mu
    noise_only = np.ones(signal.n_samples, dtype=bool)
    total = 0.0
    for seg in segments:
        noise_only[seg.lo:seg.hi] = False
        key = seg.key(ordered, noise) if cache is not None else None
        value = cache.get(key) if cache is not None else None
        if value is None:
            value = _SegmentFilter(y, seg, ordered, fps, noise, basis,
                                   [a.coeff_mean for a in ordered], [a.coeff_var for a in ordered],
                                   keep=False).run()
            if cache is not None:
                cache.put(key, value)
        total += value
    if not segments:
        return ar_log_density(y, noise)
    if cache is not None:
        cum = cache.cumulative_innovations(y, noise)
        covered = math.fsum(cum[seg.hi] - cum[seg.lo] for seg in segments)
        return total + float(cum[-1]) - covered
    return total + float(np.sum(innovation_log_pdf(y, noise)[noise_only]))


def coefficient_messages(signal: StationSignal, arrivals: Sequence[Arrival], noise: NoiseParams,
                         config: Optional[SignalConfig] = None,
                         basis: Optional[WaveletBasis] = None) -> CoeffMessages:
    """Diagonal likelihood messages on every arrival's coefficients.

    The filter runs under a standard-normal reference prior; each posterior
    marginal N(m, v) is divided by N(0, 1), giving nu and xi. log_z makes
    prod N(nu; w, xi) / Z a stand-in for p(s | w).
    """
    config, basis = _resolve_basis(config, basis)
    ordered, fps, segments = _prepare(signal, arrivals, noise, config, basis)
    y = signal.samples - noise.mu
    n_c = basis.n_coeffs
    zeros, ones = np.zeros(n_c), np.ones(n_c)
    post_m = [zeros.copy() for _ in ordered]
    post_v = [ones.copy() for _ in ordered]
    noise_only = np.ones(signal.n_samples, dtype=bool)
    log_ref = 0.0
    for seg in segments:
        noise_only[seg.lo:seg.hi] = False
        filt = _SegmentFilter(y, seg, ordered, fps, noise, basis,
                              [zeros] * len(ordered), [ones] * len(ordered), keep=True)
        log_ref += filt.run()
        for (k, c), (m, v) in filt.marginals().items():
            post_m[k][c] = m
            post_v[k][c] = v
    log_ref += float(np.sum(innovation_log_pdf(y, noise)[noise_only]))

    nu, xi = {}, {}
    n_clamped = 0
    log_fit = 0.0
    for k, a in enumerate(ordered):
        precision = 1.0 / post_v[k] - 1.0
        clamped = precision <= 1.0 / config.xi_max
        n_clamped += int(np.count_nonzero(clamped))
        x = 1.0 / np.maximum(precision, 1.0 / config.xi_max)
        mu = x * post_m[k] / post_v[k]
        nu[a.arid] = mu
        xi[a.arid] = x
        log_fit += float(np.sum(norm.logpdf(mu, loc=0.0, scale=np.sqrt(1.0 + x))))
    if n_clamped:
        _LOG.debug(f"{signal.station}: clamped {n_clamped} coefficient messages at xi_max={config.xi_max}")
    return CoeffMessages(nu, xi, log_fit - log_ref, n_clamped)


@dataclass(frozen=True)
class ChannelData:
    """One GP output across the training events: messages and the prior at those events."""
    nu: np.ndarray
    xi: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


def joint_training_density(messages: Iterable[CoeffMessages], channels: Iterable[ChannelData]) -> float:
    total = -math.fsum(m.log_z for m in messages)
    for ch in channels:
        nu, xi, mean = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (ch.nu, ch.xi, ch.mean))
        cov = np.atleast_2d(np.asarray(ch.cov, dtype=float))
        if not (nu.shape == xi.shape == mean.shape and cov.shape == (len(nu), len(nu))):
            raise DimensionError(f"channel shapes disagree: nu {nu.shape}, xi {xi.shape}, "
                                 f"mean {mean.shape}, cov {cov.shape}")
        total += float(multivariate_normal.logpdf(nu, mean=mean, cov=cov + np.diag(xi)))
    return total
