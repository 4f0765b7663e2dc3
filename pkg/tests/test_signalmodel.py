import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal, norm

from sigmon.base import CapacityError, DimensionError, DomainError
from sigmon.signalmodel import (ChannelData, CoeffMessages, LikelihoodCache, NoiseParams, StationSignal, Window,
                                ar_covariance, ar_log_density, coefficient_messages, collapsed_log_likelihood,
                                estimate_noise, first_sample_after, footprint, joint_training_density,
                                plan_segments, predicted_signal, stationary_variance, synthesize)
from sigmon.wavelet import custom_basis

from tests.conftest import NOISE, SMALL_SIGNAL, make_arrival
from tests.oracles import dense_log_likelihood


def _arrivals(basis, rng, taus=(2.05, 5.03)):
    out = []
    for k, tau in enumerate(taus, start=1):
        mean = rng.normal(0.0, 0.5, basis.n_coeffs)
        var = rng.uniform(0.2, 1.5, basis.n_coeffs)
        out.append(make_arrival(k, tau, basis.n_coeffs, alpha=2.0 + k, mean=mean, var=var))
    return out


def _signal(arrivals, noise, rng, basis, n=200):
    return synthesize(arrivals, noise, Window('S1', 0.0, n, 10.0), rng, SMALL_SIGNAL, basis)


class TestNoise:
    def test_validate(self):
        NOISE.validate()
        with pytest.raises(DomainError):
            NoiseParams(0.0, 0.0, ()).validate()
        with pytest.raises(DomainError):
            NoiseParams(0.0, 1.0, (1.2,)).validate()

    def test_ar_density_matches_dense(self, rng):
        z = rng.standard_normal(60)
        dense = multivariate_normal.logpdf(z, mean=np.zeros(60), cov=ar_covariance(60, NOISE))
        assert ar_log_density(z, NOISE) == pytest.approx(dense, rel=1e-10)

    def test_stationary_variance_ar1(self):
        noise = NoiseParams(0.0, 2.0, (0.5,))
        assert stationary_variance(noise) == pytest.approx(2.0 / (1.0 - 0.25))

    @pytest.mark.slow
    def test_yule_walker_recovers(self, rng):
        noise = NoiseParams(3.0, 0.5, (0.4, -0.1))
        sig = synthesize([], noise, Window('S1', 0.0, 50000, 10.0), rng, SMALL_SIGNAL)
        fit = estimate_noise(sig.samples, 2)
        assert fit.mu == pytest.approx(3.0, abs=0.05)
        assert fit.sigma2 == pytest.approx(0.5, rel=0.05)
        assert_allclose(fit.phi, [0.4, -0.1], atol=0.03)

    def test_estimate_needs_samples(self):
        with pytest.raises(DimensionError):
            estimate_noise(np.zeros(3), 2)


class TestFootprint:
    def test_first_sample_after(self):
        assert first_sample_after(0.0, 0.0, 10.0) == 1
        assert first_sample_after(0.05, 0.0, 10.0) == 1
        assert first_sample_after(-1.0, 0.0, 10.0) == -9

    def test_footprint_envelope(self, small_basis):
        a = make_arrival(1, 2.05, small_basis.n_coeffs)
        fp = footprint(a, 0.0, 200, 10.0, SMALL_SIGNAL)
        assert fp.n0 == 21 and fp.lo == 21
        assert fp.g[0] == pytest.approx(3.0 * 0.05)
        assert np.all(fp.g >= 0)

    def test_plan_segments_merges_overlaps(self, small_basis):
        arrivals = [make_arrival(k, tau, small_basis.n_coeffs) for k, tau in enumerate((1.0, 3.0, 15.0), 1)]
        fps = [footprint(a, 0.0, 400, 10.0, SMALL_SIGNAL) for a in arrivals]
        segs = plan_segments(fps, 400, 2, small_basis.signal_len, 4)
        assert [s.members for s in segs] == [(0, 1), (2,)]
        assert segs[0].hi == max(fps[0].hi, fps[1].hi) + 2

    def test_capacity(self, small_basis):
        arrivals = [make_arrival(k, 1.0 + 0.1 * k, small_basis.n_coeffs) for k in range(1, 6)]
        fps = [footprint(a, 0.0, 200, 10.0, SMALL_SIGNAL) for a in arrivals]
        with pytest.raises(CapacityError):
            plan_segments(fps, 200, 2, small_basis.signal_len, 4)


class TestLikelihood:
    def test_no_arrivals_is_ar_density(self, rng):
        sig = StationSignal('S1', 0.0, 10.0, rng.standard_normal(100) + 0.5)
        noise = NoiseParams(0.5, 1.3, (0.3,))
        assert collapsed_log_likelihood(sig, [], noise, SMALL_SIGNAL) == ar_log_density(sig.samples - 0.5, noise)

    def test_single_arrival_matches_dense(self, rng, small_basis):
        arrivals = _arrivals(small_basis, rng, taus=(4.02,))
        sig = _signal(arrivals, NOISE, rng, small_basis)
        fast = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        dense = dense_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        assert fast == pytest.approx(dense, rel=1e-8)

    def test_overlapping_arrivals_match_dense(self, rng, small_basis):
        arrivals = _arrivals(small_basis, rng)
        sig = _signal(arrivals, NOISE, rng, small_basis)
        fast = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        dense = dense_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        assert fast == pytest.approx(dense, rel=1e-8)

    def test_arrival_before_window_matches_dense(self, rng, small_basis):
        arrivals = _arrivals(small_basis, rng, taus=(-1.0, 12.0))
        sig = _signal(arrivals, NOISE, rng, small_basis)
        noise = NoiseParams(0.2, 0.8, (0.5,))
        fast = collapsed_log_likelihood(sig, arrivals, noise, SMALL_SIGNAL, small_basis)
        dense = dense_log_likelihood(sig, arrivals, noise, SMALL_SIGNAL, small_basis)
        assert fast == pytest.approx(dense, rel=1e-8)

    def test_random_instances_match_dense(self, rng, small_basis):
        for _ in range(50):
            n = int(rng.integers(64, 257))
            order = int(rng.integers(0, 4))
            noise = NoiseParams(float(rng.normal()), float(rng.uniform(0.3, 2.0)),
                                -np.poly(rng.uniform(-0.8, 0.8, order))[1:] if order else ())
            taus = rng.uniform(-3.0, n / 10.0, int(rng.integers(0, 4)))
            arrivals = [make_arrival(k, float(tau), small_basis.n_coeffs, alpha=float(rng.uniform(0.5, 5.0)),
                                     rho=float(rng.uniform(0.2, 2.0)), gamma=float(rng.uniform(0.05, 1.0)),
                                     beta=float(rng.uniform(0.1, 1.0)),
                                     mean=rng.normal(0.0, 0.5, small_basis.n_coeffs),
                                     var=rng.uniform(0.2, 1.5, small_basis.n_coeffs))
                        for k, tau in enumerate(taus, start=1)]
            sig = _signal(arrivals, noise, rng, small_basis, n=n)
            fast = collapsed_log_likelihood(sig, arrivals, noise, SMALL_SIGNAL, small_basis)
            dense = dense_log_likelihood(sig, arrivals, noise, SMALL_SIGNAL, small_basis)
            assert fast == pytest.approx(dense, rel=1e-6)

    def test_order_invariant(self, rng, small_basis):
        arrivals = _arrivals(small_basis, rng)
        sig = _signal(arrivals, NOISE, rng, small_basis)
        forward = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        backward = collapsed_log_likelihood(sig, arrivals[::-1], NOISE, SMALL_SIGNAL, small_basis)
        assert forward == backward

    def test_cache_agrees(self, rng, small_basis):
        arrivals = _arrivals(small_basis, rng, taus=(2.0, 14.0))
        sig = _signal(arrivals, NOISE, rng, small_basis)
        cache = LikelihoodCache()
        plain = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        cached = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis, cache)
        again = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis, cache)
        assert cached == pytest.approx(plain, rel=1e-12)
        assert again == cached
        assert cache.hits == 2

    def test_capacity_error(self, rng, small_basis):
        arrivals = [make_arrival(k, 1.0 + 0.1 * k, small_basis.n_coeffs) for k in range(1, 6)]
        sig = StationSignal('S1', 0.0, 10.0, rng.standard_normal(100))
        with pytest.raises(CapacityError):
            collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)

    def test_dimension_error(self, rng, small_basis):
        bad = make_arrival(1, 1.0, small_basis.n_coeffs + 1)
        sig = StationSignal('S1', 0.0, 10.0, rng.standard_normal(100))
        with pytest.raises(DimensionError):
            collapsed_log_likelihood(sig, [bad], NOISE, SMALL_SIGNAL, small_basis)

    def test_true_arrival_beats_empty(self, rng, small_basis):
        arrivals = [make_arrival(1, 3.0, small_basis.n_coeffs, alpha=10.0,
                                 mean=rng.normal(0.0, 1.0, small_basis.n_coeffs), var=0.05)]
        sig = _signal(arrivals, NOISE, rng, small_basis)
        with_arrival = collapsed_log_likelihood(sig, arrivals, NOISE, SMALL_SIGNAL, small_basis)
        assert with_arrival > collapsed_log_likelihood(sig, [], NOISE, SMALL_SIGNAL, small_basis)


class TestMessages:
    def test_single_coefficient_closed_form(self):
        basis = custom_basis(np.ones((1, 1)))
        config = SMALL_SIGNAL
        noise = NoiseParams(0.0, 0.7, ())
        # onset half a sample in: g = alpha * 0.05 / rho at the first sample
        a = make_arrival(1, 0.95, 1, alpha=4.0, rho=0.1)
        y = np.linspace(-1.0, 1.0, 50)
        sig = StationSignal('S1', 0.0, 10.0, y)
        fp = footprint(a, 0.0, 50, 10.0, config)
        g = fp.g[0]
        msgs = coefficient_messages(sig, [a], noise, config, basis)
        assert msgs.xi[1][0] == pytest.approx(0.7 / g ** 2)
        assert msgs.nu[1][0] == pytest.approx(y[fp.n0] / g)

    def test_messages_reproduce_likelihood(self, rng):
        basis = custom_basis(np.ones((1, 1)))
        noise = NoiseParams(0.1, 0.7, (0.3,))
        a = make_arrival(1, 0.95, 1, alpha=4.0, rho=0.1, mean=0.3, var=0.5)
        sig = StationSignal('S1', 0.0, 10.0, rng.standard_normal(60))
        msgs = coefficient_messages(sig, [a], noise, SMALL_SIGNAL, basis)
        # one coefficient: p(s) = int N(nu; w, xi) / Z N(w; mean, var) dw exactly
        nu, xi = msgs.nu[1][0], msgs.xi[1][0]
        via_messages = norm.logpdf(nu, 0.3, math.sqrt(xi + 0.5)) - msgs.log_z
        exact = collapsed_log_likelihood(sig, [a], noise, SMALL_SIGNAL, basis)
        assert via_messages == pytest.approx(exact, rel=1e-9)

    def test_joint_training_density(self):
        msgs = [CoeffMessages({}, {}, log_z=1.5)]
        ch = ChannelData(np.array([0.3]), np.array([0.5]), np.array([0.0]), np.array([[1.0]]))
        expected = -1.5 + norm.logpdf(0.3, 0.0, math.sqrt(1.5))
        assert joint_training_density(msgs, [ch]) == pytest.approx(expected)
        with pytest.raises(DimensionError):
            joint_training_density([], [ChannelData(np.zeros(2), np.zeros(1), np.zeros(2), np.eye(2))])


class TestSynthesis:
    def test_seeded(self, small_basis):
        arrivals = [make_arrival(1, 3.0, small_basis.n_coeffs)]
        window = Window('S1', 0.0, 100, 10.0)
        a = synthesize(arrivals, NOISE, window, np.random.default_rng(5), SMALL_SIGNAL, small_basis)
        b = synthesize(arrivals, NOISE, window, np.random.default_rng(5), SMALL_SIGNAL, small_basis)
        assert np.array_equal(a.samples, b.samples)

    def test_predicted_signal(self, small_basis):
        mean = np.full(small_basis.n_coeffs, 0.5)
        arrivals = [make_arrival(1, 3.0, small_basis.n_coeffs, mean=mean, var=0.1)]
        window = Window('S1', 0.0, 100, 10.0)
        m, v = predicted_signal(arrivals, NOISE, window, SMALL_SIGNAL, small_basis)
        assert_allclose(m[:30], 0.0)
        assert_allclose(v[:30], np.diag(ar_covariance(100, NOISE))[:30])
        fp = footprint(arrivals[0], 0.0, 100, 10.0, SMALL_SIGNAL)
        j = 5
        expected = fp.g[j] * small_basis.matrix[j] @ mean
        assert m[fp.lo + j] == pytest.approx(expected)

    @pytest.mark.slow
    def test_predicted_variance_matches_sampling(self, small_basis):
        arrivals = [make_arrival(1, 2.0, small_basis.n_coeffs, alpha=3.0, var=0.5)]
        window = Window('S1', 0.0, 80, 10.0)
        rng = np.random.default_rng(11)
        draws = np.array([synthesize(arrivals, NOISE, window, rng, SMALL_SIGNAL, small_basis).samples
                          for _ in range(4000)])
        _, v = predicted_signal(arrivals, NOISE, window, SMALL_SIGNAL, small_basis)
        assert_allclose(draws.var(axis=0), v, rtol=0.15)

    def test_slice_time(self):
        sig = StationSignal('S1', 100.0, 10.0, np.arange(50, dtype=float))
        part = sig.slice_time(101.0, 102.0)
        assert part.start_time == pytest.approx(101.0)
        assert_allclose(part.samples, np.arange(10, 20))
