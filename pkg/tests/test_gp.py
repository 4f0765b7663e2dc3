import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal

from sigmon.base import ConfigurationError
from sigmon.geophys import GeoModel, Station, great_circle_km, predict_travel_time, unit_vectors
from sigmon.gp import (DEFAULT_GP, WAVELET_GROUP, GPConfig, GPHyper, OutputTraining, RegionData, RegionFit,
                       StationPhaseModel, assign_region, fit_hyperparameters, fit_linear, fit_output_model,
                       log_marginal_likelihood, matern32, parse_output, partition_regions, posterior_predict,
                       predict_group, predict_theta, training_channels, untrained_model)
from sigmon.worldmodel import Event


STATION = Station('ST01', 0.0, 0.0)
HYPER = GPHyper(0.8, 300.0, 0.1)


def _points(rng, n=12):
    lon = rng.uniform(10.0, 14.0, n)
    lat = rng.uniform(-2.0, 2.0, n)
    return lon, lat


def _model_with_region(rng, n=12, n_out=2, exclude=None):
    lon, lat = _points(rng, n)
    nu = rng.normal(0.0, 1.0, (n_out, n))
    xi = rng.uniform(0.05, 0.3, (n_out, n))
    model = untrained_model(STATION, 'P', n_out)
    keep = [i for i in range(n) if i != exclude]
    centroid = unit_vectors(lon, lat).mean(axis=0, keepdims=True)
    model.centroids = centroid
    model.groups[WAVELET_GROUP].regions = [RegionFit(
        [i + 1 for i in keep], lon[keep], lat[keep], np.zeros(len(keep)), np.full(len(keep), 4.0),
        nu[:, keep], xi[:, keep], HYPER)]
    return model, lon, lat, nu, xi


def _dense_predict(event, lon, lat, nu, xi, hyper):
    d = great_circle_km(lon[:, None], lat[:, None], lon[None, :], lat[None, :])
    k = hyper.sigma_f2 * matern32(d, hyper.lengthscale) + hyper.sigma_n2 * np.eye(len(lon))
    ks = hyper.sigma_f2 * matern32(great_circle_km(event.lon, event.lat, lon, lat), hyper.lengthscale)
    means, variances = [], []
    for m in range(nu.shape[0]):
        a = k + np.diag(xi[m])
        means.append(ks @ np.linalg.solve(a, nu[m]))
        variances.append(hyper.sigma_f2 + hyper.sigma_n2 - ks @ np.linalg.solve(a, ks))
    return np.array(means), np.array(variances)


class TestOutputs:
    def test_parse(self):
        assert parse_output('tt') == ('tt', 0)
        assert parse_output('w7') == (WAVELET_GROUP, 7)
        with pytest.raises(ConfigurationError):
            parse_output('wx')

    def test_unknown_coefficient(self):
        model = untrained_model(STATION, 'P', 3)
        with pytest.raises(ConfigurationError):
            posterior_predict(Event(5.0, 5.0, 0.0, 0.0, 4.0), model, 'w3')


class TestPrediction:
    def test_untrained_is_prior(self):
        model = untrained_model(STATION, 'P', 3)
        ev = Event(5.0, 5.0, 10.0, 0.0, 4.0)
        mean, var = predict_theta(ev, model)
        assert mean[0] == pytest.approx(predict_travel_time(ev, STATION, 'P', GeoModel().velocity))
        sf2, _, sn2 = DEFAULT_GP.defaults['tt']
        assert var[0] == pytest.approx(sf2 + sn2)
        assert mean[2] == pytest.approx(DEFAULT_GP.intercepts['onset'])
        w_mean, w_var = predict_group(ev, model, WAVELET_GROUP)
        assert_allclose(w_mean, 0.0)
        assert_allclose(w_var, sum(DEFAULT_GP.defaults[WAVELET_GROUP][::2]))

    def test_matches_dense_gp(self, rng):
        model, lon, lat, nu, xi = _model_with_region(rng)
        ev = Event(12.0, 0.5, 0.0, 0.0, 4.0)
        mean, var = predict_group(ev, model, WAVELET_GROUP)
        d_mean, d_var = _dense_predict(ev, lon, lat, nu, xi, HYPER)
        assert_allclose(mean, d_mean, rtol=1e-8, atol=1e-10)
        assert_allclose(var, np.maximum(d_var, HYPER.sigma_n2), rtol=1e-8)

    def test_leave_one_out(self, rng):
        full, *_ = _model_with_region(np.random.default_rng(3))
        held, *_ = _model_with_region(np.random.default_rng(3), exclude=4)
        ev = Event(11.0, -1.0, 0.0, 0.0, 4.0)
        mean_loo, var_loo = predict_group(ev, full, WAVELET_GROUP, exclude=5)
        mean_ref, var_ref = predict_group(ev, held, WAVELET_GROUP)
        assert_allclose(mean_loo, mean_ref, rtol=1e-7, atol=1e-10)
        assert_allclose(var_loo, var_ref, rtol=1e-7)

    def test_round_trip(self, rng):
        model, *_ = _model_with_region(rng)
        back = StationPhaseModel.from_dict(model.to_dict())
        ev = Event(12.5, 1.0, 0.0, 0.0, 4.0)
        for a, b in zip(predict_group(ev, model, WAVELET_GROUP), predict_group(ev, back, WAVELET_GROUP)):
            assert_allclose(a, b, rtol=1e-12)


class TestMarginalLikelihood:
    def _data(self, rng):
        lon, lat = _points(rng, 8)
        return RegionData(lon, lat, rng.normal(0.0, 1.0, (3, 8)), rng.uniform(0.1, 0.5, (3, 8)))

    def test_value_matches_dense(self, rng):
        data = self._data(rng)
        x = np.log([0.7, 250.0, 0.2])
        value, _ = log_marginal_likelihood(data, x)
        k = 0.7 * matern32(data.distances(), 250.0) + 0.2 * np.eye(8)
        dense = sum(multivariate_normal.logpdf(data.resid[m], np.zeros(8), k + np.diag(data.xi[m]))
                    for m in range(3))
        assert value == pytest.approx(dense, rel=1e-10)

    def test_gradient(self, rng):
        data = self._data(rng)
        h = 1e-6
        for _ in range(20):
            x = np.log([rng.uniform(0.2, 2.0), rng.uniform(50.0, 1000.0), rng.uniform(0.05, 1.0)])
            _, grad = log_marginal_likelihood(data, x)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                numeric = (log_marginal_likelihood(data, x + e)[0]
                           - log_marginal_likelihood(data, x - e)[0]) / (2 * h)
                assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

    def test_fit_improves_and_respects_bounds(self, rng):
        data = self._data(rng)
        init = GPHyper(0.5, 500.0, 0.5)
        fitted = fit_hyperparameters(data, init, DEFAULT_GP, rng)
        before = log_marginal_likelihood(data, np.log([0.5, 500.0, 0.5]))[0]
        after = log_marginal_likelihood(data, np.log([fitted.sigma_f2, fitted.lengthscale, fitted.sigma_n2]))[0]
        assert after >= before - 1e-9
        lo, hi = DEFAULT_GP.lengthscale_bounds
        assert lo * (1 - 1e-9) <= fitted.lengthscale <= hi * (1 + 1e-9)

    def test_single_point_keeps_init(self):
        data = RegionData([1.0], [2.0], [[0.3]], [[0.1]])
        assert fit_hyperparameters(data, HYPER) is HYPER


class TestRegions:
    def test_partition(self, rng):
        lon = np.concatenate([rng.normal(0.0, 0.5, 10), rng.normal(90.0, 0.5, 10)])
        lat = np.zeros(20)
        labels, centroids = partition_regions(lon, lat, 2, rng)
        assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1
        assert labels[0] != labels[10]
        assert assign_region(0.2, 0.0, centroids) == labels[0]
        assert assign_region(89.0, 0.0, centroids) == labels[10]
        with pytest.raises(ConfigurationError):
            partition_regions(lon, lat, 21, rng)

    def test_region_count(self):
        assert GPConfig().region_count(45) == 2
        assert GPConfig().region_count(3) == 1
        assert GPConfig(n_regions=5).region_count(3) == 3
        assert assign_region(0.0, 0.0, np.zeros((0, 3))) is None


class TestLinear:
    def test_broad_prior_is_least_squares(self, rng):
        phi = np.column_stack([np.ones(30), rng.normal(size=30)])
        y = phi @ np.array([1.5, -0.5]) + rng.normal(0.0, 0.1, 30)
        mean, cov = fit_linear(phi, y, np.full(30, 0.01), np.zeros(2), 1e8 * np.eye(2))
        assert_allclose(mean, np.linalg.lstsq(phi, y, rcond=None)[0], rtol=1e-5)
        assert_allclose(cov, cov.T)

    def test_no_features(self):
        mean, cov = fit_linear(np.zeros((4, 0)), np.ones(4), np.ones(4), np.zeros(0), np.zeros((0, 0)))
        assert mean.shape == (0,) and cov.shape == (0, 0)


class TestFitOutputModel:
    def test_fit_and_channels(self, rng):
        n = 10
        lon, lat = _points(rng, n)
        model = untrained_model(STATION, 'P', 3)
        model.centroids = unit_vectors(lon, lat).mean(axis=0, keepdims=True)
        data = OutputTraining(list(range(1, n + 1)), lon, lat, np.zeros(n), rng.uniform(3.0, 5.0, n),
                              rng.normal(0.0, 1.0, (3, n)), np.full((3, n), 0.2))
        fitted = fit_output_model(WAVELET_GROUP, data, model, np.zeros(n, dtype=int), DEFAULT_GP, rng)
        assert fitted.n_outputs == 3
        assert len(fitted.regions) == 1 and fitted.regions[0].n_points == n
        model.groups[WAVELET_GROUP] = fitted
        channels = training_channels(model, WAVELET_GROUP)
        assert len(channels) == 3
        assert channels[0].cov.shape == (n, n)
        assert_allclose(channels[0].mean, 0.0)

    def test_tt_residual_mean(self, rng):
        n = 6
        lon, lat = _points(rng, n)
        model = untrained_model(STATION, 'P', 2)
        model.centroids = unit_vectors(lon, lat).mean(axis=0, keepdims=True)
        tt = [predict_travel_time(Event(lon[i], lat[i], 0.0, 0.0, 4.0), STATION, 'P', GeoModel().velocity)
              for i in range(n)]
        data = OutputTraining(list(range(1, n + 1)), lon, lat, np.zeros(n), np.full(n, 4.0),
                              np.array([tt]), np.full((1, n), 0.1))
        model.groups['tt'] = fit_output_model('tt', data, model, np.zeros(n, dtype=int), DEFAULT_GP, rng)
        channels = training_channels(model, 'tt')
        assert_allclose(channels[0].mean, tt)
        assert_allclose(channels[0].nu, tt)
