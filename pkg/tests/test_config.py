from dataclasses import replace

import pytest

from sigmon.base import ConfigurationError
from sigmon.config import (block_config, chain_config, config_hash, default_config, eval_config, geo_model,
                           load_config, paths_config, prior_config, signal_config, synth_config)
from sigmon.geophys import GeoModel
from sigmon.posterior import ChainConfig
from sigmon.scenario import SynthConfig
from sigmon.signalmodel import SignalConfig


def _write(tmp_path, text):
    path = tmp_path / 'run.ini'
    path.write_text(text)
    return path


class TestDefaults:
    def test_sections_round_trip(self):
        conf = default_config()
        assert chain_config(conf) == replace(ChainConfig(), seed=0, k_max=SignalConfig().k_max)
        assert signal_config(conf) == SignalConfig()
        assert synth_config(conf) == SynthConfig()
        assert prior_config(conf).rate is None
        assert eval_config(conf).mb_edges == (2.0, 3.0, 4.0, 5.0, 8.0)
        assert block_config(conf).n_chains == 3

    def test_geo_model(self):
        geo = geo_model(default_config())
        assert geo.phases == GeoModel().phases
        assert geo.velocity == GeoModel().velocity
        assert geo.amplitude == GeoModel().amplitude

    def test_hash_is_stable(self):
        assert config_hash(default_config()) == config_hash(load_config())
        assert len(config_hash(default_config())) == 40


class TestLoad:
    def test_file_overrides(self, tmp_path):
        conf = load_config(_write(tmp_path, "[inference]\nn_sweeps = 10\nblock_s = 600\n[prior]\nrate = 0.001\n"))
        assert chain_config(conf).n_sweeps == 10
        assert block_config(conf).block_s == 600.0
        assert prior_config(conf).rate == 0.001

    def test_command_line_overrides(self):
        conf = load_config(seed=7, jobs=2)
        assert chain_config(conf).seed == 7
        assert conf.get('run', 'jobs') == '2'

    def test_paths_do_not_change_hash(self, tmp_path):
        base = config_hash(load_config())
        assert config_hash(load_config(_write(tmp_path, "[paths]\nmodel = other.sigmon\n"))) == base
        assert paths_config(load_config(_write(tmp_path, "[paths]\nmodel = other.sigmon\n"))).model == 'other.sigmon'
        assert config_hash(load_config(_write(tmp_path, "[inference]\nn_sweeps = 11\n"))) != base

    def test_tuples_and_optionals(self, tmp_path):
        conf = load_config(_write(tmp_path, "[synth]\nregion = 0, 5, -1, 4\nn_events = 3\n"
                                            "[eval]\nmb_edges = 3, 4\n"))
        sc = synth_config(conf)
        assert sc.region == (0.0, 5.0, -1.0, 4.0)
        assert sc.n_events == 3
        assert eval_config(conf).mb_edges == (3.0, 4.0)

    @pytest.mark.parametrize("text", [
        "[inference]\nn_sweep = 10\n",
        "[nonsense]\nx = 1\n",
        "[velocity.P]\nspeed = 8\n",
    ])
    def test_unknown_settings(self, tmp_path, text):
        with pytest.raises(ConfigurationError):
            load_config(_write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / 'absent.ini')

    @pytest.mark.parametrize("text, reader", [
        ("[inference]\nn_sweeps = many\n", chain_config),
        ("[synth]\nregion = 0, 5, 1\n", synth_config),
        ("[inference]\np_keep = 1.5\n", chain_config),
        ("[signal]\nar_order = -1\n", signal_config),
    ])
    def test_bad_values(self, tmp_path, text, reader):
        conf = load_config(_write(tmp_path, text))
        with pytest.raises(ConfigurationError):
            reader(conf)

    def test_phase_without_sections(self):
        conf = default_config()
        conf.set('phases', 'names', 'P, S, Pn')
        with pytest.raises(ConfigurationError):
            geo_model(conf)
