"""Pipeline operations behind the subcommands: synth, train, infer, eval and emit-plots."""
import configparser
import logging
import pathlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sigmon.base import ConfigurationError, StationId
from sigmon.catalog import (BulletinEntry, provenance_lines, read_bulletin, read_stations, write_bulletin,
                            write_csv, write_stations, write_trace)
from sigmon.config import (EvalConfig, block_config, chain_config, config_hash, eval_config, geo_model, gp_config,
                           paths_config, prior_config, run_config, signal_config, synth_config, training_config)
from sigmon.evaluation import (Metrics, de_novo_subset, evaluate, location_error_histogram, match_bulletins,
                               mean_location_error, pr_curve, precision_recall, recall_by_group,
                               threshold_at_precision)
from sigmon.geophys import Station
from sigmon.inference import ScoredEvent, infer_with_trace
from sigmon.model import TrainedModel
from sigmon.posterior import Posterior
from sigmon.records import MANIFEST_NAME, waveform_read_dir, waveform_write
from sigmon.scenario import ScenarioGenerator, ring_stations
from sigmon.signalmodel import StationSignal, predicted_signal
from sigmon.store import model_read_with_provenance, model_write
from sigmon.training import em_fit
from sigmon.worldmodel import Event, EventPrior, LocationPrior


_LOG = logging.getLogger('sigmon.frontend')


def _provenance(conf: configparser.ConfigParser, **extra) -> List[str]:
    return provenance_lines(config_hash(conf), run_config(conf).seed, **extra)


def _events(entries: Sequence[BulletinEntry]) -> List[Event]:
    return [e.event for e in entries]


def synth_prior(conf: configparser.ConfigParser) -> EventPrior:
    """Event prior for synthesis: the configured rate, uniform locations."""
    pc = prior_config(conf)
    sc = synth_config(conf)
    rate = pc.rate
    if rate is None:
        if sc.n_events is None:
            raise ConfigurationError("[prior] rate: required by synth unless [synth] n_events is set")
        rate = max(sc.n_events, 1) / sc.duration_s
    prior = EventPrior(rate, sc.duration_s, LocationPrior(np.zeros((0, 2)), pc.kde_bandwidth_km, pc.uniform_weight),
                       sc.start_time, pc.depth_max, pc.mb_min, pc.mb_max, pc.b_value)
    prior.validate()
    return prior


def synth_stations(conf: configparser.ConfigParser) -> Dict[StationId, Station]:
    paths = paths_config(conf)
    path = paths.path('stations')
    if path.exists():
        return read_stations(path)
    sc = synth_config(conf)
    if sc.ring_stations < 1:
        raise ConfigurationError(f"no stations file {path} and [synth] ring_stations is 0")
    stations = ring_stations(sc.ring_stations, sc.ring_center[0], sc.ring_center[1], sc.ring_radius_km)
    write_stations(path, stations, _provenance(conf))
    _LOG.info(f"wrote {len(stations)} ring stations to {path}")
    return stations


def synth(conf: configparser.ConfigParser) -> Tuple[List[Event], Dict[StationId, StationSignal]]:
    """Sample a world, synthesize every station signal, write waveforms, truth bulletin and manifest."""
    paths = paths_config(conf)
    run = run_config(conf)
    stations = synth_stations(conf)
    generator = ScenarioGenerator(stations, geo_model(conf), signal_config(conf), synth_config(conf))
    rng = np.random.default_rng(np.random.SeedSequence(run.seed))
    scenario = generator.generate(synth_prior(conf), rng)

    digest = config_hash(conf)
    out_dir = paths.path('waveforms')
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for sta, sig in sorted(scenario.signals.items()):
        written = waveform_write(out_dir, sig, run.band_label, digest, run.seed,
                                 f"synthetic, {len(scenario.arrivals[sta])} arrivals")
        manifest.append((sta, written.name, sig.n_samples, sig.rate_hz, sig.start_time))
    write_csv(out_dir / MANIFEST_NAME, ('station_id', 'file', 'n_samples', 'rate_hz', 'start_time_epoch_s'),
              manifest, _provenance(conf))
    entries = [BulletinEntry(k, ev, 1.0) for k, ev in enumerate(scenario.events, start=1)]
    write_bulletin(paths.path('truth_bulletin'), entries, _provenance(conf))
    return scenario.events, scenario.signals


def train(conf: configparser.ConfigParser) -> TrainedModel:
    paths = paths_config(conf)
    run = run_config(conf)
    stations = read_stations(paths.path('stations'))
    bulletin = _events(read_bulletin(paths.path('training_bulletin')))
    signals = waveform_read_dir(paths.path('waveforms'))
    model = em_fit(bulletin, signals, stations, geo_model(conf), signal_config(conf), prior_config(conf),
                   gp_config(conf), chain_config(conf), training_config(conf), run.seed, run.jobs)
    model_write(paths.path('model'), model, config_hash(conf), run.seed)
    return model


def _model_signals(model: TrainedModel, signals: Dict[StationId, StationSignal]) -> Dict[StationId, StationSignal]:
    out = {}
    for sta, sig in sorted(signals.items()):
        if sta not in model.stations:
            _LOG.warning(f"station {sta} is not in the model, excluded")
            continue
        if abs(sig.rate_hz - model.signal.rate_hz) > 1e-9:
            _LOG.warning(f"station {sta}: rate {sig.rate_hz} Hz differs from the model's {model.signal.rate_hz} Hz, excluded")
            continue
        out[sta] = sig
    return out


def infer(conf: configparser.ConfigParser) -> List[ScoredEvent]:
    paths = paths_config(conf)
    run = run_config(conf)
    blocks = block_config(conf)
    model, trained_hash, _ = model_read_with_provenance(paths.path('model'))
    _LOG.debug(f"model trained under config {trained_hash[:12]}")
    signals = _model_signals(model, waveform_read_dir(paths.path('waveforms')))
    if not signals:
        raise ConfigurationError("no waveform matches a station of the model")
    scored, trace = infer_with_trace(signals, model, chain_config(conf), blocks.n_chains, blocks.block_s, run.seed,
                                     run.jobs, eval_config(conf).gating, keep_samples=paths.trace is not None)
    entries = [BulletinEntry(k, s.event, s.confidence) for k, s in enumerate(scored, start=1)]
    write_bulletin(paths.path('bulletin'), entries, _provenance(conf, n_chains=blocks.n_chains))
    if paths.trace is not None:
        write_trace(paths.path('trace'), [(t.block, t.chain, t.index, t.events) for t in trace],
                    _provenance(conf, n_chains=blocks.n_chains))
    return scored


def _scored(entries: Sequence[BulletinEntry]) -> List[ScoredEvent]:
    return [ScoredEvent(e.event, e.confidence) for e in entries]


def evaluate_bulletin(conf: configparser.ConfigParser) -> Tuple[Metrics, Optional[Tuple[float, float, float]]]:
    """Metrics of the whole bulletin and the operating point at the target precision."""
    paths = paths_config(conf)
    ec = eval_config(conf)
    inferred = read_bulletin(paths.path('bulletin'))
    reference = _events(read_bulletin(paths.path('truth_bulletin')))
    metrics = evaluate(_events(inferred), reference, ec.gating)
    curve = pr_curve(_scored(inferred), reference, ec.gating)
    point = threshold_at_precision(curve, ec.target_precision)
    rows = metrics.rows()
    if point is None:
        rows.append(('operating_threshold', ''))
    else:
        rows += [('operating_threshold', point[0]), ('operating_precision', point[1]), ('operating_recall', point[2])]
    write_csv(paths.path('metrics'), ('metric', 'value'), rows, _provenance(conf))
    return metrics, point


def emit_plots(conf: configparser.ConfigParser) -> List[pathlib.Path]:
    """CSV plot data: PR curve, location errors, recall by magnitude, de novo recall, model fit per station."""
    paths = paths_config(conf)
    ec = eval_config(conf)
    out_dir = paths.path('plots')
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = _provenance(conf)
    inferred = read_bulletin(paths.path('bulletin'))
    reference = _events(read_bulletin(paths.path('truth_bulletin')))
    written = []

    curve = pr_curve(_scored(inferred), reference, ec.gating)
    written.append(out_dir / 'pr_curve.csv')
    write_csv(written[-1], ('threshold', 'precision', 'recall'), curve, prov)

    matching = match_bulletins(_events(inferred), reference, ec.gating)
    written.append(out_dir / 'location_error_histogram.csv')
    write_csv(written[-1], ('lo_km', 'hi_km', 'count'),
              location_error_histogram(matching, ec.histogram_bin_km, ec.gating.distance_km), prov)

    written.append(out_dir / 'recall_by_mb.csv')
    write_csv(written[-1], ('mb_lo', 'mb_hi', 'n_reference', 'n_matched', 'recall'),
              recall_by_group(matching, reference, ec.mb_edges), prov)

    training_path = paths.path('training_bulletin')
    if training_path.exists():
        subset = de_novo_subset(reference, _events(read_bulletin(training_path)), ec.de_novo_radius_km)
        sub_match = match_bulletins(_events(inferred), subset, ec.gating)
        _, recall = precision_recall(sub_match, len(inferred), len(subset))
        err = mean_location_error(sub_match)
        written.append(out_dir / 'de_novo_recall.csv')
        write_csv(written[-1], ('radius_km', 'n_de_novo', 'n_matched', 'recall', 'mean_location_error_km'),
                  [(ec.de_novo_radius_km, len(subset), sub_match.cardinality, recall, '' if err is None else err)], prov)
    else:
        _LOG.warning(f"no training bulletin at {training_path}; de novo recall skipped")

    if paths.path('model').exists() and paths.path('waveforms').is_dir():
        written += model_fit_curves(conf, [e.event for e in inferred if e.confidence >= _fit_threshold(curve, ec)],
                                    out_dir, prov)
    for path in written:
        _LOG.info(f"wrote {path}")
    return written


def _fit_threshold(curve: Sequence[Tuple[float, float, float]], ec: EvalConfig) -> float:
    point = threshold_at_precision(curve, ec.target_precision)
    return point[0] if point is not None else 0.0


def model_fit_curves(conf: configparser.ConfigParser, events: Sequence[Event], out_dir: pathlib.Path,
                     provenance: Sequence[str]) -> List[pathlib.Path]:
    """Observed signal against the prior predictive mean and a two-sigma band, per station."""
    paths = paths_config(conf)
    model, _, _ = model_read_with_provenance(paths.path('model'))
    signals = _model_signals(model, waveform_read_dir(paths.path('waveforms')))
    if not signals:
        return []
    t0 = min([s.start_time for s in signals.values()] + [e.origin_time for e in events]) - 1.0
    t1 = max([s.end_time for s in signals.values()] + [e.origin_time for e in events]) + 1.0
    prior = model.event_prior.with_window(t0, t1 - t0)
    post = Posterior(signals, model, chain_config(conf), prior)
    state = post.initial_state()
    for ev in events:
        post.add_event_at_mean(state, ev)
    written = []
    for sta in post.stations:
        sig = signals[sta]
        mean, var = predicted_signal(state.station_arrivals(sta), state.noise[sta], sig.window(),
                                     post.signal_config, post.basis)
        sd = np.sqrt(var)
        rows = zip(sig.times(), sig.samples, mean, mean - 2.0 * sd, mean + 2.0 * sd)
        path = out_dir / f"model_fit_{sta}.csv"
        write_csv(path, ('time_epoch_s', 'observed', 'predicted', 'lower', 'upper'), rows, provenance)
        written.append(path)
    return written
