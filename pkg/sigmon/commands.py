import argparse
import configparser
import logging

from sigmon.config import load_config
from sigmon.frontend import emit_plots, evaluate_bulletin, infer, synth, train


_LOG = logging.getLogger('sigmon.commands')


def _config(args: argparse.Namespace) -> configparser.ConfigParser:
    return load_config(args.config, seed=args.seed, jobs=args.jobs)


def cmd_synth(args: argparse.Namespace) -> None:
    events, signals = synth(_config(args))
    _LOG.info(f"{len(events)} events, {len(signals)} waveforms")


def cmd_train(args: argparse.Namespace) -> None:
    model = train(_config(args))
    if model.em_trace:
        _LOG.info(f"EM objective trace: {', '.join(f'{v:.6g}' for v in model.em_trace)}")


def cmd_infer(args: argparse.Namespace) -> None:
    scored = infer(_config(args))
    for s in scored:
        ev = s.event
        _LOG.info(f"{ev.origin_time:14.3f} {ev.lon:9.3f} {ev.lat:8.3f} {ev.depth:6.1f} mb {ev.mb:4.2f}"
                  f"  confidence {s.confidence:.2f}")


def cmd_eval(args: argparse.Namespace) -> None:
    metrics, point = evaluate_bulletin(_config(args))
    for key, value in metrics.rows():
        _LOG.info(f"{key}: {value}")
    if point is None:
        _LOG.info("target precision not reached at any threshold")
    else:
        _LOG.info(f"operating point: threshold {point[0]:.3f}, precision {point[1]:.3f}, recall {point[2]:.3f}")


def cmd_emit_plots(args: argparse.Namespace) -> None:
    emit_plots(_config(args))
