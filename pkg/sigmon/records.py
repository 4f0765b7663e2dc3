"""Waveform files: little-endian float32 samples plus a key-value sidecar.

The sidecar (".meta") is a key-value list with message: one "key value" line
per field, continuation lines start with a space, then a blank line and a
free-text message.
"""
import collections
import csv
import logging
import pathlib
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from sigmon.base import ParseError, StationId
from sigmon.signalmodel import StationSignal
from sigmon.store import atomic_write


_LOG = logging.getLogger('sigmon.records')

PathLike = Union[str, pathlib.Path]

# written next to the waveforms by synth; not itself a waveform
MANIFEST_NAME = 'manifest.csv'

META_KEYS = ('station_id', 'start_time_epoch_s', 'rate_hz', 'band_label', 'config_hash', 'seed')


def kvlm_parse(raw: str, path: str = '<meta>') -> Dict[str, List[str]]:
    """Parse a key-value list with message; the message is stored under ''."""
    dct: Dict[str, List[str]] = collections.OrderedDict()
    lines = raw.split('\n')
    i = 0
    while i < len(lines):
        line = lines[i]
        if line == '':
            dct[''] = ['\n'.join(lines[i + 1:])]
            return dct
        spc = line.find(' ')
        if spc <= 0:
            raise ParseError(path, "expected 'key value'", line=i + 1)
        key, value = line[:spc], [line[spc + 1:]]
        # continuation lines begin with a space
        while i + 1 < len(lines) and lines[i + 1].startswith(' '):
            i += 1
            value.append(lines[i][1:])
        dct.setdefault(key, []).append('\n'.join(value))
        i += 1
    dct[''] = ['']
    return dct


def kvlm_serialize(kvlm: Dict[str, List[str]]) -> str:
    ret = ''
    for k, values in kvlm.items():
        if k == '':
            continue
        for v in values:
            ret += k + ' ' + v.replace('\n', '\n ') + '\n'
    return ret + '\n' + ''.join(kvlm.get('', ['']))


def _meta_field(meta: Dict[str, List[str]], key: str, path: str, cast=str):
    if key not in meta:
        raise ParseError(path, "missing field", field=key)
    try:
        return cast(meta[key][0])
    except ValueError:
        raise ParseError(path, f"cannot parse {meta[key][0]!r}", field=key)


def waveform_write(directory: PathLike, signal: StationSignal, band_label: str = 'default',
                   config_hash: str = '', seed: int = 0, message: str = '') -> pathlib.Path:
    directory = pathlib.Path(directory)
    base = directory / str(signal.station)
    samples = np.asarray(signal.samples, dtype='<f4')
    atomic_write(base.with_suffix('.f32'), samples.tobytes())
    meta = collections.OrderedDict([
        ('station_id', [str(signal.station)]),
        ('start_time_epoch_s', [repr(float(signal.start_time))]),
        ('rate_hz', [repr(float(signal.rate_hz))]),
        ('band_label', [band_label]),
        ('config_hash', [config_hash]),
        ('seed', [str(seed)]),
        ('', [message + '\n' if message else '']),
    ])
    atomic_write(base.with_suffix('.meta'), kvlm_serialize(meta).encode())
    return base.with_suffix('.f32')


def waveform_read(path: PathLike) -> Tuple[StationSignal, Dict[str, List[str]]]:
    path = pathlib.Path(path)
    if path.suffix == '.csv':
        return waveform_read_csv(path), {}
    meta_path = path.with_suffix('.meta')
    meta = kvlm_parse(meta_path.read_text(), str(meta_path))
    station = _meta_field(meta, 'station_id', str(meta_path))
    start = _meta_field(meta, 'start_time_epoch_s', str(meta_path), float)
    rate = _meta_field(meta, 'rate_hz', str(meta_path), float)
    if not rate > 0:
        raise ParseError(str(meta_path), "rate must be positive", field='rate_hz')
    raw = path.with_suffix('.f32').read_bytes()
    if len(raw) % 4:
        raise ParseError(str(path), f"size {len(raw)} is not a multiple of 4 bytes")
    samples = np.frombuffer(raw, dtype='<f4').astype(float)
    if not np.all(np.isfinite(samples)):
        raise ParseError(str(path), "non-finite samples")
    return StationSignal(StationId(station), start, rate, samples), meta


def waveform_read_csv(path: PathLike, station: Optional[str] = None) -> StationSignal:
    """CSV ingest: columns time_epoch_s, amplitude; uniform sampling required."""
    path = pathlib.Path(path)
    times, values = [], []
    with open(str(path), newline='') as f:
        rows = (row for row in f if not row.startswith('#'))
        reader = csv.DictReader(rows)
        for lineno, row in enumerate(reader, start=2):
            try:
                times.append(float(row['time_epoch_s']))
                values.append(float(row['amplitude']))
            except KeyError as exc:
                raise ParseError(str(path), "missing column", line=lineno, field=str(exc.args[0]))
            except (TypeError, ValueError):
                raise ParseError(str(path), "not a number", line=lineno)
    if len(times) < 2:
        raise ParseError(str(path), "need at least two samples")
    steps = np.diff(times)
    dt = float(np.median(steps))
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * max(1.0, dt):
        raise ParseError(str(path), "samples are not uniformly spaced")
    return StationSignal(StationId(station or path.stem), times[0], 1.0 / dt, np.array(values))


def waveform_read_dir(directory: PathLike) -> Dict[StationId, StationSignal]:
    directory = pathlib.Path(directory)
    out: Dict[StationId, StationSignal] = {}
    paths = sorted(directory.glob('*.f32')) + sorted(p for p in directory.glob('*.csv') if p.name != MANIFEST_NAME)
    for path in paths:
        signal, _ = waveform_read(path)
        if signal.station in out:
            raise ParseError(str(path), f"second waveform for station {signal.station}")
        out[signal.station] = signal
    _LOG.debug(f"read {len(out)} waveforms from {directory}")
    return out
