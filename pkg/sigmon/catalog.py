"""CSV station lists, bulletins and tabular outputs."""
import csv
import io
import logging
import pathlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from sigmon.base import ParseError, StationId
from sigmon.geophys import Station
from sigmon.store import atomic_write
from sigmon.worldmodel import Event


_LOG = logging.getLogger('sigmon.catalog')

PathLike = Union[str, pathlib.Path]

BULLETIN_COLUMNS = ('event_id', 'lon_deg', 'lat_deg', 'depth_km', 'time_epoch_s', 'mb', 'confidence')
TRACE_COLUMNS = ('block', 'chain', 'sample', 'n_events', 'lon_deg', 'lat_deg', 'depth_km', 'time_epoch_s', 'mb')


@dataclass(frozen=True)
class BulletinEntry:
    event_id: int
    event: Event
    confidence: float = 1.0


def _rows(path: PathLike) -> Iterable[Tuple[int, Dict[str, str]]]:
    with open(str(path), newline='') as f:
        numbered = [(i, line) for i, line in enumerate(f, start=1) if not line.startswith('#') and line.strip()]
    if not numbered:
        return []
    reader = csv.DictReader(line for _, line in numbered)
    return [(numbered[k + 1][0], row) for k, row in enumerate(reader)]


def _number(path: PathLike, lineno: int, row: Dict[str, str], column: str, cast=float,
            default: Optional[float] = None):
    value = row.get(column)
    if value is None or value == '':
        if default is not None:
            return default
        raise ParseError(str(path), "missing value", line=lineno, field=column)
    try:
        return cast(value)
    except ValueError:
        raise ParseError(str(path), f"cannot parse {value!r}", line=lineno, field=column)


def read_stations(path: PathLike) -> Dict[StationId, Station]:
    out: Dict[StationId, Station] = {}
    for lineno, row in _rows(path):
        sta = row.get('station_id')
        if not sta:
            raise ParseError(str(path), "missing value", line=lineno, field='station_id')
        lon = _number(path, lineno, row, 'lon_deg')
        lat = _number(path, lineno, row, 'lat_deg')
        if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
            raise ParseError(str(path), "coordinates out of range", line=lineno, field='lon_deg/lat_deg')
        out[StationId(sta)] = Station(StationId(sta), lon, lat)
    return out


def read_bulletin(path: PathLike) -> List[BulletinEntry]:
    entries = []
    for k, (lineno, row) in enumerate(_rows(path)):
        ev = Event(_number(path, lineno, row, 'lon_deg'), _number(path, lineno, row, 'lat_deg'),
                   _number(path, lineno, row, 'depth_km'), _number(path, lineno, row, 'time_epoch_s'),
                   _number(path, lineno, row, 'mb'))
        if not ev.in_bounds():
            raise ParseError(str(path), "event outside the domain", line=lineno)
        evid = _number(path, lineno, row, 'event_id', int, default=k + 1)
        conf = _number(path, lineno, row, 'confidence', float, default=1.0)
        if not 0.0 <= conf <= 1.0:
            raise ParseError(str(path), "confidence outside [0, 1]", line=lineno, field='confidence')
        entries.append(BulletinEntry(int(evid), ev, conf))
    return entries


def provenance_lines(config_hash: str, seed: int, **extra) -> List[str]:
    items = [f"config_hash={config_hash}", f"seed={seed}"] + [f"{k}={v}" for k, v in sorted(extra.items())]
    return ['# ' + ' '.join(items)]


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence], provenance: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for line in provenance:
        buf.write(line + '\n')
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    atomic_write(path, buf.getvalue().encode())


def write_bulletin(path: PathLike, entries: Sequence[BulletinEntry], provenance: Sequence[str] = ()) -> None:
    rows = [(e.event_id, e.event.lon, e.event.lat, e.event.depth, e.event.origin_time, e.event.mb, e.confidence)
            for e in entries]
    write_csv(path, BULLETIN_COLUMNS, rows, provenance)
    _LOG.info(f"wrote {len(entries)} events to {path}")


def write_trace(path: PathLike, samples: Iterable[Tuple[int, int, int, Sequence[Event]]],
                provenance: Sequence[str] = ()) -> None:
    """One row per event of each (block, chain, sample); an empty sample gets one row with blank event fields."""
    rows = []
    for block, chain, index, events in samples:
        if not events:
            rows.append((block, chain, index, 0, '', '', '', '', ''))
        for e in events:
            rows.append((block, chain, index, len(events), e.lon, e.lat, e.depth, e.origin_time, e.mb))
    write_csv(path, TRACE_COLUMNS, rows, provenance)
    _LOG.info(f"wrote {len(rows)} trace rows to {path}")


def write_stations(path: PathLike, stations: Dict[StationId, Station], provenance: Sequence[str] = ()) -> None:
    write_csv(path, ('station_id', 'lon_deg', 'lat_deg'),
              [(s.sta, s.lon, s.lat) for _, s in sorted(stations.items())], provenance)
