"""Bulletin scoring against a reference bulletin."""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from sigmon.base import InvariantError
from sigmon.geophys import great_circle_km
from sigmon.inference import ScoredEvent
from sigmon.worldmodel import Event, Gating


_LOG = logging.getLogger('sigmon.evaluation')


@dataclass
class Matching:
    """pairs hold (inferred index, reference index, distance in km)."""
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_inferred: List[int] = field(default_factory=list)
    unmatched_reference: List[int] = field(default_factory=list)

    @property
    def cardinality(self) -> int:
        return len(self.pairs)

    @property
    def total_km(self) -> float:
        return math.fsum(d for _, _, d in self.pairs)


def gated_distances(inferred: Sequence[Event], reference: Sequence[Event], gating: Gating) -> np.ndarray:
    """Great-circle distances, +inf where a pair fails the gate."""
    if not inferred or not reference:
        return np.full((len(inferred), len(reference)), np.inf)
    lon1 = np.array([e.lon for e in inferred])[:, None]
    lat1 = np.array([e.lat for e in inferred])[:, None]
    t1 = np.array([e.origin_time for e in inferred])[:, None]
    lon2 = np.array([e.lon for e in reference])[None, :]
    lat2 = np.array([e.lat for e in reference])[None, :]
    t2 = np.array([e.origin_time for e in reference])[None, :]
    d = np.asarray(great_circle_km(lon1, lat1, lon2, lat2), dtype=float).reshape(len(inferred), len(reference))
    ok = (d <= gating.distance_km) & (np.abs(t1 - t2) <= gating.time_s)
    return np.where(ok, d, np.inf)


def match_bulletins(inferred: Sequence[Event], reference: Sequence[Event], gating: Gating = Gating()) -> Matching:
    """Minimum-weight matching among the maximum-cardinality matchings of the gated graph.

    Allowed edges cost d - big, forbidden ones cost 0; big exceeds any total
    distance, so every extra pair outweighs all distance savings.
    """
    d = gated_distances(inferred, reference, gating)
    allowed = np.isfinite(d)
    if not allowed.any():
        return Matching([], list(range(len(inferred))), list(range(len(reference))))
    big = min(d.shape) * float(d[allowed].max()) + 1.0
    cost = np.where(allowed, d - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(i), int(j), float(d[i, j])) for i, j in zip(rows, cols) if allowed[i, j]]
    used_i = {i for i, _, _ in pairs}
    used_j = {j for _, j, _ in pairs}
    return Matching(sorted(pairs), [i for i in range(len(inferred)) if i not in used_i],
                    [j for j in range(len(reference)) if j not in used_j])


def precision_recall(matching: Matching, n_inferred: int, n_reference: int) -> Tuple[float, float]:
    k = matching.cardinality
    if k > n_inferred or k > n_reference:
        raise InvariantError(f"matching of size {k} exceeds the bulletin sizes ({n_inferred}, {n_reference})")
    precision = k / n_inferred if n_inferred else 1.0
    recall = k / n_reference if n_reference else 1.0
    return precision, recall


def pr_point(scored: Sequence[ScoredEvent], reference: Sequence[Event], threshold: float,
             gating: Gating = Gating()) -> Tuple[float, float]:
    subset = [s.event for s in scored if s.confidence >= threshold]
    return precision_recall(match_bulletins(subset, reference, gating), len(subset), len(reference))


def pr_curve(scored: Sequence[ScoredEvent], reference: Sequence[Event],
             gating: Gating = Gating()) -> List[Tuple[float, float, float]]:
    """(threshold, precision, recall) at every distinct confidence, ascending."""
    out = []
    for threshold in sorted({s.confidence for s in scored}):
        p, r = pr_point(scored, reference, threshold, gating)
        out.append((threshold, p, r))
    return out


def threshold_at_precision(curve: Sequence[Tuple[float, float, float]], target: float) -> Optional[Tuple[float, float, float]]:
    """The curve point with the highest recall among those reaching the target precision."""
    ok = [pt for pt in curve if pt[1] >= target]
    if not ok:
        return None
    return max(ok, key=lambda pt: (pt[2], -pt[0]))


def mean_location_error(matching: Matching) -> Optional[float]:
    if not matching.pairs:
        return None
    return matching.total_km / matching.cardinality


def de_novo_subset(reference: Sequence[Event], training: Sequence[Event], radius_km: float = 50.0) -> List[Event]:
    """Reference events farther than radius_km from every training event."""
    if not training:
        return list(reference)
    lon = np.array([e.lon for e in training])
    lat = np.array([e.lat for e in training])
    return [e for e in reference if float(np.min(great_circle_km(e.lon, e.lat, lon, lat))) > radius_km]


def recall_by_group(matching: Matching, reference: Sequence[Event],
                    edges: Sequence[float] = (2.0, 3.0, 4.0, 5.0, 8.0)) -> List[Tuple[float, float, int, int, float]]:
    """Recall per magnitude bin: (lo, hi, n_reference, n_matched, recall)."""
    matched = {j for _, j, _ in matching.pairs}
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        idx = [j for j, e in enumerate(reference) if lo <= e.mb < hi or (hi == edges[-1] and e.mb == hi)]
        hit = sum(1 for j in idx if j in matched)
        out.append((float(lo), float(hi), len(idx), hit, hit / len(idx) if idx else float('nan')))
    return out


def location_error_histogram(matching: Matching, bin_km: float = 10.0,
                             max_km: Optional[float] = None) -> List[Tuple[float, float, int]]:
    max_km = Gating().distance_km if max_km is None else max_km
    edges = np.arange(0.0, max_km + bin_km, bin_km)
    counts, _ = np.histogram([d for _, _, d in matching.pairs], bins=edges)
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


@dataclass(frozen=True)
class Metrics:
    n_inferred: int
    n_reference: int
    n_matched: int
    precision: float
    recall: float
    mean_error_km: Optional[float]

    def rows(self) -> List[Tuple[str, object]]:
        return [('n_inferred', self.n_inferred), ('n_reference', self.n_reference), ('n_matched', self.n_matched),
                ('precision', self.precision), ('recall', self.recall),
                ('mean_location_error_km', '' if self.mean_error_km is None else self.mean_error_km)]


def evaluate(inferred: Sequence[Event], reference: Sequence[Event], gating: Gating = Gating()) -> Metrics:
    m = match_bulletins(inferred, reference, gating)
    p, r = precision_recall(m, len(inferred), len(reference))
    metrics = Metrics(len(inferred), len(reference), m.cardinality, p, r, mean_location_error(m))
    _LOG.info(f"precision {p:.3f} recall {r:.3f} over {len(reference)} reference events")
    return metrics
