"""Chains, blocks and bulletins: driving the moves and summarising their samples."""
import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sigmon.base import DomainError, StationId
from sigmon.geophys import great_circle_km
from sigmon.model import TrainedModel
from sigmon.moves import (MoveStats, Sampler, align_move, event_birth_death, mh_sweep, peak_shift_move,
                          split_merge_repropose, swap_move, unassociated_birth_death)
from sigmon.posterior import ChainConfig, Posterior
from sigmon.signalmodel import StationSignal
from sigmon.worldmodel import Event, EventPrior, Gating, WorldState, within_gate


_LOG = logging.getLogger('sigmon.inference')


@dataclass(frozen=True)
class ScoredEvent:
    event: Event
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class ChainResult:
    samples: List[List[Event]]
    final: WorldState
    stats: MoveStats = field(default_factory=MoveStats)


def run_chain(post: Posterior, rng: np.random.Generator, state: Optional[WorldState] = None,
              fixed_events: bool = False) -> ChainResult:
    """Run config.n_sweeps sweeps and keep the thinned post-burn-in event lists."""
    cfg = post.config
    cfg.validate()
    sampler = Sampler(post)
    if state is None:
        state = post.initial_state()
    burn = int(math.floor(cfg.burn_in_frac * cfg.n_sweeps))
    thin = max(1, cfg.thin)
    samples: List[List[Event]] = []
    for sweep in range(cfg.n_sweeps):
        state, _ = mh_sweep(state, sampler, rng, fixed_events=fixed_events)
        for _ in range(cfg.ua_moves):
            state = unassociated_birth_death(state, sampler, rng)
        if not fixed_events:
            for _ in range(cfg.event_moves):
                state = event_birth_death(state, sampler, rng)
                state = split_merge_repropose(state, sampler, rng)
            state = swap_move(state, sampler, rng)
        state = align_move(state, sampler, rng)
        state = peak_shift_move(state, sampler, rng)
        if sweep >= burn and (sweep - burn) % thin == 0:
            samples.append(state.event_list())
        if (sweep + 1) % 50 == 0:
            _LOG.debug(f"sweep {sweep + 1}/{cfg.n_sweeps}: {len(state.events)} events, "
                       f"{state.n_unassociated()} unassociated arrivals")
    _LOG.debug(f"chain done: {sampler.stats.summary()}")
    return ChainResult(samples, state, sampler.stats)


def _separation(a: Event, b: Event, gating: Gating) -> float:
    return (great_circle_km(a.lon, a.lat, b.lon, b.lat) / gating.distance_km
            + abs(a.origin_time - b.origin_time) / gating.time_s)


def score_events(samples: Sequence[Sequence[Event]], gating: Gating = Gating()) -> List[ScoredEvent]:
    """Cluster events across samples; confidence is the fraction of samples with a member.

    An event joins the first cluster whose seed is within the gate and that
    holds no member from the same sample. The reported event is the cluster
    medoid.
    """
    if not samples:
        return []
    clusters: List[Tuple[Event, Dict[int, Event]]] = []
    for k, sample in enumerate(samples):
        for ev in sorted(sample, key=lambda e: (e.origin_time, e.lon, e.lat)):
            for seed, members in clusters:
                if k not in members and within_gate(seed, ev, gating):
                    members[k] = ev
                    break
            else:
                clusters.append((ev, {k: ev}))
    out = []
    for _, members in clusters:
        pts = list(members.values())
        medoid = min(pts, key=lambda p: (math.fsum(_separation(p, q, gating) for q in pts), p.origin_time))
        out.append(ScoredEvent(medoid, len(members) / len(samples)))
    return sorted(out, key=lambda s: (-s.confidence, s.event.origin_time, s.event.lon, s.event.lat))


def _rank(s: ScoredEvent) -> tuple:
    return (-s.confidence, s.event.origin_time, s.event.lon, s.event.lat)


def merge_chains(bulletins: Sequence[Sequence[ScoredEvent]], gating: Gating = Gating()) -> List[ScoredEvent]:
    """Greedy union: highest confidence first, dropping anything within the gate of a kept event."""
    pooled = sorted((s for b in bulletins for s in b), key=_rank)
    kept: List[ScoredEvent] = []
    for cand in pooled:
        if not any(within_gate(cand.event, k.event, gating) for k in kept):
            kept.append(cand)
    return sorted(kept, key=lambda s: (s.event.origin_time, s.event.lon, s.event.lat))


@dataclass(frozen=True, eq=False)
class Block:
    index: int
    start_time: float
    end_time: float
    signals: Dict[StationId, StationSignal]


def split_blocks(signals: Dict[StationId, StationSignal], block_s: float) -> List[Block]:
    """Cut the common time span into consecutive blocks of block_s seconds."""
    if not signals:
        return []
    start = min(s.start_time for s in signals.values())
    end = max(s.end_time for s in signals.values())
    n = max(1, int(math.ceil((end - start) / block_s - 1e-9)))
    blocks = []
    for k in range(n):
        t0, t1 = start + k * block_s, min(end, start + (k + 1) * block_s)
        pieces = {}
        for sta, sig in sorted(signals.items()):
            piece = sig.slice_time(t0, t1)
            if piece.n_samples > 0:
                pieces[sta] = piece
        if pieces:
            blocks.append(Block(k, t0, t1, pieces))
    return blocks


@dataclass(frozen=True)
class TraceSample:
    """One kept sample of one chain: the event set of the world state at that sweep."""
    block: int
    chain: int
    index: int
    events: Tuple[Event, ...]


def _chain_task(block: Block, model: TrainedModel, config: ChainConfig, prior: EventPrior,
                seed: np.random.SeedSequence, gating: Gating,
                keep_samples: bool = False) -> Tuple[List[ScoredEvent], List[List[Event]]]:
    post = Posterior(block.signals, model, config, prior.with_window(block.start_time,
                                                                     block.end_time - block.start_time))
    result = run_chain(post, np.random.default_rng(seed))
    scored = score_events(result.samples, gating)
    _LOG.info(f"block {block.index} chain: {len(scored)} scored events; {result.stats.summary()}")
    return scored, (result.samples if keep_samples else [])


def infer_with_trace(signals: Dict[StationId, StationSignal], model: TrainedModel, config: ChainConfig,
                     n_chains: int = 3, block_s: float = 7200.0, seed: int = 0, jobs: int = 1,
                     gating: Gating = Gating(),
                     keep_samples: bool = True) -> Tuple[List[ScoredEvent], List[TraceSample]]:
    """Independent chains per block, merged per block and then across block boundaries.

    With keep_samples, every chain's post-burn-in samples come back too,
    ordered by block, chain and sample index.
    """
    blocks = split_blocks(signals, block_s)
    tasks = [(b, c) for b in range(len(blocks)) for c in range(n_chains)]
    seeds = np.random.SeedSequence(seed).spawn(len(tasks))
    results: Dict[Tuple[int, int], Tuple[List[ScoredEvent], List[List[Event]]]] = {}
    if jobs > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_chain_task, blocks[b], model, config, model.event_prior, seeds[i], gating,
                                   keep_samples): (b, c)
                       for i, (b, c) in enumerate(tasks)}
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()
    else:
        for i, (b, c) in enumerate(tasks):
            results[(b, c)] = _chain_task(blocks[b], model, config, model.event_prior, seeds[i], gating,
                                          keep_samples)
    per_block = [merge_chains([results[(b, c)][0] for c in range(n_chains)], gating) for b in range(len(blocks))]
    merged = merge_chains(per_block, gating)
    _LOG.info(f"inferred {len(merged)} events over {len(blocks)} blocks x {n_chains} chains")
    trace = [TraceSample(blocks[b].index, c, k, tuple(events))
             for b, c in tasks for k, events in enumerate(results[(b, c)][1])]
    return merged, trace


def infer_bulletin(signals: Dict[StationId, StationSignal], model: TrainedModel, config: ChainConfig,
                   n_chains: int = 3, block_s: float = 7200.0, seed: int = 0, jobs: int = 1,
                   gating: Gating = Gating()) -> List[ScoredEvent]:
    merged, _ = infer_with_trace(signals, model, config, n_chains, block_s, seed, jobs, gating, keep_samples=False)
    return merged
