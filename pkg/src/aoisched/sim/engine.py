"""Monte-Carlo episodes, replications and policy maps.

All replications of a call advance in lockstep so the per-slot work is
vectorised over the batch.  Each replication owns its random streams,
derived from its own seed, so its trajectory does not depend on which
other replications share the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..model import SystemSpec, SystemState, check_state
from .policies import ObservationBatch, PolicyHandle, make_controller

CHUNK = 4096


@dataclass(frozen=True)
class EpisodeStats:
    mean_aoi_overall: float
    mean_aoi_per_source: tuple[float, ...]
    slots_counted: int
    burn_in_discarded: int
    seed: tuple[int, tuple[int, ...]]


@dataclass(frozen=True)
class ReplicationResult:
    mean: float
    stderr: float
    per_source_mean: tuple[float, ...]
    runs: tuple[EpisodeStats, ...]


def _seed_sequence(seed: int | np.random.SeedSequence) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def child_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed of replication ``index`` under ``master_seed``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))


def _streams(seed: np.random.SeedSequence) -> tuple[np.random.Generator, np.random.Generator]:
    # Derive children by key rather than spawn(), which depends on call history.
    dyn = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (0,))
    pol = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (1,))
    return np.random.default_rng(dyn), np.random.default_rng(pol)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def simulate(
    spec: SystemSpec,
    policy: PolicyHandle,
    T: int,
    burn_in: int,
    seeds: Sequence[int | np.random.SeedSequence],
    initial_state: SystemState | None = None,
    trace: bool = False,
) -> tuple[list[EpisodeStats], list[dict]]:
    """Run one episode per seed in lockstep.

    AoI is recorded at the start of each slot, before the action; the
    first ``burn_in`` slots are discarded.  Without ``initial_state``,
    source states are drawn from the stationary distribution and every AoI
    starts at 1.  ``trace`` records every slot of the first replication.
    """
    if T < 1 or not 0 <= burn_in < T:
        raise ValueError(f"need 0 <= burn_in < T, got burn_in={burn_in}, T={T}")
    if not seeds:
        raise ValueError("at least one seed is required")
    seqs = [_seed_sequence(s) for s in seeds]
    gens = [_streams(s) for s in seqs]
    dyn = [g[0] for g in gens]
    B, K = len(seqs), spec.num_sources
    arr = spec.arrays
    src_idx = np.arange(K)[None, :]

    if initial_state is not None:
        check_state(spec, initial_state)
        states = np.tile(np.array(initial_state.source_states, dtype=np.int64), (B, 1))
        aoi = np.tile(np.array(initial_state.aoi, dtype=np.int64), (B, 1))
    else:
        u0 = np.stack([g.random(K) for g in dyn])
        cdf0 = np.cumsum(arr.stationary, axis=1)
        cdf0[:, -1] = 1.0
        states = (cdf0[None] <= u0[..., None]).sum(axis=2)
        states = np.minimum(states, np.array(spec.num_states) - 1)
        aoi = np.ones((B, K), dtype=np.int64)

    ctrl = make_controller(spec, policy, [g[1] for g in gens], states if initial_state is not None else None)
    reveal = policy.observability == "detectable-reveal"
    total = np.zeros((B, K), dtype=np.int64)
    rows: list[dict] = []

    for t in range(T):
        if t % CHUNK == 0:
            U = np.stack([g.random((min(CHUNK, T - t), 1 + 2 * K)) for g in dyn])
        u = U[:, t % CHUNK]
        if t >= burn_in:
            total += aoi
        actions = ctrl.act(states, aoi) if ctrl.full_information else ctrl.act()
        channel_ok = u[:, 0] < arr.channel[actions]
        p = arr.obs[actions[:, None], src_idx, states]
        observed = channel_ok[:, None] & (u[:, 1:1 + K] < p)
        cdf = arr.trans_cdf[src_idx, states]
        nxt = (cdf <= u[:, 1 + K:, None]).sum(axis=2)
        if trace:
            row = {
                "slot": t + 1,
                "states": tuple(int(s) for s in states[0]),
                "aoi": tuple(int(d) for d in aoi[0]),
                "action": int(actions[0]),
                "channel_ok": bool(channel_ok[0]),
                "observed": tuple(bool(z) for z in observed[0]),
            }
        if not ctrl.full_information:
            ctrl.observe(ObservationBatch(actions, channel_ok, observed, states if reveal else None))
            if trace and hasattr(ctrl, "beliefs"):
                row["belief_entropy"] = _entropy(ctrl.beliefs[0])
        if trace:
            rows.append(row)
        aoi = np.where(observed, 1, aoi + 1)
        states = nxt

    counted = T - burn_in
    stats = []
    for b, seq in enumerate(seqs):
        per_source = total[b] / counted
        stats.append(
            EpisodeStats(
                float(per_source.mean()),
                tuple(float(x) for x in per_source),
                counted,
                burn_in,
                (int(seq.entropy), tuple(int(x) for x in seq.spawn_key)),
            )
        )
    return stats, rows


def run_episode(
    spec: SystemSpec,
    policy: PolicyHandle,
    T: int,
    burn_in: int = 0,
    seed: int | np.random.SeedSequence = 0,
    initial_state: SystemState | None = None,
    trace: bool = False,
) -> EpisodeStats | tuple[EpisodeStats, list[dict]]:
    """Simulate one episode; with ``trace`` also return the per-slot records."""
    stats, rows = simulate(spec, policy, T, burn_in, [seed], initial_state, trace)
    return (stats[0], rows) if trace else stats[0]


def aggregate(runs: Sequence[EpisodeStats]) -> ReplicationResult:
    means = np.array([r.mean_aoi_overall for r in runs])
    stderr = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
    per_source = np.mean([r.mean_aoi_per_source for r in runs], axis=0)
    return ReplicationResult(float(means.mean()), stderr, tuple(float(x) for x in per_source), tuple(runs))


def replicate(
    spec: SystemSpec,
    policy: PolicyHandle,
    T: int,
    burn_in: int,
    runs: int,
    master_seed: int = 0,
    initial_state: SystemState | None = None,
) -> ReplicationResult:
    """Independent replications with seeds derived from ``(master_seed, run index)``."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    seeds = [child_seed(master_seed, i) for i in range(runs)]
    stats, _ = simulate(spec, policy, T, burn_in, seeds, initial_state)
    return aggregate(stats)


def policy_map(
    spec: SystemSpec,
    policy: PolicyHandle,
    fixed_states: Sequence[int],
    aoi_range: Sequence[int],
) -> np.ndarray:
    """Actions on the grid ``aoi_range x aoi_range`` for a two-source spec.

    Entry ``[i, j]`` is the action at AoIs ``(aoi_range[i], aoi_range[j])``.
    Detectable belief policies are evaluated with the source states known.
    """
    if spec.num_sources != 2:
        raise ValueError(f"policy maps need exactly 2 sources, spec has {spec.num_sources}")
    if policy.kind == "random" or policy.observability == "undetectable":
        raise ValueError(f"{policy.label} cannot be evaluated at a given state")
    check_state(spec, SystemState(tuple(fixed_states), (1, 1)))
    grid = np.array(list(aoi_range), dtype=np.int64)
    d1, d2 = np.meshgrid(grid, grid, indexing="ij")
    aoi = np.stack([d1.ravel(), d2.ravel()], axis=1)
    states = np.tile(np.array(fixed_states, dtype=np.int64), (len(aoi), 1))
    rngs = [np.random.default_rng(0) for _ in range(len(aoi))]
    ctrl = make_controller(spec, policy, rngs, states)
    if ctrl.full_information:
        actions = ctrl.act(states, aoi)
    else:
        ctrl.aoi = aoi
        actions = ctrl.act()
    return actions.reshape(len(grid), len(grid))
