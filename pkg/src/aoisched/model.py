"""System model: sources, sensors, erasure channels and the AoI dynamics.

Indices are zero-based throughout: sensor ``a`` is in ``range(N)``, source
``k`` in ``range(K)`` and source state ``s`` in ``range(S_k)``.  AoI values
are one-based (a freshly delivered observation has age 1).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

STOCHASTIC_TOL = 1e-12
FIXED_POINT_TOL = 1e-10


class SingularChainError(ArithmeticError):
    """The stationarity system of a Markov chain could not be solved."""


class SupportTooLargeError(ValueError):
    """An enumeration would exceed its configured size cap."""


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SourceSpec:
    """A Markov source: its transition matrix and per-sensor observation probabilities.

    ``obs_prob[n, s]`` is the probability that sensor ``n`` observes the
    source while it is in state ``s``.
    """

    transition: np.ndarray
    obs_prob: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen_array(self.transition, 2, "transition"))
        object.__setattr__(self, "obs_prob", _frozen_array(self.obs_prob, 2, "obs_prob"))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @cached_property
    def stationary(self) -> np.ndarray:
        return stationary_distribution(self)


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """A full problem instance.

    Construction only checks shapes; call :func:`validate` for the modelling
    assumptions (stochastic rows, irreducible aperiodic chains, reachability).
    """

    channel: np.ndarray
    sources: tuple[SourceSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "channel", _frozen_array(self.channel, 1, "channel"))
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise ValueError("at least one source is required")
        n = self.channel.shape[0]
        if n < 1:
            raise ValueError("at least one sensor is required")
        for k, src in enumerate(self.sources):
            if src.transition.shape != (src.num_states, src.num_states):
                raise ValueError(f"sources[{k}].transition must be square")
            if src.obs_prob.shape != (n, src.num_states):
                raise ValueError(
                    f"sources[{k}].obs_prob has shape {src.obs_prob.shape}, "
                    f"expected {(n, src.num_states)}"
                )

    @property
    def num_sensors(self) -> int:
        return self.channel.shape[0]

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def num_states(self) -> tuple[int, ...]:
        return tuple(src.num_states for src in self.sources)

    @cached_property
    def arrays(self) -> "ModelArrays":
        return ModelArrays.from_spec(self)


@dataclass(frozen=True)
class ModelArrays:
    """Dense, zero-padded array view of a :class:`SystemSpec` for vectorised code.

    ``obs[a, k, s]`` is p_{ak}^{(s)}; ``trans[k]`` is R_k padded to
    ``(S_max, S_max)``; padded states have zero probability everywhere.
    """

    obs: np.ndarray
    trans: np.ndarray
    trans_cdf: np.ndarray
    channel: np.ndarray
    sizes: np.ndarray
    stationary: np.ndarray

    @classmethod
    def from_spec(cls, spec: SystemSpec) -> "ModelArrays":
        n, k_count = spec.num_sensors, spec.num_sources
        s_max = max(spec.num_states)
        obs = np.zeros((n, k_count, s_max))
        trans = np.zeros((k_count, s_max, s_max))
        stat = np.zeros((k_count, s_max))
        for k, src in enumerate(spec.sources):
            s = src.num_states
            obs[:, k, :s] = src.obs_prob
            trans[k, :s, :s] = src.transition
            # Padded rows self-loop so the cdf stays well formed.
            for pad in range(s, s_max):
                trans[k, pad, pad] = 1.0
            try:
                stat[k, :s] = src.stationary
            except SingularChainError:
                stat[k, :s] = 1.0 / s
        cdf = np.cumsum(trans, axis=-1)
        # Pin the cdf to exactly 1 from each row's last positive entry on, so
        # rounding can never select a zero-probability successor.
        last = s_max - 1 - np.argmax(trans[..., ::-1] > 0, axis=-1)
        cdf[np.arange(s_max) >= last[..., None]] = 1.0
        for arr in (obs, trans, cdf, stat):
            arr.setflags(write=False)
        sizes = np.array(spec.num_states)
        sizes.setflags(write=False)
        return cls(obs, trans, cdf, spec.channel, sizes, stat)


@dataclass(frozen=True)
class SystemState:
    """Exact system state: source states and AoIs (both length K)."""

    source_states: tuple[int, ...]
    aoi: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "source_states", tuple(int(s) for s in self.source_states))
        object.__setattr__(self, "aoi", tuple(int(d) for d in self.aoi))
        if len(self.source_states) != len(self.aoi):
            raise ValueError("source_states and aoi must have the same length")
        if any(d < 1 for d in self.aoi):
            raise ValueError(f"AoI values must be >= 1, got {self.aoi}")


@dataclass(frozen=True)
class StepOutcome:
    next_state: SystemState
    channel_ok: bool
    observed: tuple[bool, ...] = field(default=())


def check_state(spec: SystemSpec, state: SystemState) -> None:
    if len(state.aoi) != spec.num_sources:
        raise ValueError(f"state has {len(state.aoi)} sources, spec has {spec.num_sources}")
    for k, (s, size) in enumerate(zip(state.source_states, spec.num_states)):
        if not 0 <= s < size:
            raise ValueError(f"source {k} state {s} outside range(0, {size})")


def check_action(spec: SystemSpec, action: int) -> int:
    action = int(action)
    if not 0 <= action < spec.num_sensors:
        raise ValueError(f"action {action} outside range(0, {spec.num_sensors})")
    return action


# -- validation --------------------------------------------------------------


def _chain_period(support: np.ndarray) -> int:
    """Period of an irreducible chain from BFS levels on its transition graph."""
    graph = csr_matrix(support.astype(np.int8))
    order, _ = breadth_first_order(graph, 0, directed=True, return_predecessors=True)
    level = np.full(support.shape[0], -1)
    level[0] = 0
    for u in order:
        for v in np.flatnonzero(support[u]):
            if level[v] < 0:
                level[v] = level[u] + 1
    period = 0
    for u, v in zip(*np.nonzero(support)):
        period = math.gcd(period, int(level[u] + 1 - level[v]))
    return period


def validate(spec: SystemSpec) -> list[str]:
    """Return a list of violated modelling assumptions (empty when valid)."""
    problems: list[str] = []
    q = spec.channel
    if np.any((q < 0) | (q > 1)) or not np.all(np.isfinite(q)):
        problems.append("sensors.channel: entries must lie in [0, 1]")
    for k, src in enumerate(spec.sources):
        path = f"sources[{k}]"
        R = src.transition
        if np.any((R < 0) | (R > 1)) or not np.all(np.isfinite(R)):
            problems.append(f"{path}.transition: entries must lie in [0, 1]")
        sums = R.sum(axis=1)
        for i in np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL):
            problems.append(f"{path}.transition[{i}]: row sums to {sums[i]:.12g}, expected 1")
        support = R > 0
        n_comp, _ = connected_components(csr_matrix(support), directed=True, connection="strong")
        if n_comp > 1:
            problems.append(f"{path}.transition: chain is not irreducible")
        else:
            period = _chain_period(support)
            if period != 1:
                problems.append(f"{path}.transition: chain is periodic (period {period})")
        P = src.obs_prob
        if np.any((P < 0) | (P > 1)) or not np.all(np.isfinite(P)):
            problems.append(f"{path}.obs_prob: entries must lie in [0, 1]")
        if not np.sum(q[:, None] * P) > 0:
            problems.append(f"{path}: source can never be observed (sum of q_n p_nk^(s) is 0)")
    return problems


# -- stationary distribution -------------------------------------------------


def stationary_distribution(source: SourceSpec) -> np.ndarray:
    """Solve beta R = beta, sum(beta) = 1 for the source's chain."""
    R = source.transition
    n = R.shape[0]
    A = R.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularChainError("stationarity system is singular") from exc
    if not np.all(np.isfinite(beta)):
        raise SingularChainError("stationarity system is singular")
    beta = np.clip(beta, 0.0, None)
    beta /= beta.sum()
    beta.setflags(write=False)
    return beta


# -- cost and dynamics -------------------------------------------------------


def cost(spec: SystemSpec, state: SystemState, action: int) -> float:
    """Expected mean AoI in the next slot when sensor ``action`` is scheduled."""
    check_state(spec, state)
    a = check_action(spec, action)
    q = spec.channel[a]
    aoi = np.asarray(state.aoi, dtype=float)
    p = np.array([src.obs_prob[a, s] for src, s in zip(spec.sources, state.source_states)])
    return float(aoi.mean() + 1.0 - np.mean(p * q * aoi))


def _next_aoi(aoi: int, reset: bool, truncation: int | None) -> int:
    if reset:
        return 1
    return aoi + 1 if truncation is None else min(truncation, aoi + 1)


def step(
    spec: SystemSpec,
    state: SystemState,
    action: int,
    rng: np.random.Generator,
    truncation: int | None = None,
) -> StepOutcome:
    """Sample one slot of the shared-channel dynamics."""
    check_state(spec, state)
    a = check_action(spec, action)
    channel_ok = bool(rng.random() < spec.channel[a])
    observed = []
    for src, s in zip(spec.sources, state.source_states):
        hit = rng.random() < src.obs_prob[a, s]
        observed.append(bool(channel_ok and hit))
    aoi = tuple(_next_aoi(d, z, truncation) for d, z in zip(state.aoi, observed))
    states = tuple(
        int(rng.choice(src.num_states, p=src.transition[s]))
        for src, s in zip(spec.sources, state.source_states)
    )
    return StepOutcome(SystemState(states, aoi), channel_ok, tuple(observed))


def reset_distribution(spec: SystemSpec, state: SystemState, action: int) -> dict[tuple[bool, ...], float]:
    """Joint law of the reset indicators under the shared channel event."""
    a = check_action(spec, action)
    q = spec.channel[a]
    p = [src.obs_prob[a, s] for src, s in zip(spec.sources, state.source_states)]
    out: dict[tuple[bool, ...], float] = {}
    none = (False,) * spec.num_sources
    out[none] = 1.0 - q
    for pattern in itertools.product((False, True), repeat=spec.num_sources):
        w = q * math.prod(pk if z else 1.0 - pk for pk, z in zip(p, pattern))
        if w > 0:
            out[pattern] = out.get(pattern, 0.0) + w
    return {pat: w for pat, w in out.items() if w > 0}


def transition_distribution(
    spec: SystemSpec,
    state: SystemState,
    action: int,
    truncation: int,
    max_support: int = 1_000_000,
) -> list[tuple[SystemState, float]]:
    """Enumerate the one-step kernel of the Q-truncated system."""
    check_state(spec, state)
    if truncation is None or truncation < 1:
        raise ValueError("a finite truncation is required")
    resets = reset_distribution(spec, state, action)
    rows = [src.transition[s] for src, s in zip(spec.sources, state.source_states)]
    successors = [np.flatnonzero(row) for row in rows]
    size = len(resets) * math.prod(len(s) for s in successors)
    if size > max_support:
        raise SupportTooLargeError(f"kernel support {size} exceeds cap {max_support}")
    out: dict[SystemState, float] = {}
    for pattern, w in resets.items():
        aoi = tuple(_next_aoi(d, z, truncation) for d, z in zip(state.aoi, pattern))
        for nxt in itertools.product(*successors):
            pr = w * math.prod(row[j] for row, j in zip(rows, nxt))
            key = SystemState(nxt, aoi)
            out[key] = out.get(key, 0.0) + pr
    return list(out.items())


# -- capacity constraint -----------------------------------------------------


def expand_capacity_constraint(spec: SystemSpec, capacity: int, max_sensors: int = 100_000) -> SystemSpec:
    """Replace each sensor by one virtual sensor per ``capacity``-subset of sources.

    Virtual sensors are ordered sensor-major, subsets in lexicographic order.
    """
    K = spec.num_sources
    if not 1 <= capacity <= K:
        raise ValueError(f"capacity must lie in [1, {K}], got {capacity}")
    subsets = list(itertools.combinations(range(K), capacity))
    total = spec.num_sensors * len(subsets)
    if total > max_sensors:
        raise SupportTooLargeError(f"{total} virtual sensors exceed cap {max_sensors}")
    channel = np.repeat(spec.channel, len(subsets))
    sources = []
    for k, src in enumerate(spec.sources):
        rows = []
        for n in range(spec.num_sensors):
            for subset in subsets:
                rows.append(src.obs_prob[n] if k in subset else np.zeros(src.num_states))
        sources.append(SourceSpec(src.transition, np.array(rows)))
    return SystemSpec(channel, tuple(sources))


def make_spec(channel: Sequence[float], sources: Sequence[tuple[Sequence, Sequence]]) -> SystemSpec:
    """Build a spec from plain nested lists: ``sources = [(transition, obs_prob), ...]``."""
    return SystemSpec(np.asarray(channel, float), tuple(SourceSpec(t, o) for t, o in sources))
