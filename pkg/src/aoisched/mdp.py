"""Exact solver for the fully observable scheduling problem.

The AoI of every source is truncated at ``Q``; states are enumerated with a
mixed-radix code whose high digits are the source states and whose low
digits are the (zero-based) AoIs.  Value tables are flat float64 arrays in
that order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .model import SystemSpec, SystemState, check_state, cost

MAX_STATES = 5_000_000
MAX_SOURCES = 6
TIE_TOL = 1e-9


class StateSpaceTooLargeError(ValueError):
    pass


class SpanBracketError(ArithmeticError):
    """The span bracket moved in the wrong direction, so the iteration is broken."""


def argmin_lowest(values: np.ndarray, axis: int = 0, tol: float = TIE_TOL) -> np.ndarray:
    """Argmin that treats values within ``tol`` (relative) of the minimum as ties.

    Ties go to the lowest index.
    """
    m = values.min(axis=axis, keepdims=True)
    near = values <= m + tol * np.maximum(1.0, np.abs(m))
    return np.argmax(near, axis=axis)


class StateSpace:
    """Enumerated Q-truncated state space of a spec."""

    def __init__(self, spec: SystemSpec, Q: int, max_states: int = MAX_STATES):
        if Q < 1:
            raise ValueError("Q must be positive")
        K = spec.num_sources
        if K > MAX_SOURCES:
            raise StateSpaceTooLargeError(f"{K} sources exceed the exact-solver cap of {MAX_SOURCES}")
        self.spec = spec
        self.Q = int(Q)
        self.source_shape = spec.num_states
        self.shape = self.source_shape + (self.Q,) * K
        self.num_states = math.prod(self.shape)
        if self.num_states > max_states:
            raise StateSpaceTooLargeError(
                f"{self.num_states} states exceed the exact-solver cap of {max_states}"
            )

    @property
    def num_sources(self) -> int:
        return self.spec.num_sources

    def encode(self, state: SystemState) -> int:
        check_state(self.spec, state)
        if max(state.aoi) > self.Q:
            raise ValueError(f"AoI {state.aoi} exceeds truncation {self.Q}")
        digits = state.source_states + tuple(d - 1 for d in state.aoi)
        return int(np.ravel_multi_index(digits, self.shape))

    def decode(self, index: int) -> SystemState:
        if not 0 <= index < self.num_states:
            raise IndexError(index)
        digits = np.unravel_index(int(index), self.shape)
        K = self.num_sources
        return SystemState(tuple(int(d) for d in digits[:K]), tuple(int(d) + 1 for d in digits[K:]))

    def encode_arrays(self, states: np.ndarray, aoi: np.ndarray) -> np.ndarray:
        """Vectorised encode of ``(B, K)`` arrays; AoIs above Q are clamped to Q."""
        aoi = np.minimum(np.asarray(aoi), self.Q) - 1
        digits = tuple(np.asarray(states).T) + tuple(aoi.T)
        return np.ravel_multi_index(digits, self.shape)

    def decode_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All states as ``(n, K)`` source-state and AoI arrays."""
        digits = np.indices(self.shape).reshape(len(self.shape), -1)
        K = self.num_sources
        return digits[:K].T, digits[K:].T + 1

    def default_reference(self, source_states: tuple[int, ...] | None = None) -> int:
        s0 = source_states or (0,) * self.num_sources
        return self.encode(SystemState(s0, (self.Q,) * self.num_sources))

    def reachable_sources(self, start: tuple[int, ...]) -> np.ndarray:
        """Boolean mask over joint source configurations reachable from ``start``.

        The joint source chain ignores actions, so this is plain graph search.
        """
        seen = np.zeros(self.source_shape, dtype=bool)
        seen[tuple(start)] = True
        frontier = [tuple(start)]
        succ = [[np.flatnonzero(src.transition[s]) for s in range(src.num_states)] for src in self.spec.sources]
        while frontier:
            nxt = []
            for cfg in frontier:
                for child in itertools.product(*(succ[k][s] for k, s in enumerate(cfg))):
                    child = tuple(int(c) for c in child)
                    if not seen[child]:
                        seen[child] = True
                        nxt.append(child)
            frontier = nxt
        return seen

    @cached_property
    def operator(self) -> "BellmanOperator":
        return BellmanOperator(self)


class BellmanOperator:
    """Factored evaluation of C(L, a) + E[h(L') | L, a] over the whole space.

    Given the source states, the resets of different sources are independent
    conditionally on the shared channel event, so the expectation is applied
    one AoI axis at a time rather than over all 2^K reset patterns.
    """

    def __init__(self, space: StateSpace):
        self.space = space
        spec = space.spec
        K, Q = spec.num_sources, space.Q
        self._inc = np.minimum(np.arange(1, Q + 1), Q - 1)
        ndim = len(space.shape)
        self._p = []  # self._p[a][k]: obs probabilities broadcast along source axis k
        for a in range(spec.num_sensors):
            row = []
            for k, src in enumerate(spec.sources):
                shape = [1] * ndim
                shape[k] = src.num_states
                row.append(src.obs_prob[a].reshape(shape))
            self._p.append(row)
        self._aoi = []
        for k in range(K):
            shape = [1] * ndim
            shape[K + k] = Q
            self._aoi.append(np.arange(1, Q + 1, dtype=float).reshape(shape))

    @cached_property
    def costs(self) -> np.ndarray:
        """One-step expected cost, shape ``(N, *space.shape)``."""
        space, spec = self.space, self.space.spec
        K = spec.num_sources
        mean_aoi = sum(self._aoi) / K
        out = np.empty((spec.num_sensors,) + space.shape)
        for a in range(spec.num_sensors):
            q = spec.channel[a]
            gain = sum(q * self._p[a][k] * self._aoi[k] for k in range(K)) / K
            out[a] = mean_aoi + 1.0 - gain
        return out

    def _contract_sources(self, H: np.ndarray) -> np.ndarray:
        for k, src in enumerate(self.space.spec.sources):
            H = np.moveaxis(np.tensordot(src.transition, H, axes=([1], [k])), 0, k)
        return H

    def expect(self, h: np.ndarray) -> np.ndarray:
        """E[h(L') | L, a] for every state and action, shape ``(N, *space.shape)``."""
        space, spec = self.space, self.space.spec
        K = spec.num_sources
        G = self._contract_sources(np.asarray(h, float).reshape(space.shape))
        inc_all = G
        for k in range(K):
            inc_all = np.take(inc_all, self._inc, axis=K + k)
        out = np.empty((spec.num_sensors,) + space.shape)
        for a in range(spec.num_sensors):
            q = spec.channel[a]
            E = (1.0 - q) * inc_all
            if q > 0:
                X = G
                for k in range(K):
                    p = self._p[a][k]
                    axis = K + k
                    if not np.any(p):
                        X = np.take(X, self._inc, axis=axis)
                    elif np.all(p == 1.0):
                        X = np.take(X, [0], axis=axis)
                    else:
                        X = p * np.take(X, [0], axis=axis) + (1.0 - p) * np.take(X, self._inc, axis=axis)
                E = E + q * X
            out[a] = E
        return out

    def q_values(self, h: np.ndarray, discount: float = 1.0) -> np.ndarray:
        """C + discount * E[h], flattened to shape ``(N, n)``."""
        vals = self.costs + discount * self.expect(h)
        return vals.reshape(self.space.spec.num_sensors, -1)


@dataclass(frozen=True)
class Backup:
    h: np.ndarray
    lam: float
    delta_low: float
    delta_high: float


def bellman_backup(
    space: StateSpace,
    h_in: np.ndarray,
    reference: int,
    mask: np.ndarray | None = None,
    aperiodicity: float = 1.0,
) -> Backup:
    """One relative value iteration sweep.

    The span deltas are taken over the pre-subtraction backup minus ``h_in``.
    ``mask`` (flat, boolean) restricts the sweep to a closed set of states;
    entries outside it are set to zero.  ``aperiodicity`` < 1 applies the
    standard transformation ``(1 - tau) h + tau T h``.
    """
    Th = space.operator.q_values(h_in).min(axis=0)
    if aperiodicity != 1.0:
        Th = (1.0 - aperiodicity) * h_in + aperiodicity * Th
    lam = float(Th[reference])
    diff = Th - h_in
    if mask is not None:
        diff = diff[mask]
    h_out = Th - lam
    if mask is not None:
        h_out[~mask] = 0.0
    return Backup(h_out, lam, float(diff.min()), float(diff.max()))


@dataclass(frozen=True, eq=False)
class ValueTable:
    space: StateSpace
    h: np.ndarray
    gain: float
    reference: int
    iterations: int
    span_low: float
    span_high: float
    converged: bool
    aperiodicity: float = 1.0
    mask: np.ndarray | None = None
    trace: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    space: StateSpace
    actions: np.ndarray

    def action(self, state: SystemState) -> int:
        aoi = tuple(min(d, self.space.Q) for d in state.aoi)
        return int(self.actions[self.space.encode(SystemState(state.source_states, aoi))])


@dataclass(frozen=True, eq=False)
class ActionValues:
    """Per-state action values C(L, a) + E[h(L') | L, a], shape ``(N, n)``."""

    space: StateSpace
    values: np.ndarray

    def lookup(self, states: np.ndarray, aoi: np.ndarray) -> np.ndarray:
        idx = self.space.encode_arrays(np.atleast_2d(states), np.atleast_2d(aoi))
        return self.values[:, idx].T


def action_values(space: StateSpace, h: np.ndarray) -> ActionValues:
    return ActionValues(space, space.operator.q_values(h))


def greedy_policy(space: StateSpace, h: np.ndarray) -> PolicyTable:
    """argmin_a C + E[h], lowest sensor index on (near-)ties."""
    if not np.all(np.isfinite(h)):
        raise ValueError("h must be finite")
    return PolicyTable(space, argmin_lowest(space.operator.q_values(h), axis=0))


def relative_value_iteration(
    spec: SystemSpec,
    Q: int,
    epsilon: float = 1e-6,
    reference: SystemState | int | None = None,
    max_iters: int = 100_000,
    aperiodicity: float = 1.0,
    space: StateSpace | None = None,
) -> tuple[ValueTable, PolicyTable]:
    """Relative value iteration on the Q-truncated MDP.

    Stops when the span bracket is narrower than ``epsilon``.  The gain is
    the bracket midpoint (rescaled when ``aperiodicity`` < 1).  When the
    joint source chain is not irreducible, the iteration is restricted to
    source configurations reachable from the reference state.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0 < aperiodicity <= 1:
        raise ValueError("aperiodicity must lie in (0, 1]")
    space = space or StateSpace(spec, Q)
    if reference is None:
        ref = space.default_reference()
    elif isinstance(reference, SystemState):
        ref = space.encode(reference)
    else:
        ref = int(reference)
    ref_sources = space.decode(ref).source_states
    reach = space.reachable_sources(ref_sources)
    mask = None
    if not reach.all():
        mask = np.broadcast_to(reach.reshape(reach.shape + (1,) * spec.num_sources), space.shape).ravel().copy()

    h = np.zeros(space.num_states)
    lows, highs, lams = [], [], []
    converged = False
    n = 0
    for n in range(1, max_iters + 1):
        b = bellman_backup(space, h, ref, mask=mask, aperiodicity=aperiodicity)
        if lows:
            tol_lo = 1e-9 * max(1.0, abs(lows[-1]))
            tol_hi = 1e-9 * max(1.0, abs(highs[-1]))
            if b.delta_low < lows[-1] - tol_lo or b.delta_high > highs[-1] + tol_hi or b.delta_low > b.delta_high:
                raise SpanBracketError(
                    f"iteration {n}: bracket [{b.delta_low}, {b.delta_high}] "
                    f"after [{lows[-1]}, {highs[-1]}]"
                )
        lows.append(b.delta_low)
        highs.append(b.delta_high)
        lams.append(b.lam)
        h = b.h
        if b.delta_high - b.delta_low < epsilon:
            converged = True
            break
    trace = {"delta_low": np.array(lows), "delta_high": np.array(highs), "lam": np.array(lams)}
    gain = 0.5 * (lows[-1] + highs[-1]) / aperiodicity
    table = ValueTable(space, h, gain, ref, n, lows[-1], highs[-1], converged, aperiodicity, mask, trace)
    return table, greedy_policy(space, h)


def bellman_residual(table: ValueTable) -> float:
    """max |min_a{C + E[h]} - h - lambda| with lambda taken at the reference state."""
    Th = table.space.operator.q_values(table.h).min(axis=0)
    r = Th - table.h
    r = r - r[table.reference]
    if table.mask is not None:
        r = r[table.mask]
    return float(np.abs(r).max())


def myopic_action(spec: SystemSpec, state: SystemState) -> int:
    """Sensor with the lowest one-step expected cost; lowest index on ties."""
    costs = np.array([cost(spec, state, a) for a in range(spec.num_sensors)])
    return int(argmin_lowest(costs))


def discounted_value_iteration(space: StateSpace, discount: float, sweeps: int) -> np.ndarray:
    if not 0 < discount < 1:
        raise ValueError("discount must lie in (0, 1)")
    V = np.zeros(space.num_states)
    op = space.operator
    for _ in range(sweeps):
        V = op.q_values(V, discount).min(axis=0)
    return V


@dataclass(frozen=True)
class MonotonicityReport:
    ok: bool
    violation: tuple[SystemState, SystemState] | None = None


def verify_monotonicity(
    space: StateSpace,
    discount: float = 0.9,
    sweeps: int = 200,
    values: np.ndarray | None = None,
    tol: float = 1e-9,
) -> MonotonicityReport:
    """Check that a value table is nondecreasing in each source's AoI.

    Runs discounted value iteration from zero unless ``values`` is given.
    On failure, returns the first pair (lower-AoI state, higher-AoI state)
    where the value drops.
    """
    V = discounted_value_iteration(space, discount, sweeps) if values is None else np.asarray(values, float)
    V = V.reshape(space.shape)
    K = space.num_sources
    for k in range(K):
        axis = K + k
        lo = np.take(V, np.arange(space.Q - 1), axis=axis)
        hi = np.take(V, np.arange(1, space.Q), axis=axis)
        bad = np.argwhere(hi < lo - tol)
        if bad.size:
            digits = tuple(int(d) for d in bad[0])
            lower = SystemState(digits[:K], tuple(d + 1 for d in digits[K:]))
            aoi_hi = list(lower.aoi)
            aoi_hi[k] += 1
            return MonotonicityReport(False, (lower, SystemState(lower.source_states, tuple(aoi_hi))))
    return MonotonicityReport(True)
