"""Scheduling policies as batched controllers.

A controller drives a batch of independent replications in lockstep.
Full-information controllers are handed the true state each slot.
Partial-information controllers never see it: they only receive an
:class:`ObservationBatch` after each slot and act on their own beliefs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..mdp import TIE_TOL, ActionValues, ValueTable, action_values, argmin_lowest, greedy_policy
from ..model import SupportTooLargeError, SystemSpec
from ..pomdp import (
    DEFAULT_AOI_BELIEF_Q,
    DEFAULT_QMDP_SAMPLES,
    MAX_EXACT_SUPPORT,
    batch_update_aoi_beliefs,
    batch_update_state_beliefs,
    effective_obs_probs,
)

KINDS = ("random", "myopic", "optimal", "ml", "qmdp")
OBSERVABILITIES = ("full", "detectable", "detectable-reveal", "undetectable")


class IncompatiblePolicyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PolicyHandle:
    """A scheduling policy together with the information it may use.

    ``table`` is a solved :class:`ValueTable`.  It is required for
    ``optimal`` and optional for ``ml`` and ``qmdp`` (absent means the
    myopic variant).  For undetectable sources the table must be solved on
    :func:`~aoisched.pomdp.collapse_to_stationary` of the scenario.

    ``tie_break`` is ``"lowest"`` or ``"random"``; by default belief
    policies break ties uniformly at random and the others take the lowest
    sensor index.
    """

    kind: str
    observability: str = "full"
    table: ValueTable | None = None
    mode: str = "exact"
    samples: int = DEFAULT_QMDP_SAMPLES
    aoi_truncation: int | None = None
    tie_break: str | None = None

    def __post_init__(self):
        if self.tie_break is None:
            # Belief policies hit exact ties whenever the belief gives no
            # action an edge; a fixed pick there starves everything else.
            default = "random" if self.kind in ("ml", "qmdp") else "lowest"
            object.__setattr__(self, "tie_break", default)
        if self.kind not in KINDS:
            raise IncompatiblePolicyError(f"unknown policy kind {self.kind!r}")
        if self.observability not in OBSERVABILITIES:
            raise IncompatiblePolicyError(f"unknown observability {self.observability!r}")
        if self.kind in ("myopic", "optimal") and self.observability != "full":
            raise IncompatiblePolicyError(f"{self.kind} needs full observability")
        if self.kind in ("ml", "qmdp") and self.observability == "full":
            raise IncompatiblePolicyError(f"{self.kind} is a partial-information policy")
        if self.kind == "optimal" and self.table is None:
            raise IncompatiblePolicyError("optimal needs a value table")
        if self.mode not in ("exact", "sampled"):
            raise IncompatiblePolicyError(f"unknown mode {self.mode!r}")
        if self.tie_break not in ("lowest", "random"):
            raise IncompatiblePolicyError(f"unknown tie-break rule {self.tie_break!r}")
        if self.samples < 1:
            raise IncompatiblePolicyError("samples must be positive")
        if self.table is not None and self.aoi_truncation not in (None, self.table.space.Q):
            raise IncompatiblePolicyError("AoI-belief truncation must match the table's Q")

    @classmethod
    def random(cls) -> "PolicyHandle":
        return cls("random")

    @classmethod
    def myopic(cls, **kw) -> "PolicyHandle":
        return cls("myopic", **kw)

    @classmethod
    def optimal(cls, table: ValueTable, **kw) -> "PolicyHandle":
        return cls("optimal", table=table, **kw)

    @classmethod
    def ml(cls, observability: str = "detectable", table: ValueTable | None = None, **kw) -> "PolicyHandle":
        return cls("ml", observability, table, **kw)

    @classmethod
    def qmdp(cls, observability: str = "detectable", table: ValueTable | None = None, **kw) -> "PolicyHandle":
        return cls("qmdp", observability, table, **kw)

    @property
    def label(self) -> str:
        if self.kind in ("random", "myopic", "optimal"):
            return self.kind
        suffix = {"detectable": "detect", "detectable-reveal": "reveal", "undetectable": "undetect"}
        return f"{self.kind}-{suffix[self.observability]}"

    @cached_property
    def values(self) -> ActionValues | None:
        return None if self.table is None else action_values(self.table.space, self.table.h)

    def check(self, spec: SystemSpec) -> None:
        """Raise if the policy cannot run on ``spec``."""
        if self.table is None:
            return
        tspec = self.table.space.spec
        if tspec.num_sensors != spec.num_sensors or tspec.num_sources != spec.num_sources:
            raise IncompatiblePolicyError("value table was solved for a different number of sensors or sources")
        want = (1,) * spec.num_sources if self.observability == "undetectable" else spec.num_states
        if tspec.num_states != want:
            raise IncompatiblePolicyError(f"value table has source sizes {tspec.num_states}, expected {want}")


@dataclass(frozen=True)
class ObservationBatch:
    """End-of-slot feedback for a batch: action, channel flag, observed sources, revealed states."""

    actions: np.ndarray
    channel_ok: np.ndarray
    observed: np.ndarray
    revealed: np.ndarray | None = None


def _myopic_costs(spec: SystemSpec, p: np.ndarray, aoi: np.ndarray) -> np.ndarray:
    """Costs ``(B, N)`` from observation probabilities ``p`` ``(B, N, K)`` and AoIs ``(B, K)``."""
    gain = (spec.channel[None, :, None] * p * aoi[:, None, :]).mean(axis=2)
    return aoi.mean(axis=1)[:, None] + 1.0 - gain


class TieBreaker:
    """Row-wise argmin; near-ties go to the lowest index or to a uniformly drawn one.

    The random rule consumes one uniform per replication and slot, whether
    or not a tie occurs, so streams stay aligned.
    """

    def __init__(self, rule: str, rngs: list[np.random.Generator]):
        self.rule = rule
        self.rngs = rngs

    def __call__(self, values: np.ndarray) -> np.ndarray:
        if self.rule == "lowest":
            return argmin_lowest(values, axis=1)
        u = np.array([g.random() for g in self.rngs])
        m = values.min(axis=1, keepdims=True)
        near = values <= m + TIE_TOL * np.maximum(1.0, np.abs(m))
        pick = np.floor(u * near.sum(axis=1)).astype(np.int64)
        return np.argmax(np.cumsum(near, axis=1) > pick[:, None], axis=1)


class RandomController:
    full_information = False

    def __init__(self, spec: SystemSpec, rngs: list[np.random.Generator], chunk: int = 4096):
        self.N = spec.num_sensors
        self.rngs = rngs
        self.chunk = chunk
        self._buf = np.empty((len(rngs), 0), dtype=np.int64)
        self._pos = 0

    def act(self) -> np.ndarray:
        if self._pos == self._buf.shape[1]:
            self._buf = np.stack([g.integers(self.N, size=self.chunk) for g in self.rngs])
            self._pos = 0
        out = self._buf[:, self._pos]
        self._pos += 1
        return out

    def observe(self, obs: ObservationBatch) -> None:
        pass


class MyopicController:
    full_information = True

    def __init__(self, spec: SystemSpec, choose: TieBreaker):
        self.spec = spec
        self.K = spec.num_sources
        self.choose = choose

    def act(self, states: np.ndarray, aoi: np.ndarray) -> np.ndarray:
        obs = self.spec.arrays.obs  # (N, K, S)
        p = obs[:, np.arange(self.K)[None, :], states].transpose(1, 0, 2)
        return self.choose(_myopic_costs(self.spec, p, aoi))

    def observe(self, obs: ObservationBatch) -> None:
        pass


class TableController:
    full_information = True

    def __init__(self, table: ValueTable, values: ActionValues, choose: TieBreaker):
        self.space = table.space
        self.choose = choose
        if choose.rule == "lowest":
            self.actions = greedy_policy(table.space, table.h).actions
        else:
            self.values = values

    def act(self, states: np.ndarray, aoi: np.ndarray) -> np.ndarray:
        if self.choose.rule == "lowest":
            return self.actions[self.space.encode_arrays(states, aoi)]
        return self.choose(self.values.lookup(states, aoi))

    def observe(self, obs: ObservationBatch) -> None:
        pass


class DetectableController:
    """ML or Q-MDP over factored state beliefs with known AoIs."""

    full_information = False

    def __init__(
        self,
        spec: SystemSpec,
        handle: PolicyHandle,
        rngs: list[np.random.Generator],
        initial_states: np.ndarray | None = None,
    ):
        self.spec = spec
        self.handle = handle
        self.rngs = rngs
        self.values = handle.values
        self.choose = TieBreaker(handle.tie_break, rngs)
        self.reveal = handle.observability == "detectable-reveal"
        B, K = len(rngs), spec.num_sources
        arr = spec.arrays
        if initial_states is None:
            self.beliefs = np.repeat(arr.stationary[None], B, axis=0).copy()
        else:
            self.beliefs = np.zeros((B, K, arr.trans.shape[1]))
            self.beliefs[np.arange(B)[:, None], np.arange(K)[None, :], initial_states] = 1.0
        self.aoi = np.ones((B, K), dtype=np.int64)
        self._last = None
        if self.values is not None and handle.kind == "qmdp" and handle.mode == "exact":
            space = self.values.space
            n_src = math.prod(space.source_shape)
            if n_src > MAX_EXACT_SUPPORT:
                raise SupportTooLargeError(f"belief support {n_src} exceeds cap {MAX_EXACT_SUPPORT}")
            self._V = self.values.values.reshape(spec.num_sensors, n_src, -1)

    def _p_bar(self) -> np.ndarray:
        """Belief-averaged observation probabilities ``(B, N, K)``."""
        obs = self.spec.arrays.obs.transpose(1, 2, 0)  # (K, S, N)
        return np.matmul(self.beliefs.transpose(1, 0, 2), obs).transpose(1, 2, 0)

    def _modes(self) -> np.ndarray:
        return np.argmax(self.beliefs, axis=2)

    def _joint(self) -> np.ndarray:
        J = np.ones((self.beliefs.shape[0], 1))
        for k, S in enumerate(self.spec.num_states):
            J = (J[:, :, None] * self.beliefs[:, k, None, :S]).reshape(J.shape[0], -1)
        return J

    def _sample_states(self) -> np.ndarray:
        count = self.handle.samples
        cdf = np.cumsum(self.beliefs, axis=2)
        cdf[..., -1] = 1.0
        u = np.stack([g.random((count, self.spec.num_sources)) for g in self.rngs])
        return (cdf[:, None] <= u[..., None]).sum(axis=3)  # (B, count, K)

    def objective(self) -> np.ndarray:
        h, spec = self.handle, self.spec
        K = spec.num_sources
        if h.kind == "ml":
            modes = self._modes()
            if self.values is None:
                p = spec.arrays.obs[:, np.arange(K)[None, :], modes].transpose(1, 0, 2)
                return _myopic_costs(spec, p, self.aoi)
            return self.values.lookup(modes, self.aoi)
        if h.mode == "exact":
            if self.values is None:
                return _myopic_costs(spec, self._p_bar(), self.aoi)
            space = self.values.space
            code = np.ravel_multi_index(tuple((np.minimum(self.aoi, space.Q) - 1).T), (space.Q,) * K)
            return np.einsum("nsb,bs->bn", self._V[:, :, code], self._joint())
        samples = self._sample_states()
        B, C = samples.shape[:2]
        aoi = np.repeat(self.aoi[:, None, :], C, axis=1).reshape(B * C, K)
        flat = samples.reshape(B * C, K)
        if self.values is None:
            p = spec.arrays.obs[:, np.arange(K)[None, :], flat].transpose(1, 0, 2)
            vals = _myopic_costs(spec, p, aoi)
        else:
            vals = self.values.lookup(flat, aoi)
        return vals.reshape(B, C, -1).mean(axis=1)

    def act(self) -> np.ndarray:
        return self.choose(self.objective())

    def observe(self, obs: ObservationBatch) -> None:
        self.beliefs = batch_update_state_beliefs(
            self.spec, self.beliefs, obs.actions, obs.channel_ok, obs.observed,
            obs.revealed if self.reveal else None,
        )
        self.aoi = np.where(obs.observed, 1, self.aoi + 1)

    def entropy(self) -> np.ndarray:
        b = self.beliefs
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.where(b > 0, b * np.log(b), 0.0).sum(axis=(1, 2))


class UndetectableController:
    """ML or Q-MDP over truncated AoI beliefs; source states stay at stationarity."""

    full_information = False

    def __init__(self, spec: SystemSpec, handle: PolicyHandle, rngs: list[np.random.Generator]):
        self.spec = spec
        self.handle = handle
        self.rngs = rngs
        self.values = handle.values
        self.choose = TieBreaker(handle.tie_break, rngs)
        self.p_hat = effective_obs_probs(spec)  # (N, K)
        if self.values is not None:
            self.Q = self.values.space.Q
        else:
            self.Q = handle.aoi_truncation or DEFAULT_AOI_BELIEF_Q
        B, K = len(rngs), spec.num_sources
        self.beliefs = np.zeros((B, K, self.Q))
        self.beliefs[..., 0] = 1.0
        self._aoi_grid = np.arange(1, self.Q + 1, dtype=float)

    def _costs(self, aoi: np.ndarray) -> np.ndarray:
        p = np.broadcast_to(self.p_hat[None], (aoi.shape[0],) + self.p_hat.shape)
        return _myopic_costs(self.spec, p, aoi)

    def objective(self) -> np.ndarray:
        h, K = self.handle, self.spec.num_sources
        B = self.beliefs.shape[0]
        zeros = np.zeros((B, K), dtype=np.int64)
        if h.kind == "ml":
            modes = np.argmax(self.beliefs, axis=2) + 1
            return self._costs(modes) if self.values is None else self.values.lookup(zeros, modes)
        if h.mode == "exact":
            if self.values is None:
                return self._costs(self.beliefs @ self._aoi_grid)
            N = self.spec.num_sensors
            out = np.empty((B, N))
            for b in range(B):
                V = self.values.values.reshape((N,) + (self.Q,) * K)
                for k in range(K):
                    V = np.tensordot(V, self.beliefs[b, k], axes=([1], [0]))
                out[b] = V
            return out
        count = h.samples
        cdf = np.cumsum(self.beliefs, axis=2)
        cdf[..., -1] = 1.0
        u = np.stack([g.random((count, K)) for g in self.rngs])
        aoi = (cdf[:, None] <= u[..., None]).sum(axis=3) + 1  # (B, count, K)
        flat = aoi.reshape(B * count, K)
        if self.values is None:
            vals = self._costs(flat)
        else:
            vals = self.values.lookup(np.zeros_like(flat), flat)
        return vals.reshape(B, count, -1).mean(axis=1)

    def act(self) -> np.ndarray:
        actions = self.choose(self.objective())
        # Nothing is learned from the outcome, so the belief moves on the action alone.
        reset = self.spec.channel[actions][:, None] * self.p_hat[actions]
        self.beliefs = batch_update_aoi_beliefs(self.beliefs, reset)
        return actions

    def observe(self, obs: ObservationBatch) -> None:
        pass

    def entropy(self) -> np.ndarray:
        b = self.beliefs
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.where(b > 0, b * np.log(b), 0.0).sum(axis=(1, 2))


def make_controller(
    spec: SystemSpec,
    handle: PolicyHandle,
    rngs: list[np.random.Generator],
    initial_states: np.ndarray | None = None,
):
    handle.check(spec)
    if handle.kind == "random":
        return RandomController(spec, rngs)
    if handle.kind == "myopic":
        return MyopicController(spec, TieBreaker(handle.tie_break, rngs))
    if handle.kind == "optimal":
        return TableController(handle.table, handle.values, TieBreaker(handle.tie_break, rngs))
    if handle.observability == "undetectable":
        return UndetectableController(spec, handle, rngs)
    return DetectableController(spec, handle, rngs, initial_states)
