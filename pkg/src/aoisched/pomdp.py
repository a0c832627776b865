"""Belief tracking and belief-based scheduling for partially observed systems.

Beliefs are kept fully factored per source.  With detectable sources the
scheduler sees which sources were observed, so AoIs are known and only the
source states are uncertain.  With undetectable sources the state beliefs are
frozen at stationarity and the AoIs are tracked with a truncated belief.

A belief-side quantity is described per source by a :class:`Factor`, a
small discrete distribution over values (source states or AoIs).  A known
component is a factor with a single value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import ActionValues, argmin_lowest
from .model import STOCHASTIC_TOL, SourceSpec, SupportTooLargeError, SystemSpec, SystemState, check_action

ZERO_LIKELIHOOD = 1e-300
DEFAULT_QMDP_SAMPLES = 1024
MAX_EXACT_SUPPORT = 1_000_000
DEFAULT_AOI_BELIEF_Q = 1000


class ZeroLikelihoodError(ArithmeticError):
    """An observation has zero probability under the current belief."""


def _normalised(vectors: Sequence, name: str) -> tuple[np.ndarray, ...]:
    out = []
    for k, v in enumerate(vectors):
        v = np.array(v, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError(f"{name}[{k}] must be a nonempty vector")
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name}[{k}] is not a probability vector")
        v.setflags(write=False)
        out.append(v)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class StateBelief:
    """Per-source distributions over source states."""

    probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "probs", _normalised(self.probs, "probs"))

    @classmethod
    def stationary(cls, spec: SystemSpec) -> "StateBelief":
        return cls(tuple(src.stationary for src in spec.sources))

    @classmethod
    def point(cls, spec: SystemSpec, states: Sequence[int]) -> "StateBelief":
        return cls(tuple(np.eye(S)[s] for S, s in zip(spec.num_states, states)))

    def mode(self) -> tuple[int, ...]:
        return tuple(int(np.argmax(b)) for b in self.probs)


@dataclass(frozen=True, eq=False)
class AoIBelief:
    """Per-source distributions over AoI 1..Q; the last bin holds all AoIs >= Q."""

    probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        probs = _normalised(self.probs, "probs")
        if len({len(b) for b in probs}) != 1:
            raise ValueError("all AoI beliefs must share the same truncation")
        object.__setattr__(self, "probs", probs)

    @property
    def Q(self) -> int:
        return len(self.probs[0])

    @classmethod
    def point(cls, aoi: Sequence[int], Q: int) -> "AoIBelief":
        return cls(tuple(np.eye(Q)[min(d, Q) - 1] for d in aoi))

    def mode(self) -> tuple[int, ...]:
        return tuple(int(np.argmax(b)) + 1 for b in self.probs)

    def mean(self) -> np.ndarray:
        return np.array([np.arange(1, self.Q + 1) @ b for b in self.probs])


@dataclass(frozen=True)
class ObservationRecord:
    """What the scheduler learns at the end of a slot.

    ``revealed[k]`` is the true state of source k when it was observed and
    the sensors reveal it, else None.
    """

    action: int
    channel_ok: bool
    observed: tuple[bool, ...]
    revealed: tuple[int | None, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(bool(z) for z in self.observed))
        if not self.channel_ok and any(self.observed):
            raise ValueError("no source can be observed when the channel failed")


def update_state_belief(
    spec: SystemSpec, belief: StateBelief, obs: ObservationRecord, reveal: bool = False
) -> StateBelief:
    """Bayes correction on the observation, then one-step prediction."""
    a = check_action(spec, obs.action)
    q = spec.channel[a]
    out = []
    for k, (src, b) in enumerate(zip(spec.sources, belief.probs)):
        if len(b) != src.num_states:
            raise ValueError(f"belief for source {k} has {len(b)} states, expected {src.num_states}")
        if reveal and obs.observed[k]:
            if obs.revealed is None or obs.revealed[k] is None:
                raise ValueError(f"source {k} was observed but its state was not revealed")
            out.append(src.transition[obs.revealed[k]].copy())
            continue
        p = src.obs_prob[a]
        if not obs.channel_ok:
            like = np.full_like(p, 1.0 - q)
        elif obs.observed[k]:
            like = q * p
        else:
            like = q * (1.0 - p)
        post = like * b
        z = post.sum()
        if z < ZERO_LIKELIHOOD:
            raise ZeroLikelihoodError(f"observation of source {k} has zero likelihood")
        pred = (post / z) @ src.transition
        out.append(pred / pred.sum())
    return StateBelief(tuple(out))


def effective_obs_probs(spec: SystemSpec) -> np.ndarray:
    """Stationary-averaged observation probabilities, shape ``(N, K)``."""
    return np.stack([src.obs_prob @ src.stationary for src in spec.sources], axis=1)


def collapse_to_stationary(spec: SystemSpec) -> SystemSpec:
    """Single-state version of ``spec`` with stationary-averaged observation probabilities."""
    p_hat = effective_obs_probs(spec)
    sources = tuple(SourceSpec(np.ones((1, 1)), p_hat[:, [k]]) for k in range(spec.num_sources))
    return SystemSpec(spec.channel, sources)


def update_aoi_belief(
    spec: SystemSpec, belief: AoIBelief, action: int, p_hat: np.ndarray | None = None
) -> AoIBelief:
    """Shift-and-reset update with the reset probability q_a * p_hat[a, k]."""
    a = check_action(spec, action)
    if p_hat is None:
        p_hat = effective_obs_probs(spec)
    r = spec.channel[a] * np.asarray(p_hat)[a]
    out = []
    for b, rk in zip(belief.probs, r):
        nb = np.empty_like(b)
        nb[0] = rk
        nb[1:] = b[:-1] * (1.0 - rk)
        nb[-1] += b[-1] * (1.0 - rk)
        out.append(nb)
    return AoIBelief(tuple(out))


# -- belief-expected costs and policies ---------------------------------------


@dataclass(frozen=True)
class Factor:
    """Discrete distribution of one component (a state or an AoI) of one source."""

    values: np.ndarray
    probs: np.ndarray

    @classmethod
    def known(cls, value: int) -> "Factor":
        return cls(np.array([int(value)]), np.ones(1))

    def mean(self) -> float:
        return float(self.values @ self.probs)

    def mode(self) -> int:
        return int(self.values[np.argmax(self.probs)])

    def support(self) -> "Factor":
        nz = self.probs > 0
        return Factor(self.values[nz], self.probs[nz])


def belief_factors(
    spec: SystemSpec,
    states: StateBelief | Sequence[int],
    aoi: AoIBelief | Sequence[int],
) -> tuple[list[Factor], list[Factor]]:
    """Per-source factors for the source-state and AoI components."""
    K = spec.num_sources
    if isinstance(states, StateBelief):
        if len(states.probs) != K:
            raise ValueError(f"state belief covers {len(states.probs)} sources, spec has {K}")
        s_f = [Factor(np.arange(len(b)), b) for b in states.probs]
    else:
        if len(states) != K:
            raise ValueError(f"{len(states)} source states given, spec has {K}")
        s_f = [Factor.known(s) for s in states]
    if isinstance(aoi, AoIBelief):
        if len(aoi.probs) != K:
            raise ValueError(f"AoI belief covers {len(aoi.probs)} sources, spec has {K}")
        d_f = [Factor(np.arange(1, aoi.Q + 1), b) for b in aoi.probs]
    else:
        if len(aoi) != K:
            raise ValueError(f"{len(aoi)} AoIs given, spec has {K}")
        d_f = [Factor.known(d) for d in aoi]
    for k, (f, S) in enumerate(zip(s_f, spec.num_states)):
        if f.values.max() >= S:
            raise ValueError(f"state factor of source {k} exceeds {S} states")
    return s_f, d_f


def expected_costs(
    spec: SystemSpec, states: StateBelief | Sequence[int], aoi: AoIBelief | Sequence[int]
) -> np.ndarray:
    """Belief-expected one-step cost of every action, shape ``(N,)``.

    State and AoI factors are independent, so the expectation factorises.
    """
    s_f, d_f = belief_factors(spec, states, aoi)
    mean_d = np.array([f.mean() for f in d_f])
    p_bar = np.stack(
        [src.obs_prob[:, f.values] @ f.probs for src, f in zip(spec.sources, s_f)], axis=1
    )
    return mean_d.mean() + 1.0 - (spec.channel[:, None] * p_bar * mean_d).mean(axis=1)


def expected_cost(
    spec: SystemSpec,
    states: StateBelief | Sequence[int],
    aoi: AoIBelief | Sequence[int],
    action: int,
) -> float:
    return float(expected_costs(spec, states, aoi)[check_action(spec, action)])


def ml_state(
    spec: SystemSpec, states: StateBelief | Sequence[int], aoi: AoIBelief | Sequence[int]
) -> SystemState:
    """Componentwise most likely state; ties go to the lowest state or AoI."""
    s_f, d_f = belief_factors(spec, states, aoi)
    return SystemState(tuple(f.mode() for f in s_f), tuple(f.mode() for f in d_f))


def _state_objective(spec: SystemSpec, values: ActionValues | None, state: SystemState) -> np.ndarray:
    if values is None:
        return expected_costs(spec, state.source_states, state.aoi)
    return values.lookup(np.array([state.source_states]), np.array([state.aoi]))[0]


def ml_action(
    spec: SystemSpec,
    states: StateBelief | Sequence[int],
    aoi: AoIBelief | Sequence[int],
    values: ActionValues | None = None,
) -> int:
    """Act as if the most likely state were the true one.

    Without ``values`` this is the myopic variant.
    """
    return int(argmin_lowest(_state_objective(spec, values, ml_state(spec, states, aoi))))


def _exact_objective(
    spec: SystemSpec, values: ActionValues, s_f: list[Factor], d_f: list[Factor], max_support: int
) -> np.ndarray:
    space = values.space
    s_f = [f.support() for f in s_f]
    d_f = [f.support() for f in d_f]
    size = math.prod(len(f.values) for f in s_f + d_f)
    if size > max_support:
        raise SupportTooLargeError(f"belief support {size} exceeds cap {max_support}")
    V = values.values.reshape((spec.num_sensors,) + space.shape)
    # Clamp AoIs to the table's truncation, merging the mass that lands on Q.
    axes = [(f.values, f.probs) for f in s_f]
    for f in d_f:
        idx, inv = np.unique(np.minimum(f.values, space.Q) - 1, return_inverse=True)
        axes.append((idx, np.bincount(inv, weights=f.probs)))
    for idx, w in axes:
        # Each pass contracts away the leading non-action axis.
        V = np.tensordot(np.take(V, idx, axis=1), w, axes=([1], [0]))
    return V


def _sampled_objective(
    spec: SystemSpec,
    values: ActionValues | None,
    s_f: list[Factor],
    d_f: list[Factor],
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    states = np.stack([rng.choice(f.values, size=count, p=f.probs) for f in s_f], axis=1)
    aoi = np.stack([rng.choice(f.values, size=count, p=f.probs) for f in d_f], axis=1)
    if values is not None:
        return values.lookup(states, aoi).mean(axis=0)
    K = spec.num_sources
    obs = np.stack([src.obs_prob[:, states[:, k]] for k, src in enumerate(spec.sources)], axis=2)
    gain = (spec.channel[:, None, None] * obs * aoi[None]).sum(axis=2) / K
    return (aoi.mean(axis=1)[None] + 1.0 - gain).mean(axis=1)


def qmdp_objective(
    spec: SystemSpec,
    states: StateBelief | Sequence[int],
    aoi: AoIBelief | Sequence[int],
    values: ActionValues | None = None,
    mode: str = "exact",
    count: int = DEFAULT_QMDP_SAMPLES,
    rng: np.random.Generator | None = None,
    max_support: int = MAX_EXACT_SUPPORT,
) -> np.ndarray:
    """Belief-expected action values sum_L b(L) [C(L, a) + E[h(L') | L, a]], shape ``(N,)``.

    Without ``values`` only the cost is averaged (myopic variant), which is
    exact in closed form.  ``mode="sampled"`` averages over ``count`` draws
    from the belief; the same draws are shared by all actions.
    """
    s_f, d_f = belief_factors(spec, states, aoi)
    if mode == "exact":
        if values is None:
            return expected_costs(spec, states, aoi)
        return _exact_objective(spec, values, s_f, d_f, max_support)
    if mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        return _sampled_objective(spec, values, s_f, d_f, count, rng)
    raise ValueError(f"unknown mode {mode!r}")


def qmdp_action(
    spec: SystemSpec,
    states: StateBelief | Sequence[int],
    aoi: AoIBelief | Sequence[int],
    values: ActionValues | None = None,
    mode: str = "exact",
    count: int = DEFAULT_QMDP_SAMPLES,
    rng: np.random.Generator | None = None,
    max_support: int = MAX_EXACT_SUPPORT,
) -> int:
    obj = qmdp_objective(spec, states, aoi, values, mode, count, rng, max_support)
    return int(argmin_lowest(obj))


# -- batched updates used by the simulator ------------------------------------


def batch_update_state_beliefs(
    spec: SystemSpec,
    beliefs: np.ndarray,
    actions: np.ndarray,
    channel_ok: np.ndarray,
    observed: np.ndarray,
    revealed: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorised :func:`update_state_belief` over a batch.

    ``beliefs`` has shape ``(B, K, S_max)`` with zero padding; ``observed``
    is ``(B, K)``.  When ``revealed`` (``(B, K)`` true states) is given,
    observed sources restart from the transition row of their true state.
    """
    arr = spec.arrays
    q = arr.channel[actions][:, None, None]
    p = arr.obs[actions]
    like = np.where(observed[..., None], q * p, q * (1.0 - p))
    like = np.where(channel_ok[:, None, None], like, 1.0 - q)
    post = like * beliefs
    z = post.sum(axis=2, keepdims=True)
    if np.any(z < ZERO_LIKELIHOOD):
        raise ZeroLikelihoodError("an observation has zero likelihood under the belief")
    post /= z
    pred = np.matmul(post.transpose(1, 0, 2), arr.trans).transpose(1, 0, 2)
    if revealed is not None:
        K = beliefs.shape[1]
        rows = arr.trans[np.arange(K)[None, :], revealed]
        pred = np.where(observed[..., None], rows, pred)
    pred /= pred.sum(axis=2, keepdims=True)
    # Padded states carry no mass.
    pred[:, ~state_mask(spec)] = 0.0
    return pred


def state_mask(spec: SystemSpec) -> np.ndarray:
    """``(K, S_max)`` mask of real (unpadded) states."""
    return np.arange(max(spec.num_states))[None, :] < np.array(spec.num_states)[:, None]


def batch_update_aoi_beliefs(beliefs: np.ndarray, reset_prob: np.ndarray) -> np.ndarray:
    """Vectorised :func:`update_aoi_belief`; ``beliefs`` is ``(B, K, Q)``, ``reset_prob`` ``(B, K)``."""
    r = reset_prob[..., None]
    out = np.empty_like(beliefs)
    out[..., 0] = reset_prob
    out[..., 1:] = beliefs[..., :-1] * (1.0 - r)
    out[..., -1] += beliefs[..., -1] * (1.0 - reset_prob)
    return out
