"""Long-run average AoI of the uniform random scheduling policy.

The closed form treats each source's (state, AoI) pair as a Markov chain
whose state part is modulated by the mean per-state observation
probability.  :func:`truncated_chain_aoi` builds the truncated joint chain
explicitly and solves it, which serves as an independent check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import SystemSpec

DEFAULT_ORACLE_Q = 10_000
MAX_CHAIN_SIZE = 2_000_000


class NonObservableSourceError(ArithmeticError):
    """The failure matrix of a source does not decay, so its AoI is unbounded."""


@dataclass(frozen=True)
class SourceAoIMatrices:
    p: np.ndarray
    r_succ: np.ndarray
    r_fail: np.ndarray


def success_fail_matrices(spec: SystemSpec, k: int) -> SourceAoIMatrices:
    src = spec.sources[k]
    p = (spec.channel[:, None] * src.obs_prob).mean(axis=0)
    R = src.transition
    return SourceAoIMatrices(p, p[:, None] * R, (1.0 - p)[:, None] * R)


def decay_certificate(r_fail: np.ndarray, max_power: int = 64, tol: float = 1e-12) -> int | None:
    """Smallest m <= max_power with ||r_fail^m||_inf < 1 - tol, or None.

    Such an m bounds the spectral radius of ``r_fail`` strictly below one.
    """
    M = np.eye(r_fail.shape[0])
    for m in range(1, max_power + 1):
        M = M @ r_fail
        if np.abs(M).sum(axis=1).max() < 1.0 - tol:
            return m
    return None


def source_random_aoi(spec: SystemSpec, k: int) -> float:
    mats = success_fail_matrices(spec, k)
    if decay_certificate(mats.r_fail) is None:
        raise NonObservableSourceError(f"source {k} is not observable under the random policy")
    A = np.eye(mats.r_fail.shape[0]) - mats.r_fail
    ones = np.ones(A.shape[0])
    x = np.linalg.solve(A, ones)
    y = np.linalg.solve(A, x)
    beta = spec.sources[k].stationary
    return float(beta @ mats.r_succ @ y)


def random_policy_aoi(spec: SystemSpec) -> tuple[np.ndarray, float]:
    """Per-source and overall expected AoI of the uniform random policy."""
    per_source = np.array([source_random_aoi(spec, k) for k in range(spec.num_sources)])
    return per_source, float(per_source.mean())


def random_policy_aoi_stateless(spec: SystemSpec) -> float:
    """Closed form for single-state sources: (N/K) * sum_k 1 / sum_n q_n p_nk."""
    if any(s != 1 for s in spec.num_states):
        raise ValueError("all sources must have a single state")
    rates = np.array([spec.channel @ src.obs_prob[:, 0] for src in spec.sources])
    if np.any(rates <= 0):
        raise NonObservableSourceError("a source is never observed")
    return float(spec.num_sensors / spec.num_sources * np.sum(1.0 / rates))


def truncated_chain_matrix(spec: SystemSpec, k: int, Q: int) -> sp.csr_matrix:
    """The (S*Q) x (S*Q) joint (AoI, state) transition matrix, AoI-major blocks."""
    if Q < 2:
        raise ValueError("Q must be at least 2")
    mats = success_fail_matrices(spec, k)
    S = mats.r_succ.shape[0]
    if S * Q > MAX_CHAIN_SIZE:
        raise ValueError(f"matrix too large: {S * Q} rows exceed cap {MAX_CHAIN_SIZE}")
    # Every block row resets into block column 0; failures shift up, saturating at Q.
    succ_col = sp.kron(sp.csr_matrix(np.ones((Q, 1))), sp.csr_matrix(mats.r_succ))
    succ = sp.hstack([succ_col, sp.csr_matrix((S * Q, S * (Q - 1)))])
    shift = sp.diags(np.ones(Q - 1), 1, shape=(Q, Q), format="lil")
    shift[Q - 1, Q - 1] = 1.0
    fail = sp.kron(shift.tocsr(), sp.csr_matrix(mats.r_fail))
    return (succ + fail).tocsr()


def truncated_stationary(spec: SystemSpec, k: int, Q: int) -> np.ndarray:
    """Stationary vector of the truncated chain, shape (Q, S)."""
    psi = truncated_chain_matrix(spec, k, Q)
    n = psi.shape[0]
    S = n // Q
    # Put the dense reset block last so LU fill stays linear in Q, and let
    # the normalisation replace the final (redundant) balance equation.
    perm = np.r_[np.arange(S, n), np.arange(S)]
    A = (sp.identity(n, format="csr") - psi.T).tocsr()[perm][:, perm].tolil()
    A[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[-1] = 1.0
    x = spla.splu(A.tocsc(), permc_spec="NATURAL").solve(b)
    phi = np.empty(n)
    phi[perm] = x
    return phi.reshape(Q, S)


def truncated_chain_aoi(spec: SystemSpec, k: int, Q: int = DEFAULT_ORACLE_Q) -> float:
    phi = truncated_stationary(spec, k, Q)
    return float(np.arange(1, Q + 1) @ phi.sum(axis=1))


def closed_form_blocks(spec: SystemSpec, k: int, Q: int) -> np.ndarray:
    """beta R_succ R_fail^(q-1) for q = 1..Q, shape (Q, S)."""
    mats = success_fail_matrices(spec, k)
    block = spec.sources[k].stationary @ mats.r_succ
    out = np.empty((Q, block.shape[0]))
    for q in range(Q):
        out[q] = block
        block = block @ mats.r_fail
    return out
