"""Exact and sampled discounted state occupancy for tabular processes.

Convention: the geometric sum starts at the state reached one step after
(s, a), so gamma = 0 gives the one-step transition distribution.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .env import TabularProcess, UnsupportedOperation


@dataclass(frozen=True)
class OccupancyTable:
    gamma: float
    values: np.ndarray  # [state, action, future_state]

    def to_csv(self, path) -> None:
        S, A, _ = self.values.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "action", "future_state", "probability"])
            for s in range(S):
                for a in range(A):
                    for sf in range(S):
                        w.writerow([s, a, sf, repr(float(self.values[s, a, sf]))])


@dataclass(frozen=True)
class MarginalTable:
    probs: np.ndarray


def _require_tabular(process):
    if not isinstance(process, TabularProcess):
        raise UnsupportedOperation(f"{getattr(process, 'name', process)!r} is not tabular")


def _check_policy(process, policy):
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (process.n_states, process.n_actions):
        raise ValueError(f"policy must have shape {(process.n_states, process.n_actions)}, got {pi.shape}")
    if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("policy rows must sum to 1")
    return pi


def uniform_policy(process) -> np.ndarray:
    return np.full((process.n_states, process.n_actions), 1.0 / process.n_actions)


def state_transition_matrix(process, policy) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) P[s, a, s']."""
    return np.einsum("sa,sat->st", policy, process.P)


def dp_occupancy(process, policy, gamma: float) -> OccupancyTable:
    _require_tabular(process)
    pi = _check_policy(process, policy)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    P_pi = state_transition_matrix(process, pi)
    n = process.n_states
    resolvent = np.linalg.solve(np.eye(n) - gamma * P_pi, np.eye(n))
    values = (1.0 - gamma) * np.einsum("sat,tu->sau", process.P, resolvent)
    return OccupancyTable(gamma, values)


def mc_occupancy(process, policy, gamma: float, num_samples: int, seed=0) -> OccupancyTable:
    """Estimate occupancy by drawing k ~ Geometric(1 - gamma) on {1, 2, ...}
    and recording the state after k steps."""
    _require_tabular(process)
    pi = _check_policy(process, policy)
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    S, A = process.n_states, process.n_actions
    pi_cdf = np.cumsum(pi, axis=1)
    values = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            k = sample_geometric(rng, gamma, num_samples)
            cur = process.step_many(np.full(num_samples, s), np.full(num_samples, a), rng)
            remaining = k - 1
            active = remaining > 0
            while np.any(active):
                idx = np.nonzero(active)[0]
                st = cur[idx]
                acts = np.minimum((pi_cdf[st] <= rng.random(len(idx))[:, None]).sum(axis=1), A - 1)
                cur[idx] = process.step_many(st, acts, rng)
                remaining[idx] -= 1
                active = remaining > 0
            values[s, a] = np.bincount(cur, minlength=S) / num_samples
    return OccupancyTable(gamma, values)


def sample_geometric(rng, gamma: float, size) -> np.ndarray:
    """k ~ Geometric(1 - gamma) with support {1, 2, ...}."""
    if gamma == 0.0:
        return np.ones(size, dtype=np.int64)
    return rng.geometric(1.0 - gamma, size).astype(np.int64)


def marginal(table: OccupancyTable, state_action_probs) -> MarginalTable:
    """p(s_f) = sum_{s,a} d(s,a) p(s_f | s, a)."""
    d = np.asarray(state_action_probs, dtype=np.float64)
    return MarginalTable(np.einsum("sa,sau->u", d, table.values))


def occupancy_ratio(table: OccupancyTable, marg: MarginalTable) -> np.ndarray:
    """p(s_f | s, a) / p(s_f); inf where the marginal is zero and the numerator is not."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return table.values / marg.probs[None, None, :]


def optimal_logits(table: OccupancyTable, marg: MarginalTable) -> np.ndarray:
    """Bayes-optimal NCE-Binary logits ln(p(s_f|s,a) / p(s_f))."""
    with np.errstate(divide="ignore"):
        return np.log(occupancy_ratio(table, marg))


def critic_to_occupancy_ratio(logit):
    """sigma(f) / (1 - sigma(f)), which equals exp(f)."""
    return np.exp(np.asarray(logit, dtype=np.float64))
