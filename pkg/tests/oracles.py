"""Independently derived reference implementations used to pin behavior.

These are deliberately naive (exhaustive enumeration, closed forms) so a
disagreement with the package points at the package.
"""

from __future__ import annotations

import itertools

import numpy as np

# The assignment convention under test: the solver sees gated pairs as a
# large finite sentinel, always produces a full min(n, m) assignment, and
# sentinel pairs are dropped from the reported matching afterwards. The
# effective objective is therefore: maximize the number of feasible pairs,
# then minimize their summed cost.
_SENTINEL = 1e9


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimum summed cost of the kept (finite) pairs under the convention
    above, by exhaustive enumeration. Feasible only up to ~6x6."""
    cost = np.asarray(cost, dtype=float)
    n_obs, n_mem = cost.shape
    if n_obs == 0 or n_mem == 0:
        return 0.0
    k = min(n_obs, n_mem)
    best_total = np.inf
    for r_sub in itertools.combinations(range(n_obs), k):
        for c_perm in itertools.permutations(range(n_mem), k):
            total = 0.0
            for r, c in zip(r_sub, c_perm):
                total += cost[r, c] if np.isfinite(cost[r, c]) else _SENTINEL
            best_total = min(best_total, total)
    # Strip the sentinel contribution of the gated pairs in the optimum.
    n_gated = int(round(best_total / _SENTINEL))
    return best_total - n_gated * _SENTINEL


def padded_permutation_cost(cost: np.ndarray) -> float:
    """Same quantity as brute_force_assignment_cost, computed by padding to
    a square matrix (dummy rows/cols cost 0) and vectorizing over all
    permutations. Fast enough for thousands of matrices up to 6x6."""
    cost = np.asarray(cost, dtype=float)
    n_obs, n_mem = cost.shape
    if n_obs == 0 or n_mem == 0:
        return 0.0
    n = max(n_obs, n_mem)
    finite = np.zeros((n, n))
    finite[:n_obs, :n_mem] = np.where(np.isfinite(cost), cost, 0.0)
    gated = np.zeros((n, n), dtype=bool)
    gated[:n_obs, :n_mem] = ~np.isfinite(cost)
    perms = np.array(list(itertools.permutations(range(n))))
    rows = np.arange(n)
    real_sums = finite[rows, perms].sum(axis=1)
    gate_counts = gated[rows, perms].sum(axis=1)
    # Lexicographic objective: fewest gated pairs first, then summed cost —
    # computed exactly, with no sentinel round-off.
    feasible = gate_counts == gate_counts.min()
    return float(real_sums[feasible].min())


def information_fusion(prior_mean, prior_cov, obs_mean, obs_cov, gamma):
    """Closed-form information-filter fusion written independently."""
    prior_info = np.linalg.inv(prior_cov)
    obs_info = np.linalg.inv(obs_cov)
    cov = np.linalg.inv(prior_info + gamma * obs_info)
    mean = cov @ (prior_info @ np.asarray(prior_mean, float)
                  + gamma * obs_info @ np.asarray(obs_mean, float))
    return mean, cov
