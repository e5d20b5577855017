"""Observation-to-memory matching and belief updates.

Gating by Mahalanobis distance, hybrid geometric-semantic cost, exact
one-to-one assignment, a confirmation window for new tracks, and
reliability-modulated information-filter fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import GaussianEnvelope, mahalanobis_between, spd_inverse

# Sentinel for gated (infeasible) pairs.
GATED = np.inf
# Finite stand-in used when feeding the assignment solver.
_BIG_COST = 1e9

# Per-cycle process noise applied to unobserved objects (m^2 per axis).
DRIFT_PER_CYCLE = 0.001


@dataclass
class AssociationConfig:
    lambda_iou: float = 0.7
    lambda_sem: float = 0.3
    tau_geo: float = 3.5
    tau_match: float = 0.55
    n_confirm: int = 2

    def __post_init__(self):
        if abs(self.lambda_iou + self.lambda_sem - 1.0) > 1e-12:
            raise ValueError("lambda_iou + lambda_sem must equal 1")
        if self.tau_geo <= 0 or self.tau_match <= 0 or self.n_confirm <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class MatchResult:
    matched: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_observations: list[int] = field(default_factory=list)
    unmatched_memory: list[int] = field(default_factory=list)

    def __post_init__(self):
        obs = [m[0] for m in self.matched]
        mem = [m[1] for m in self.matched]
        if len(set(obs)) != len(obs) or len(set(mem)) != len(mem):
            raise ValueError("matched pairs must be one-to-one")


@dataclass
class TentativeTrack:
    observation: object
    count: int = 0
    created_at: int = 0


class TrackFate(Enum):
    TENTATIVE = "tentative"
    PROMOTED = "promoted"
    DISCARDED = "discarded"


class ReliabilityJudgment(Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"
    BAD = "Bad"


_GAMMA_TABLE = {
    ReliabilityJudgment.HIGH: 1.0,
    ReliabilityJudgment.MEDIUM: 0.5,
    ReliabilityJudgment.LOW: 0.1,
    ReliabilityJudgment.BAD: 0.01,
}


def gamma_of(alpha: ReliabilityJudgment) -> float:
    """Fusion weight for a discrete reliability judgment."""
    return _GAMMA_TABLE[alpha]


def hybrid_cost(iou: float, sim: float, cfg: AssociationConfig) -> float:
    """Weighted complement of geometric overlap and semantic similarity."""
    if not (0.0 <= iou <= 1.0 and 0.0 <= sim <= 1.0):
        raise ValueError("iou and sim must lie in [0, 1]")
    return cfg.lambda_iou * (1.0 - iou) + cfg.lambda_sem * (1.0 - sim)


def build_cost_matrix(
    observations: list,
    memory: list,
    cfg: AssociationConfig,
    iou_fn,
    sim_fn,
) -> np.ndarray:
    """(n_obs, n_mem) hybrid costs with GATED entries for infeasible pairs.

    iou_fn / sim_fn take (observation index, memory index) and return a
    scalar in [0, 1]; they are only consulted for pairs inside the gate.
    """
    cost = np.full((len(observations), len(memory)), GATED)
    for k, obs in enumerate(observations):
        for i, mem in enumerate(memory):
            if mahalanobis_between(obs.envelope, mem.envelope) >= cfg.tau_geo:
                continue
            cost[k, i] = hybrid_cost(iou_fn(k, i), sim_fn(k, i), cfg)
    return cost


def assign(cost: np.ndarray, tau_match: float) -> MatchResult:
    """Exact minimum-cost one-to-one assignment over finite entries.

    Pairs exceeding tau_match are demoted to unmatched after solving.
    """
    cost = np.asarray(cost, dtype=float)
    n_obs, n_mem = cost.shape
    if n_obs == 0 or n_mem == 0:
        return MatchResult(
            matched=[],
            unmatched_observations=list(range(n_obs)),
            unmatched_memory=list(range(n_mem)),
        )
    solver_cost = np.where(np.isfinite(cost), cost, _BIG_COST)
    rows, cols = linear_sum_assignment(solver_cost)
    matched = []
    for r, c in zip(rows, cols):
        if not np.isfinite(cost[r, c]):
            continue
        if cost[r, c] > tau_match:
            continue
        matched.append((int(r), int(c), float(cost[r, c])))
    used_obs = {m[0] for m in matched}
    used_mem = {m[1] for m in matched}
    return MatchResult(
        matched=matched,
        unmatched_observations=[k for k in range(n_obs) if k not in used_obs],
        unmatched_memory=[i for i in range(n_mem) if i not in used_mem],
    )


def confirm_or_promote(
    track: TentativeTrack, sighted: bool, cfg: AssociationConfig
) -> TrackFate:
    """Advance a tentative track by one sighting opportunity."""
    if not sighted:
        return TrackFate.DISCARDED
    track.count += 1
    if track.count >= cfg.n_confirm:
        return TrackFate.PROMOTED
    return TrackFate.TENTATIVE


def fuse(
    prior: GaussianEnvelope, obs: GaussianEnvelope, gamma: float
) -> GaussianEnvelope:
    """Information-filter fusion with the observation scaled by gamma."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0.0:
        return prior
    prior_info = spd_inverse(prior.covariance)
    obs_info = spd_inverse(obs.covariance)
    info = prior_info + gamma * obs_info
    cov = spd_inverse(info)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prior_info @ prior.mean + gamma * (obs_info @ obs.mean))
    return GaussianEnvelope(mean, cov)


def inflate_drift(env: GaussianEnvelope, cycles: int) -> GaussianEnvelope:
    """Add per-cycle positional process noise for unobserved objects."""
    if cycles < 0:
        raise ValueError("cycles must be non-negative")
    if cycles == 0:
        return env
    cov = env.covariance + cycles * DRIFT_PER_CYCLE * np.eye(3)
    return GaussianEnvelope(env.mean, cov)
