"""Core geometric and probabilistic value types.

Everything here is a pure value or a pure function; no shared state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from .errors import InsufficientDataError, NumericError

# Regularizer added to sample covariances so envelopes stay SPD.
COV_EPSILON = 1e-6
# Minimum eigenvalue an envelope covariance may carry.
MIN_EIGENVALUE = 1e-9

_ROT_TOL = 1e-9


def as_point3(p) -> np.ndarray:
    """Coerce to a finite 3-vector of floats."""
    a = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"point has non-finite components: {a}")
    return a


def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(3, 3)
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-8):
        raise ValueError("rotation matrix is not orthonormal")
    if not abs(np.linalg.det(r) - 1.0) < 1e-6:
        raise ValueError("rotation matrix determinant is not +1")
    return r


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: x_out = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(self, "translation", as_point3(self.translation))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = pts @ self.rotation.T + self.translation
        return out[0] if np.asarray(points).ndim == 1 else out

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self * other)(x) = self(other(x))."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)


@dataclass(frozen=True)
class GaussianEnvelope:
    """Positional belief (mean, covariance) acting as a spatial index."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", as_point3(self.mean))
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals.min() < MIN_EIGENVALUE * (1 - 1e-9):
            raise ValueError(
                f"covariance smallest eigenvalue {eigvals.min():.3e} below floor"
            )
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class OrientedBox:
    """Box with center, positive half-extents, and an orientation."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", as_point3(self.center))
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(he > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the box (boundary inclusive)."""
        local = (np.atleast_2d(points) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents + 1e-12, axis=1)

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=float,
        )
        return (signs * self.half_extents) @ self.rotation.T + self.center

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)


@dataclass
class PointCloudData:
    """Ordered point set with optional per-point semantic labels."""

    points: np.ndarray
    labels: list[str] | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.labels is not None and len(self.labels) != len(self.points):
            raise ValueError("label count must match point count")

    def __len__(self) -> int:
        return len(self.points)


def cholesky_solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve matrix @ x = rhs for SPD matrix, raising NumericError on failure."""
    try:
        factor = linalg.cho_factor(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericError(f"matrix is not positive definite: {exc}") from exc
    return linalg.cho_solve(factor, rhs, check_finite=False)


def spd_inverse(matrix: np.ndarray) -> np.ndarray:
    return cholesky_solve(matrix, np.eye(len(matrix)))


def mahalanobis_between(a: GaussianEnvelope, b: GaussianEnvelope) -> float:
    """Gating distance between two envelopes under the summed covariance."""
    diff = a.mean - b.mean
    d2 = float(diff @ cholesky_solve(a.covariance + b.covariance, diff))
    return float(np.sqrt(max(d2, 0.0)))


def envelope_from_points(pc: PointCloudData) -> GaussianEnvelope:
    """Fit an envelope: centroid plus regularized sample covariance."""
    if len(pc) < 2:
        raise InsufficientDataError(
            f"envelope fit needs at least 2 points, got {len(pc)}"
        )
    mean = pc.points.mean(axis=0)
    centered = pc.points - mean
    cov = (centered.T @ centered) / (len(pc) - 1) + COV_EPSILON * np.eye(3)
    return GaussianEnvelope(mean, cov)


_IOU_SAMPLES = 10_000
_IOU_SEED = 20240

def _mc_intersection(a: OrientedBox, b: OrientedBox) -> float:
    """Fixed-seed Monte-Carlo estimate of the intersection volume."""
    rng = np.random.default_rng(_IOU_SEED)
    inter = 0.0
    for box, other in ((a, b), (b, a)):
        u = rng.uniform(-1.0, 1.0, size=(_IOU_SAMPLES, 3)) * box.half_extents
        pts = u @ box.rotation.T + box.center
        inter += box.volume * other.contains(pts).mean()
    return inter / 2.0


def _axis_aligned_intersection(a: OrientedBox, b: OrientedBox) -> float:
    """Exact intersection for boxes sharing one orientation."""
    r = a.rotation
    ca = r.T @ a.center
    cb = r.T @ b.center
    lo = np.maximum(ca - a.half_extents, cb - b.half_extents)
    hi = np.minimum(ca + a.half_extents, cb + b.half_extents)
    ext = np.clip(hi - lo, 0.0, None)
    return float(np.prod(ext))


def box_iou(
    a: OrientedBox,
    b: OrientedBox,
    fallback_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Volume IoU of two oriented boxes; 2D mask-area IoU when requested.

    Boxes sharing an orientation use the closed form; the general case
    falls back to a fixed-seed sampling estimate.
    """
    if fallback_masks is not None:
        ma = np.asarray(fallback_masks[0], dtype=bool)
        mb = np.asarray(fallback_masks[1], dtype=bool)
        union = np.logical_or(ma, mb).sum()
        if union == 0:
            return 0.0
        return float(np.logical_and(ma, mb).sum() / union)

    # Cheap separation check on world-frame AABBs.
    alo, ahi = a.aabb()
    blo, bhi = b.aabb()
    if np.any(ahi < blo) or np.any(bhi < alo):
        return 0.0

    if np.allclose(a.rotation, b.rotation, atol=1e-12):
        inter = _axis_aligned_intersection(a, b)
    else:
        inter = _mc_intersection(a, b)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def chi_square_threshold(dof: int, confidence: float) -> float:
    """Upper chi-square quantile used by statistical relation tests."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return float(chi2.ppf(confidence, df=dof))
