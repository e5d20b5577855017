"""Persistent world-model engine for long-horizon workcell planning.

The package is organized bottom-up: geometric value types, frame lifting,
association and fusion, robust registration, the persistent store, atomic
skill transactions, the reasoner seam with trace validation, the executive
loop with discrepancy diagnosis, a deterministic simulator, and the
scenario harness.
"""

from .errors import WorkcellError
from .geometry import GaussianEnvelope, OrientedBox, PointCloudData, PoseSE3
from .world_model import WorldStore

__all__ = [
    "WorkcellError",
    "GaussianEnvelope",
    "OrientedBox",
    "PointCloudData",
    "PoseSE3",
    "WorldStore",
]

__version__ = "0.1.0"
