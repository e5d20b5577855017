"""Persistent world store: occupancy background, object registry,
semantic graph with grounding links, relation verification, and
lifecycle curation.

All mutation goes through the transaction layer or the perception
pipeline; readers see a consistent snapshot.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .association import (
    AssociationConfig,
    MatchResult,
    TentativeTrack,
    TrackFate,
    confirm_or_promote,
    fuse,
    inflate_drift,
)
from .errors import IntegrityError, WorkcellError
from .geometry import (
    GaussianEnvelope,
    OrientedBox,
    PointCloudData,
    PoseSE3,
    cholesky_solve,
    mahalanobis_between,
)
from .perception import BillboardGeom, GeomAbstraction, Observation, PointsGeom, VoxelsGeom
from .serialization import canonical_dumps, sha256_of

# Occupancy log-odds increments and clamp bounds.
L_OCC = 0.85
L_FREE = -0.4
L_MIN = -2.0
L_MAX = 3.5

# Relation verification tolerances.
CHI2_THRESH_3DOF = 7.815
EPS_CONTACT = 0.01
DELTA_SUPP = 0.005
D_NEAR = 0.3
ALIGN_POS_TOL = 0.005
ALIGN_ANG_TOL_DEG = 2.0

# Lifecycle curation parameters.
LAMBDA_DECAY = 0.95
TAU_UNCERTAIN = 0.6
TAU_ARCHIVE = 0.1

STORE_SCHEMA_VERSION = 1


class Lifecycle(Enum):
    ACTIVE = "Active"
    UNCERTAIN = "Uncertain"
    ARCHIVED = "Archived"


class EdgeStatus(Enum):
    HYPOTHESIS = "Hypothesis"
    VERIFIED = "Verified"
    REFUTED = "Refuted"


@dataclass
class OccupancyMeasurement:
    index: tuple[int, int, int]
    hit: bool
    class_likelihood: dict[str, float] | None = None


@dataclass
class BackgroundMap:
    cell_size: float = 0.05
    # index -> [log_odds, {class: probability}]
    voxels: dict[tuple[int, int, int], list] = field(default_factory=dict)
    bounds: tuple[tuple[int, int, int], tuple[int, int, int]] | None = None
    l_min: float = L_MIN
    l_max: float = L_MAX

    def in_bounds(self, index: tuple[int, int, int]) -> bool:
        if self.bounds is None:
            return True
        lo, hi = self.bounds
        return all(lo[i] <= index[i] <= hi[i] for i in range(3))


def update_occupancy(
    bg: BackgroundMap, measurements: list[OccupancyMeasurement]
) -> BackgroundMap:
    """Additive log-odds update with clamping, plus recursive Bayes on classes."""
    for m in measurements:
        idx = tuple(int(v) for v in m.index)
        if not bg.in_bounds(idx):
            raise IntegrityError(f"voxel index {idx} out of bounds")
        log_odds, classes = bg.voxels.get(idx, [0.0, {}])
        log_odds = min(max(log_odds + (L_OCC if m.hit else L_FREE), bg.l_min), bg.l_max)
        if m.class_likelihood:
            if not classes:
                classes = {c: 1.0 / len(m.class_likelihood) for c in m.class_likelihood}
            post = {}
            for c in set(classes) | set(m.class_likelihood):
                post[c] = m.class_likelihood.get(c, 0.0) * classes.get(c, 0.0)
            norm = sum(post.values())
            if norm > 0:
                classes = {c: p / norm for c, p in post.items()}
        bg.voxels[idx] = [log_odds, classes]
    return bg


@dataclass
class Billboard:
    image_ref: str
    view_vector: np.ndarray
    centroid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.view_vector, dtype=float).reshape(3)
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("billboard view vector must be unit norm")
        self.view_vector = v
        self.centroid = np.asarray(self.centroid, dtype=float).reshape(3)


def billboard_retrieve(boards: list[Billboard], query: np.ndarray) -> Billboard | None:
    """Board whose view vector best matches the query direction."""
    q = np.asarray(query, dtype=float).reshape(3)
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise ValueError("query vector must be unit norm")
    if not boards:
        return None
    return max(boards, key=lambda b: float(q @ b.view_vector))


@dataclass
class ZoneNode:
    zone_id: str
    name: str
    reachable: list[str] = field(default_factory=list)
    extent: OrientedBox | None = None


@dataclass
class ShapePrior:
    prior_id: str
    canonical_cloud: PointCloudData
    functional_frame: PoseSE3 = field(default_factory=PoseSE3.identity)
    grasp_annotations: list[dict] = field(default_factory=list)


@dataclass
class ObjectRecord:
    record_id: str
    envelope: GaussianEnvelope
    geometry: GeomAbstraction | None = None
    shape_prior: str | None = None
    pose: PoseSE3 | None = None
    attached_to: str = "world"  # "world" or "gripper"

    def __post_init__(self):
        if self.pose is not None and self.shape_prior is None:
            raise IntegrityError("a posed record must reference a shape prior")


@dataclass
class ObjectVertex:
    uid: str
    label: str
    state_tag: str = ""
    attributes: dict[str, str] = field(default_factory=dict)
    grounding: str = ""  # ObjectRecord id
    lifecycle: Lifecycle = Lifecycle.ACTIVE
    confidence: float = 1.0
    zone_id: str = ""


@dataclass
class RelationEdge:
    predicate: str
    subject: str
    obj: str
    status: EdgeStatus = EdgeStatus.HYPOTHESIS

    def key(self) -> tuple[str, str, str]:
        return (self.predicate, self.subject, self.obj)


ROBOT_UID = "robot"


class WorldStore:
    """The persistent store: single-writer, consistent snapshots."""

    def __init__(self):
        self.zones: dict[str, ZoneNode] = {}
        self.records: dict[str, ObjectRecord] = {}
        self.vertices: dict[str, ObjectVertex] = {}
        self.edges: list[RelationEdge] = []
        self.billboards: list[Billboard] = []
        self.priors: dict[str, ShapePrior] = {}
        self.background = BackgroundMap()
        self.tentative: dict[int, TentativeTrack] = {}
        self._uid_counters: dict[str, int] = {}
        self._zone_index: dict[str, set[str]] = {}
        self.robot_zone: str = ""
        self._init_robot()

    def _init_robot(self):
        env = GaussianEnvelope(np.zeros(3), 1e-6 * np.eye(3))
        self.records[ROBOT_UID] = ObjectRecord(record_id=ROBOT_UID, envelope=env)
        self.vertices[ROBOT_UID] = ObjectVertex(
            uid=ROBOT_UID, label="robot", grounding=ROBOT_UID
        )

    # -- uid and indexing --------------------------------------------------

    def next_uid(self, label: str) -> str:
        n = self._uid_counters.get(label, 0) + 1
        self._uid_counters[label] = n
        return f"{label}_{n}"

    def _index_add(self, uid: str, zone_id: str):
        if zone_id:
            self._zone_index.setdefault(zone_id, set()).add(uid)

    def _index_remove(self, uid: str, zone_id: str):
        if zone_id and zone_id in self._zone_index:
            self._zone_index[zone_id].discard(uid)

    # -- graph mutation ----------------------------------------------------

    def add_zone(self, zone: ZoneNode):
        self.zones[zone.zone_id] = zone

    def add_entity(
        self,
        label: str,
        envelope: GaussianEnvelope,
        zone_id: str,
        geometry: GeomAbstraction | None = None,
        attributes: dict[str, str] | None = None,
        shape_prior: str | None = None,
        pose: PoseSE3 | None = None,
        uid: str | None = None,
    ) -> str:
        uid = uid or self.next_uid(label)
        if uid in self.vertices:
            raise IntegrityError(f"uid {uid} already exists")
        self.records[uid] = ObjectRecord(
            record_id=uid,
            envelope=envelope,
            geometry=geometry,
            shape_prior=shape_prior,
            pose=pose,
        )
        self.vertices[uid] = ObjectVertex(
            uid=uid,
            label=label,
            attributes=dict(attributes or {}),
            grounding=uid,
            zone_id=zone_id,
        )
        self._index_add(uid, zone_id)
        self.check_integrity()
        return uid

    def add_edge(
        self, predicate: str, subject: str, obj: str,
        status: EdgeStatus = EdgeStatus.HYPOTHESIS,
    ) -> RelationEdge:
        for endpoint in (subject, obj):
            if endpoint not in self.vertices and endpoint not in self.zones:
                raise IntegrityError(f"edge endpoint {endpoint} does not exist")
        edge = RelationEdge(predicate, subject, obj, status)
        self.edges.append(edge)
        return edge

    def remove_edges(self, predicate: str | None = None,
                     subject: str | None = None, obj: str | None = None) -> list[RelationEdge]:
        removed = [
            e for e in self.edges
            if (predicate is None or e.predicate == predicate)
            and (subject is None or e.subject == subject)
            and (obj is None or e.obj == obj)
        ]
        self.edges = [e for e in self.edges if e not in removed]
        return removed

    def find_edges(self, predicate: str | None = None,
                   subject: str | None = None, obj: str | None = None) -> list[RelationEdge]:
        return [
            e for e in self.edges
            if (predicate is None or e.predicate == predicate)
            and (subject is None or e.subject == subject)
            and (obj is None or e.obj == obj)
        ]

    def check_integrity(self):
        for uid, v in self.vertices.items():
            if v.lifecycle in (Lifecycle.ACTIVE, Lifecycle.UNCERTAIN):
                if v.grounding not in self.records:
                    raise IntegrityError(f"vertex {uid} grounding link dangling")

    # -- queries -----------------------------------------------------------

    def entities_in_zone(self, zone_id: str) -> list[ObjectVertex]:
        """Non-archived vertices in a zone; candidate set is the zone index."""
        if zone_id not in self.zones:
            raise WorkcellError(f"unknown zone {zone_id}")
        candidates = self._zone_index.get(zone_id, set())
        out = [
            self.vertices[uid]
            for uid in sorted(candidates)
            if self.vertices[uid].lifecycle != Lifecycle.ARCHIVED
        ]
        return out

    def zone_candidate_count(self, zone_id: str) -> int:
        return len(self._zone_index.get(zone_id, set()))

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        def pose_d(p: PoseSE3 | None):
            return None if p is None else {
                "rotation": p.rotation.tolist(), "translation": p.translation.tolist()
            }

        return {
            "version": STORE_SCHEMA_VERSION,
            "robot_zone": self.robot_zone,
            "uid_counters": dict(self._uid_counters),
            "zones": {
                z.zone_id: {
                    "name": z.name,
                    "reachable": list(z.reachable),
                    "extent": None if z.extent is None else {
                        "center": z.extent.center.tolist(),
                        "half_extents": z.extent.half_extents.tolist(),
                        "rotation": z.extent.rotation.tolist(),
                    },
                }
                for z in self.zones.values()
            },
            "records": {
                r.record_id: {
                    "envelope": {
                        "mean": r.envelope.mean.tolist(),
                        "covariance": r.envelope.covariance.tolist(),
                    },
                    "geometry": geom_to_dict(r.geometry),
                    "shape_prior": r.shape_prior,
                    "pose": pose_d(r.pose),
                    "attached_to": r.attached_to,
                }
                for r in self.records.values()
            },
            "vertices": {
                v.uid: {
                    "label": v.label,
                    "state_tag": v.state_tag,
                    "attributes": dict(v.attributes),
                    "grounding": v.grounding,
                    "lifecycle": v.lifecycle.value,
                    "confidence": v.confidence,
                    "zone_id": v.zone_id,
                }
                for v in self.vertices.values()
            },
            "edges": [
                {"predicate": e.predicate, "subject": e.subject,
                 "object": e.obj, "status": e.status.value}
                for e in self.edges
            ],
            "billboards": [
                {"image_ref": b.image_ref, "view_vector": b.view_vector.tolist(),
                 "centroid": b.centroid.tolist()}
                for b in self.billboards
            ],
            "priors": {
                p.prior_id: {
                    "points": p.canonical_cloud.points.tolist(),
                    "functional_frame": pose_d(p.functional_frame),
                    "grasp_annotations": p.grasp_annotations,
                }
                for p in self.priors.values()
            },
            "background": {
                "cell_size": self.background.cell_size,
                "bounds": self.background.bounds,
                "voxels": [
                    {"index": list(k), "log_odds": v[0], "classes": v[1]}
                    for k, v in sorted(self.background.voxels.items())
                ],
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldStore":
        if data.get("version") != STORE_SCHEMA_VERSION:
            raise WorkcellError(f"unsupported store schema {data.get('version')}")

        def pose_f(d):
            return None if d is None else PoseSE3(
                np.array(d["rotation"]), np.array(d["translation"])
            )

        store = cls.__new__(cls)
        store.robot_zone = data["robot_zone"]
        store._uid_counters = dict(data["uid_counters"])
        store.tentative = {}
        store.zones = {}
        for zid, z in data["zones"].items():
            extent = None
            if z["extent"] is not None:
                extent = OrientedBox(
                    np.array(z["extent"]["center"]),
                    np.array(z["extent"]["half_extents"]),
                    np.array(z["extent"]["rotation"]),
                )
            store.zones[zid] = ZoneNode(zid, z["name"], list(z["reachable"]), extent)
        store.records = {}
        for rid, r in data["records"].items():
            store.records[rid] = ObjectRecord(
                record_id=rid,
                envelope=GaussianEnvelope(
                    np.array(r["envelope"]["mean"]),
                    np.array(r["envelope"]["covariance"]),
                ),
                geometry=geom_from_dict(r["geometry"]),
                shape_prior=r["shape_prior"],
                pose=pose_f(r["pose"]),
                attached_to=r["attached_to"],
            )
        store.vertices = {}
        store._zone_index = {}
        for uid, v in data["vertices"].items():
            vert = ObjectVertex(
                uid=uid, label=v["label"], state_tag=v["state_tag"],
                attributes=dict(v["attributes"]), grounding=v["grounding"],
                lifecycle=Lifecycle(v["lifecycle"]), confidence=v["confidence"],
                zone_id=v["zone_id"],
            )
            store.vertices[uid] = vert
            if vert.lifecycle != Lifecycle.ARCHIVED:
                store._index_add(uid, vert.zone_id)
        store.edges = [
            RelationEdge(e["predicate"], e["subject"], e["object"], EdgeStatus(e["status"]))
            for e in data["edges"]
        ]
        store.billboards = [
            Billboard(b["image_ref"], np.array(b["view_vector"]), np.array(b["centroid"]))
            for b in data["billboards"]
        ]
        store.priors = {
            pid: ShapePrior(
                pid, PointCloudData(np.array(p["points"])),
                pose_f(p["functional_frame"]) or PoseSE3.identity(),
                p["grasp_annotations"],
            )
            for pid, p in data["priors"].items()
        }
        bounds = data["background"]["bounds"]
        store.background = BackgroundMap(
            cell_size=data["background"]["cell_size"],
            bounds=None if bounds is None else (tuple(bounds[0]), tuple(bounds[1])),
        )
        for v in data["background"]["voxels"]:
            store.background.voxels[tuple(v["index"])] = [v["log_odds"], v["classes"]]
        return store

    def serialize(self) -> str:
        return canonical_dumps(self.to_dict())

    def state_hash(self) -> str:
        return sha256_of(self.to_dict())

    def snapshot(self) -> "WorldStore":
        return copy.deepcopy(self)


def geom_to_dict(g: GeomAbstraction | None):
    if g is None:
        return None
    if isinstance(g, PointsGeom):
        return {"kind": "points", "points": g.cloud.points.tolist()}
    if isinstance(g, VoxelsGeom):
        return {"kind": "voxels", "cells": g.cells.tolist(), "cell_size": g.cell_size}
    if isinstance(g, BillboardGeom):
        return {
            "kind": "billboard", "image_ref": g.image_ref,
            "view_vector": g.view_vector.tolist(), "centroid": g.centroid.tolist(),
        }
    raise WorkcellError(f"unknown geometry {type(g)}")


def geom_from_dict(d) -> GeomAbstraction | None:
    if d is None:
        return None
    kind = d["kind"]
    if kind == "points":
        return PointsGeom(PointCloudData(np.array(d["points"]).reshape(-1, 3)))
    if kind == "voxels":
        return VoxelsGeom(np.array(d["cells"], dtype=np.int64).reshape(-1, 3), d["cell_size"])
    if kind == "billboard":
        return BillboardGeom(d["image_ref"], np.array(d["view_vector"]), np.array(d["centroid"]))
    raise WorkcellError(f"unknown geometry kind {kind}")


# -- relation verification ---------------------------------------------------


def record_bounds(record: ObjectRecord) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds from stored geometry, else a 2-sigma envelope box."""
    g = record.geometry
    if isinstance(g, PointsGeom) and len(g.cloud) > 0:
        return g.cloud.points.min(axis=0), g.cloud.points.max(axis=0)
    if isinstance(g, VoxelsGeom) and len(g.cells) > 0:
        lo = g.cells.min(axis=0) * g.cell_size
        hi = (g.cells.max(axis=0) + 1) * g.cell_size
        return lo, hi
    sigma = np.sqrt(np.diag(record.envelope.covariance))
    return record.envelope.mean - 2 * sigma, record.envelope.mean + 2 * sigma


def _grounded_record(store: WorldStore, uid: str) -> ObjectRecord:
    v = store.vertices.get(uid)
    if v is None or v.grounding not in store.records:
        raise IntegrityError(f"relation endpoint {uid} is not grounded")
    return store.records[v.grounding]


def _mahal_sq(diff: np.ndarray, cov: np.ndarray) -> float:
    return float(diff @ cholesky_solve(cov, diff))


def _rotation_angle_deg(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def verify_relation(edge: RelationEdge, store: WorldStore) -> EdgeStatus:
    """Geometric/statistical test for a hypothesized relation."""
    a = _grounded_record(store, edge.subject)
    b = _grounded_record(store, edge.obj)
    pred = edge.predicate

    if pred == "Contact":
        d2 = _mahal_sq(b.envelope.mean - a.envelope.mean,
                       a.envelope.covariance + b.envelope.covariance)
        ok = d2 <= CHI2_THRESH_3DOF
    elif pred == "Inside":
        # Container is the edge object; its covariance defines the boundary.
        d2 = _mahal_sq(a.envelope.mean - b.envelope.mean, b.envelope.covariance)
        ok = d2 <= CHI2_THRESH_3DOF
    elif pred == "Near":
        ok = float(np.linalg.norm(a.envelope.mean - b.envelope.mean)) < D_NEAR
    elif pred == "On":
        lo_a, hi_a = record_bounds(a)
        lo_b, hi_b = record_bounds(b)
        cx, cy = a.envelope.mean[0], a.envelope.mean[1]
        in_xy = (
            lo_b[0] - DELTA_SUPP <= cx <= hi_b[0] + DELTA_SUPP
            and lo_b[1] - DELTA_SUPP <= cy <= hi_b[1] + DELTA_SUPP
        )
        ok = in_xy and abs(lo_a[2] - hi_b[2]) < EPS_CONTACT
    elif pred in ("Aligned", "Inserted"):
        ok = _check_mating(store, a, b)
    elif pred == "Clear":
        blockers = [
            e for e in store.find_edges(predicate="On", obj=edge.subject)
            if e.status != EdgeStatus.REFUTED
        ]
        ok = not blockers
    else:
        raise WorkcellError(f"no verification rule for predicate {pred}")
    return EdgeStatus.VERIFIED if ok else EdgeStatus.REFUTED


def _check_mating(store: WorldStore, a: ObjectRecord, b: ObjectRecord) -> bool:
    """Relative pose of a in b's frame matches a's mating frame within
    assembly tolerance (5 mm, 2 deg)."""
    if a.pose is None or b.pose is None or a.shape_prior is None:
        return False
    prior = store.priors.get(a.shape_prior)
    if prior is None:
        return False
    actual = b.pose.inverse().compose(a.pose)
    expected = prior.functional_frame
    dpos = float(np.linalg.norm(actual.translation - expected.translation))
    dang = _rotation_angle_deg(expected.rotation.T @ actual.rotation)
    return dpos < ALIGN_POS_TOL and dang < ALIGN_ANG_TOL_DEG


# -- lifecycle curation ------------------------------------------------------


@dataclass
class LifecycleEvent:
    kind: str  # decayed | uncertain | archived | restored | reinforced
    uid: str
    confidence: float


def curate_zone(
    store: WorldStore, zone_id: str, observed_uids: set[str]
) -> list[LifecycleEvent]:
    """Decay unobserved entities; reinforce and restore observed ones."""
    if zone_id not in store.zones:
        raise WorkcellError(f"unknown zone {zone_id}")
    events: list[LifecycleEvent] = []
    in_zone = [v.uid for v in store.entities_in_zone(zone_id) if v.uid != ROBOT_UID]
    for uid in in_zone:
        if uid in observed_uids:
            continue
        v = store.vertices[uid]
        v.confidence *= LAMBDA_DECAY
        events.append(LifecycleEvent("decayed", uid, v.confidence))
        if v.confidence < TAU_ARCHIVE:
            v.lifecycle = Lifecycle.ARCHIVED
            store._index_remove(uid, v.zone_id)
            events.append(LifecycleEvent("archived", uid, v.confidence))
        elif v.confidence < TAU_UNCERTAIN:
            if v.lifecycle != Lifecycle.UNCERTAIN:
                v.lifecycle = Lifecycle.UNCERTAIN
                events.append(LifecycleEvent("uncertain", uid, v.confidence))
    for uid in sorted(observed_uids):
        v = store.vertices.get(uid)
        if v is None:
            continue
        if v.lifecycle == Lifecycle.ARCHIVED:
            v.lifecycle = Lifecycle.ACTIVE
            store._index_add(uid, v.zone_id)
            events.append(LifecycleEvent("restored", uid, v.confidence))
        v.confidence = 1.0
        v.lifecycle = Lifecycle.ACTIVE
        events.append(LifecycleEvent("reinforced", uid, 1.0))
    return events


def restore_candidates(
    store: WorldStore, obs: Observation, cfg: AssociationConfig
) -> str | None:
    """Archived entity matching a fresh observation (label + gate), if any."""
    best, best_d = None, np.inf
    for uid, v in sorted(store.vertices.items()):
        if v.lifecycle != Lifecycle.ARCHIVED or v.label != obs.label:
            continue
        rec = store.records.get(v.grounding)
        if rec is None:
            continue
        d = mahalanobis_between(obs.envelope, rec.envelope)
        if d < cfg.tau_geo and d < best_d:
            best, best_d = uid, d
    return best


# -- register / update -------------------------------------------------------


@dataclass
class StoreDelta:
    fused: list[str] = field(default_factory=list)
    promoted: list[str] = field(default_factory=list)
    restored: list[str] = field(default_factory=list)
    tentative: list[int] = field(default_factory=list)
    discarded: list[int] = field(default_factory=list)


def register_or_update(
    store: WorldStore,
    observations: list[Observation],
    match: MatchResult,
    memory_uids: list[str],
    gammas: dict[int, float],
    zone_id: str,
    step: int = 0,
    cfg: AssociationConfig | None = None,
) -> StoreDelta:
    """Apply an association outcome: fuse matches, run the confirmation
    window for unmatched observations, promote or restore as needed.

    memory_uids maps match-result memory indices back to store uids;
    gammas maps observation indices to fusion weights.
    """
    cfg = cfg or AssociationConfig()
    delta = StoreDelta()

    for obs_idx, mem_idx, _cost in match.matched:
        uid = memory_uids[mem_idx]
        rec = store.records[store.vertices[uid].grounding]
        gamma = gammas.get(obs_idx, 1.0)
        obs = observations[obs_idx]
        rec.envelope = fuse(rec.envelope, obs.envelope, gamma)
        if gamma > 0.1 and obs.geometry is not None:
            rec.geometry = obs.geometry
        delta.fused.append(uid)

    sighted_keys = set()
    for obs_idx in match.unmatched_observations:
        obs = observations[obs_idx]
        restored = restore_candidates(store, obs, cfg)
        if restored is not None:
            v = store.vertices[restored]
            v.lifecycle = Lifecycle.ACTIVE
            v.confidence = 1.0
            store._index_add(restored, v.zone_id)
            rec = store.records[v.grounding]
            rec.envelope = fuse(rec.envelope, obs.envelope, gammas.get(obs_idx, 1.0))
            delta.restored.append(restored)
            continue
        key = _tentative_key(store, obs, cfg)
        sighted_keys.add(key)
        track = store.tentative.get(key)
        if track is None:
            track = TentativeTrack(observation=obs, count=0, created_at=step)
            store.tentative[key] = track
        else:
            track.observation = obs
        fate = confirm_or_promote(track, sighted=True, cfg=cfg)
        if fate == TrackFate.PROMOTED:
            del store.tentative[key]
            uid = store.add_entity(
                label=obs.label,
                envelope=obs.envelope,
                zone_id=zone_id,
                geometry=obs.geometry,
                attributes={"description": obs.description} if obs.description else {},
            )
            delta.promoted.append(uid)
        else:
            delta.tentative.append(key)

    # Tracks not sighted this cycle fall out of the window.
    for key in list(store.tentative):
        if key not in sighted_keys:
            del store.tentative[key]
            delta.discarded.append(key)

    store.check_integrity()
    return delta


def _tentative_key(store: WorldStore, obs: Observation, cfg: AssociationConfig) -> int:
    """Stable key for the confirmation window: match against pending tracks."""
    for key, track in sorted(store.tentative.items()):
        if track.observation.label != obs.label:
            continue
        if mahalanobis_between(track.observation.envelope, obs.envelope) < cfg.tau_geo:
            return key
    return max(store.tentative, default=-1) + 1


def apply_drift_inflation(store: WorldStore, unobserved_uids: list[str], cycles: int = 1):
    for uid in unobserved_uids:
        v = store.vertices.get(uid)
        if v is None or v.uid == ROBOT_UID:
            continue
        rec = store.records.get(v.grounding)
        if rec is not None and rec.attached_to == "world":
            rec.envelope = inflate_drift(rec.envelope, cycles)
