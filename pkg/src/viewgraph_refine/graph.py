"""View-graph data model, edge construction and the JSON graph file format."""

from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .se3 import AbsolutePose, RelativePose, invert_relative

SCHEMA_VERSION = 1
MIN_SHARED_TRACKS = 5
MAX_BOX_AREA = 0.25


class GraphLoadError(ValueError):
    pass


class GraphValidationError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, center and size normalized by image width/height."""

    center_x: float
    center_y: float
    width: float
    height: float

    def violation(self) -> str | None:
        vals = (self.center_x, self.center_y, self.width, self.height)
        if not all(np.isfinite(v) for v in vals):
            return "bounding box has non-finite values"
        if not (0.0 < self.width <= 1.0 and 0.0 < self.height <= 1.0):
            return "bounding box size outside (0, 1]"
        tol = 1e-6
        for c, s in ((self.center_x, self.width), (self.center_y, self.height)):
            if c - s / 2 < -tol or c + s / 2 > 1.0 + tol:
                return "bounding box leaves the unit square"
        if self.width * self.height > MAX_BOX_AREA:
            return "bounding box area exceeds 25% of the image"
        return None

    def as_array(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y, self.width, self.height])


@dataclass(frozen=True)
class CameraNode:
    node_id: int
    image_width: float
    image_height: float
    focal_length: float
    radial_k1: float = 0.0
    detections: tuple[BoundingBox, ...] = ()

    def intrinsics(self) -> np.ndarray:
        return np.array(
            [
                [self.focal_length, 0.0, self.image_width / 2],
                [0.0, self.focal_length, self.image_height / 2],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class DetectionTrack:
    """One scene element matched across views: node_id -> detection index."""

    track_id: int
    observations: Mapping[int, int]


@dataclass(frozen=True)
class RelativePoseEdge:
    """Edge stored in the canonical ``src < dst`` direction.

    ``scale`` optionally carries the metric length of the relative translation
    (synthetic ground-truth-scale mode); ``outlier`` marks edges that were
    replaced by random poses when corrupting a graph.
    """

    src: int
    dst: int
    pose: RelativePose | None
    shared_tracks: tuple[int, ...]
    outlier: bool = False
    scale: float | None = None

    def pose_between(self, a: int, b: int) -> RelativePose:
        """Relative pose from node ``a`` to node ``b``; the reverse is computed, never stored."""
        if self.pose is None:
            raise GraphValidationError(f"edge ({self.src}, {self.dst}) has no pose")
        if (a, b) == (self.src, self.dst):
            return self.pose
        if (a, b) == (self.dst, self.src):
            return invert_relative(self.pose)
        raise KeyError(f"edge ({self.src}, {self.dst}) does not join {a} and {b}")


@dataclass(frozen=True)
class ViewGraph:
    nodes: tuple[CameraNode, ...]
    tracks: tuple[DetectionTrack, ...]
    edges: tuple[RelativePoseEdge, ...] = ()
    ground_truth: Mapping[int, AbsolutePose] | None = None
    estimated_poses: Mapping[int, AbsolutePose] | None = field(default=None, compare=False)

    @property
    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]

    def node(self, node_id: int) -> CameraNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def with_edges(self, edges: Iterable[RelativePoseEdge]) -> "ViewGraph":
        return replace(self, edges=tuple(sorted(edges, key=lambda e: (e.src, e.dst))))


def build_edges(
    nodes: Sequence[CameraNode], tracks: Sequence[DetectionTrack], min_shared: int = MIN_SHARED_TRACKS
) -> list[RelativePoseEdge]:
    """One pose-less edge per node pair that shares at least ``min_shared`` tracks."""
    known = {n.node_id for n in nodes}
    shared: dict[tuple[int, int], list[int]] = defaultdict(list)
    for track in tracks:
        members = sorted(nid for nid in track.observations if nid in known)
        for a, b in combinations(members, 2):
            shared[(a, b)].append(track.track_id)
    edges = [
        RelativePoseEdge(a, b, None, tuple(sorted(tids)))
        for (a, b), tids in shared.items()
        if len(tids) >= min_shared
    ]
    edges.sort(key=lambda e: (e.src, e.dst))
    return edges


def connected_components(node_ids: Iterable[int], edges: Iterable[RelativePoseEdge]) -> list[list[int]]:
    adj: dict[int, set[int]] = {nid: set() for nid in node_ids}
    for e in edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    seen: set[int] = set()
    comps = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = []
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def validate_connectivity(graph: ViewGraph) -> list[list[int]] | None:
    """``None`` if every node is reachable from every other, else the components."""
    comps = connected_components(graph.node_ids, graph.edges)
    return None if len(comps) == 1 else comps


def first_violation(graph: ViewGraph, require_connected: bool = False) -> str | None:
    """Name of the first violated graph invariant, or ``None``."""
    ids = graph.node_ids
    if len(set(ids)) != len(ids):
        return "duplicate node id"
    n_dets = {}
    for n in graph.nodes:
        if not (n.image_width > 0 and n.image_height > 0 and n.focal_length > 0):
            return "image dimensions and focal length must be positive"
        for box in n.detections:
            msg = box.violation()
            if msg:
                return msg
        n_dets[n.node_id] = len(n.detections)

    track_ids = set()
    track_nodes = {}
    for t in graph.tracks:
        if t.track_id in track_ids:
            return "duplicate track id"
        track_ids.add(t.track_id)
        if len(t.observations) < 2:
            return "track has fewer than 2 observations"
        for nid, det in t.observations.items():
            if nid not in n_dets:
                return "track references unknown node"
            if not 0 <= det < n_dets[nid]:
                return "track references unknown detection"
        track_nodes[t.track_id] = set(t.observations)

    pairs = set()
    for e in graph.edges:
        if e.src not in n_dets or e.dst not in n_dets:
            return "edge references unknown node"
        if e.src == e.dst:
            return "self edge"
        if e.src > e.dst:
            return "edge is not in canonical src < dst direction"
        if (e.src, e.dst) in pairs:
            return "duplicate edge"
        pairs.add((e.src, e.dst))
        if len(e.shared_tracks) < MIN_SHARED_TRACKS:
            return "edge shares fewer than 5 tracks"
        for tid in e.shared_tracks:
            if tid not in track_nodes:
                return "edge references unknown track"
            if not {e.src, e.dst} <= track_nodes[tid]:
                return "edge track not observed by both endpoints"

    for key in ("ground_truth", "estimated_poses"):
        poses = getattr(graph, key)
        if poses is not None and any(nid not in n_dets for nid in poses):
            return f"{key} references unknown node"

    if require_connected and validate_connectivity(graph) is not None:
        return "graph is not connected"
    return None


def validate(graph: ViewGraph, require_connected: bool = True) -> None:
    msg = first_violation(graph, require_connected=require_connected)
    if msg:
        raise GraphValidationError(msg)


# ---------------------------------------------------------------------------
# JSON graph file format


def _pose_doc(p: AbsolutePose) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def to_dict(graph: ViewGraph) -> dict:
    doc = {
        "version": SCHEMA_VERSION,
        "nodes": [
            {
                "node_id": n.node_id,
                "image_width": n.image_width,
                "image_height": n.image_height,
                "focal_length": n.focal_length,
                "radial_k1": n.radial_k1,
                "detections": [
                    {"center_x": b.center_x, "center_y": b.center_y, "width": b.width, "height": b.height}
                    for b in n.detections
                ],
            }
            for n in graph.nodes
        ],
        "tracks": [
            {"track_id": t.track_id, "observations": {str(k): v for k, v in sorted(t.observations.items())}}
            for t in graph.tracks
        ],
        "edges": [],
    }
    for e in graph.edges:
        ed = {
            "src": e.src,
            "dst": e.dst,
            "pose": None
            if e.pose is None
            else {"rotation": e.pose.rotation.tolist(), "translation_dir": e.pose.translation_dir.tolist()},
            "shared_tracks": list(e.shared_tracks),
        }
        if e.outlier:
            ed["outlier"] = True
        if e.scale is not None:
            ed["scale"] = e.scale
        doc["edges"].append(ed)
    if graph.ground_truth is not None:
        doc["ground_truth"] = {str(k): _pose_doc(p) for k, p in sorted(graph.ground_truth.items())}
    if graph.estimated_poses is not None:
        doc["estimated_poses"] = {str(k): _pose_doc(p) for k, p in sorted(graph.estimated_poses.items())}
    return doc


def serialize(graph: ViewGraph) -> bytes:
    return (json.dumps(to_dict(graph), indent=1) + "\n").encode()


def _load_poses(doc) -> dict[int, AbsolutePose]:
    return {int(k): AbsolutePose(np.array(v["rotation"]), np.array(v["translation"])) for k, v in doc.items()}


def from_dict(doc: dict, require_connected: bool = False) -> ViewGraph:
    if not isinstance(doc, dict):
        raise GraphLoadError("malformed graph document: top level must be an object")
    if doc.get("version") != SCHEMA_VERSION:
        raise GraphLoadError(f"schema version mismatch: expected {SCHEMA_VERSION}, got {doc.get('version')!r}")
    try:
        nodes = tuple(
            CameraNode(
                node_id=int(n["node_id"]),
                image_width=n["image_width"],
                image_height=n["image_height"],
                focal_length=n["focal_length"],
                radial_k1=n["radial_k1"],
                detections=tuple(
                    BoundingBox(b["center_x"], b["center_y"], b["width"], b["height"]) for b in n["detections"]
                ),
            )
            for n in doc["nodes"]
        )
        tracks = tuple(
            DetectionTrack(int(t["track_id"]), {int(k): int(v) for k, v in t["observations"].items()})
            for t in doc["tracks"]
        )
        edges = []
        for e in doc["edges"]:
            pose = e["pose"]
            if pose is not None:
                pose = RelativePose(np.array(pose["rotation"]), np.array(pose["translation_dir"]))
            edges.append(
                RelativePoseEdge(
                    int(e["src"]),
                    int(e["dst"]),
                    pose,
                    tuple(int(t) for t in e["shared_tracks"]),
                    bool(e.get("outlier", False)),
                    e.get("scale"),
                )
            )
        gt = _load_poses(doc["ground_truth"]) if doc.get("ground_truth") is not None else None
        est = _load_poses(doc["estimated_poses"]) if doc.get("estimated_poses") is not None else None
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise GraphLoadError(f"malformed graph document: {exc!r}") from exc
    graph = ViewGraph(nodes, tracks, tuple(edges), gt, est)
    msg = first_violation(graph, require_connected=require_connected)
    if msg:
        raise GraphLoadError(msg)
    return graph


def deserialize(data: bytes | str, require_connected: bool = False) -> ViewGraph:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise GraphLoadError(f"malformed graph document: {exc}") from exc
    return from_dict(doc, require_connected=require_connected)


def load(path, require_connected: bool = False) -> ViewGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), require_connected=require_connected)


def save(graph: ViewGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(graph))


def graphs_equal(a: ViewGraph, b: ViewGraph) -> bool:
    """Structural, bit-exact equality (including estimated poses)."""
    return a == b and a.estimated_poses == b.estimated_poses
