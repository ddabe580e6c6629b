"""Ego-centric scene graphs from per-frame object positions.

Positions are in feet on the ground plane with the ego car at the origin,
``x`` to the right and ``y`` forward. Each frame becomes a directed
multigraph whose nodes are the ego car, three lane nodes and every object
within the outermost proximity band; edges carry one of 14 relations.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core_math import RelationalPlan


class SchemaError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


DEFAULT_VOCAB = (
    "ego_car", "car", "truck", "motorcycle", "bicycle", "pedestrian",
    "left_lane", "middle_lane", "right_lane", "obstacle",
)
VEHICLE_CLASSES = frozenset({"car", "truck", "motorcycle", "bicycle"})
LANE_NODES = ("left_lane", "middle_lane", "right_lane")
EGO_ID = "ego"
FEET_PER_METER = 1.0 / 0.3048


class Relation(enum.IntEnum):
    NEAR_COLLISION = 0
    SUPER_NEAR = 1
    VERY_NEAR = 2
    NEAR = 3
    VISIBLE = 4
    FRONT_LEFT = 5
    LEFT_FRONT = 6
    LEFT_REAR = 7
    REAR_LEFT = 8
    REAR_RIGHT = 9
    RIGHT_REAR = 10
    RIGHT_FRONT = 11
    FRONT_RIGHT = 12
    IS_IN = 13

    @property
    def kind(self):
        if self <= Relation.VISIBLE:
            return "proximity"
        if self <= Relation.FRONT_RIGHT:
            return "directional"
        return "isIn"

    @property
    def label(self):
        return _LABELS[self]

    @classmethod
    def from_label(cls, label):
        try:
            return _BY_LABEL[label]
        except KeyError:
            raise SchemaError(f"unknown relation {label!r}") from None


_LABELS = {
    Relation.NEAR_COLLISION: "Near_Collision",
    Relation.SUPER_NEAR: "Super_Near",
    Relation.VERY_NEAR: "Very_Near",
    Relation.NEAR: "Near",
    Relation.VISIBLE: "Visible",
    Relation.FRONT_LEFT: "Front_Left",
    Relation.LEFT_FRONT: "Left_Front",
    Relation.LEFT_REAR: "Left_Rear",
    Relation.REAR_LEFT: "Rear_Left",
    Relation.REAR_RIGHT: "Rear_Right",
    Relation.RIGHT_REAR: "Right_Rear",
    Relation.RIGHT_FRONT: "Right_Front",
    Relation.FRONT_RIGHT: "Front_Right",
    Relation.IS_IN: "isIn",
}
_BY_LABEL = {v: k for k, v in _LABELS.items()}
N_RELATIONS = len(Relation)

PROXIMITY_BANDS = (
    (Relation.NEAR_COLLISION, 4.0),
    (Relation.SUPER_NEAR, 7.0),
    (Relation.VERY_NEAR, 10.0),
    (Relation.NEAR, 16.0),
    (Relation.VISIBLE, 25.0),
)


@dataclass(frozen=True)
class ExtractionConfig:
    band_thresholds: tuple = (4.0, 7.0, 10.0, 16.0, 25.0)
    lane_width: float = 12.0
    vehicle_half_width: float = 3.0
    all_pairs: bool = False
    vocab: tuple = DEFAULT_VOCAB

    @property
    def visible_range(self):
        return self.band_thresholds[-1]

    @property
    def directional_range(self):
        return self.band_thresholds[3]


@dataclass(frozen=True)
class SceneObject:
    object_id: str
    cls: str
    x: float
    y: float


@dataclass
class FrameObjects:
    clip_id: str
    frame_index: int
    objects: list
    label: int = 0


@dataclass
class SceneGraph:
    nodes: list            # [(node_id, class)]
    edges: list            # [(src_index, dst_index, Relation)]
    frame_index: int = 0

    def node_ids(self):
        return [n for n, _ in self.nodes]

    def to_dict(self):
        return {
            "frame_index": self.frame_index,
            "nodes": [{"id": n, "class": c} for n, c in self.nodes],
            "edges": [{"src": self.nodes[s][0], "dst": self.nodes[d][0],
                       "relation": r.label} for s, d, r in self.edges],
        }

    @classmethod
    def from_dict(cls, data):
        nodes = [(n["id"], n["class"]) for n in data["nodes"]]
        pos = {n: i for i, (n, _) in enumerate(nodes)}
        edges = [(pos[e["src"]], pos[e["dst"]], Relation.from_label(e["relation"]))
                 for e in data["edges"]]
        return cls(nodes, edges, data.get("frame_index", 0))


# ----------------------------------------------------------------------
# birds-eye projection
# ----------------------------------------------------------------------

@dataclass
class BevCalibration:
    """Image-pixel to ground-plane (feet) homography."""

    homography: np.ndarray
    lane_width_ft: float = 12.0
    lane_marking_length_ft: float = 10.0

    def __post_init__(self):
        self.homography = np.asarray(self.homography, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(self.homography)) <= 1e-9:
            raise SchemaError("calibration homography is singular")

    @classmethod
    def from_correspondences(cls, pixels, ground, **reference):
        """Direct linear transform from >= 4 pixel/ground point pairs."""
        pixels = np.asarray(pixels, dtype=np.float64)
        ground = np.asarray(ground, dtype=np.float64)
        if len(pixels) < 4 or pixels.shape != ground.shape:
            raise SchemaError("need at least 4 matching point pairs")
        rows = []
        for (u, v), (x, y) in zip(pixels, ground):
            rows.append([u, v, 1, 0, 0, 0, -x * u, -x * v, -x])
            rows.append([0, 0, 0, u, v, 1, -y * u, -y * v, -y])
        _, _, vt = np.linalg.svd(np.asarray(rows))
        h = vt[-1].reshape(3, 3)
        return cls(h / h[2, 2], **reference)

    @classmethod
    def from_dict(cls, data):
        h = data["homography"]
        ref = data.get("reference", {})
        return cls(np.asarray(h, dtype=np.float64).reshape(3, 3),
                   lane_width_ft=ref.get("lane_width_ft", 12.0),
                   lane_marking_length_ft=ref.get("lane_marking_length_ft", 10.0))

    def to_dict(self):
        return {"homography": self.homography.reshape(-1).tolist(),
                "reference": {"lane_width_ft": self.lane_width_ft,
                              "lane_marking_length_ft": self.lane_marking_length_ft}}


def bev_project(point, calib):
    u, v = point
    hx, hy, hw = calib.homography @ np.array([u, v, 1.0])
    if abs(hw) <= 1e-9:
        raise ProjectionError(f"pixel {point} projects to the horizon")
    return hx / hw, hy / hw


# ----------------------------------------------------------------------
# relation rules
# ----------------------------------------------------------------------

def proximity_relation(dist, thresholds=(4.0, 7.0, 10.0, 16.0, 25.0)):
    """Tightest proximity band containing ``dist`` (upper bound inclusive)."""
    if dist < 0:
        raise ValueError(f"negative distance {dist}")
    for (rel, _), limit in zip(PROXIMITY_BANDS, thresholds):
        if dist <= limit:
            return rel
    return None


_SECTORS = (
    Relation.FRONT_RIGHT, Relation.RIGHT_FRONT, Relation.RIGHT_REAR, Relation.REAR_RIGHT,
)
_SECTORS_LEFT = (
    Relation.FRONT_LEFT, Relation.LEFT_FRONT, Relation.LEFT_REAR, Relation.REAR_LEFT,
)


def directional_relation(x, y, max_range=16.0):
    """Octant of ``(x, y)`` seen from the ego car, or None beyond ``max_range``.

    The angle is measured clockwise from straight ahead. Right-hand octants
    are ``[0, 45)``, ``[45, 90)``, ``[90, 135)``, ``[135, 180]``; on the
    left the boundary angles -45, -90 and -135 belong to the octant further
    back: ``(-45, 0)``, ``(-90, -45]``, ``(-135, -90]``, ``[-180, -135]``.
    """
    if x == 0 and y == 0:
        raise ValueError("object coincides with the ego car")
    if math.hypot(x, y) > max_range:
        return None
    theta = math.degrees(math.atan2(x, y))
    if theta >= 0:
        return _SECTORS[min(int(theta // 45.0), 3)]
    return _SECTORS_LEFT[min(int(-theta // 45.0), 3)]


def lane_assignment(x, vehicle_half_width=3.0, lane_width=12.0):
    """Lane nodes overlapped by the lateral span ``[x - hw, x + hw]``."""
    if lane_width <= 0:
        raise ValueError("lane_width must be positive")
    lo, hi = x - vehicle_half_width, x + vehicle_half_width
    edge = lane_width / 2.0
    lanes = set()
    if lo < -edge:
        lanes.add("left_lane")
    if hi > -edge and lo < edge:
        lanes.add("middle_lane")
    if hi > edge:
        lanes.add("right_lane")
    return lanes


# ----------------------------------------------------------------------
# extraction
# ----------------------------------------------------------------------

def extract_scene_graph(frame, config=ExtractionConfig()):
    vocab = set(config.vocab)
    for obj in frame.objects:
        if obj.cls not in vocab:
            raise SchemaError(f"unknown class {obj.cls!r} in clip {frame.clip_id}")
    ids = [o.object_id for o in frame.objects]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate object ids in clip {frame.clip_id} "
                          f"frame {frame.frame_index}")

    nodes = [(EGO_ID, "ego_car")] + [(lane, lane) for lane in LANE_NODES]
    lane_pos = {lane: 1 + i for i, lane in enumerate(LANE_NODES)}
    edges = [(0, lane_pos["middle_lane"], Relation.IS_IN)]

    kept = []
    for obj in sorted(frame.objects, key=lambda o: o.object_id):
        if obj.x == 0 and obj.y == 0:
            raise ValueError(f"object {obj.object_id} coincides with the ego car")
        dist = math.hypot(obj.x, obj.y)
        if dist > config.visible_range:
            continue
        kept.append(obj)
        nodes.append((obj.object_id, obj.cls))
        v = len(nodes) - 1
        band = proximity_relation(dist, config.band_thresholds)
        edges.append((0, v, band))
        edges.append((v, 0, band))
        if obj.cls in VEHICLE_CLASSES:
            sector = directional_relation(obj.x, obj.y, config.directional_range)
            if sector is not None:
                edges.append((0, v, sector))
            for lane in LANE_NODES:
                if lane in lane_assignment(obj.x, config.vehicle_half_width, config.lane_width):
                    edges.append((v, lane_pos[lane], Relation.IS_IN))

    if config.all_pairs:
        for i, a in enumerate(kept):
            for j in range(i + 1, len(kept)):
                b = kept[j]
                band = proximity_relation(math.hypot(a.x - b.x, a.y - b.y),
                                          config.band_thresholds)
                if band is not None:
                    edges.append((4 + i, 4 + j, band))
                    edges.append((4 + j, 4 + i, band))
    return SceneGraph(nodes, edges, frame.frame_index)


@dataclass
class GraphTensors:
    """Numeric view of one or more scene graphs stacked as a disjoint union."""

    one_hot: np.ndarray        # n_nodes x |vocab|
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    segments: np.ndarray       # frame id of every node
    n_frames: int
    plan: RelationalPlan = None          # typed edges
    union_plan: RelationalPlan = None    # distinct (src, dst) pairs, one relation

    def __post_init__(self):
        n = self.one_hot.shape[0]
        if self.plan is None:
            self.plan = RelationalPlan(self.src, self.dst, self.rel, n)
        if self.union_plan is None:
            pairs = np.unique(np.stack([self.src, self.dst], axis=1), axis=0)
            self.union_plan = RelationalPlan(pairs[:, 0], pairs[:, 1],
                                             np.zeros(len(pairs), dtype=np.intp), n)

    @property
    def n_nodes(self):
        return self.one_hot.shape[0]

    @property
    def adjacency(self):
        """Per-relation ``(src, dst)`` index arrays, edge order preserved."""
        return {Relation(r): (self.src[self.rel == r], self.dst[self.rel == r])
                for r in np.unique(self.rel)}


def to_relation_tensors(graphs, vocab=DEFAULT_VOCAB):
    """One-hot node features and relation index arrays.

    Accepts a single graph or a sequence; several graphs are laid out as one
    block-diagonal graph with ``segments`` recording the frame of each node.
    """
    if isinstance(graphs, SceneGraph):
        graphs = [graphs]
    index = {c: i for i, c in enumerate(vocab)}
    rows, src, dst, rel, seg = [], [], [], [], []
    offset = 0
    for t, g in enumerate(graphs):
        for node_id, cls in g.nodes:
            if cls not in index:
                raise SchemaError(f"class {cls!r} of node {node_id!r} not in vocabulary")
            rows.append(index[cls])
        for s, d, r in g.edges:
            src.append(s + offset)
            dst.append(d + offset)
            rel.append(int(r))
        seg.extend([t] * len(g.nodes))
        offset += len(g.nodes)
    one_hot = np.zeros((offset, len(vocab)))
    one_hot[np.arange(offset), rows] = 1.0
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    rel = np.asarray(rel, dtype=np.intp)
    return GraphTensors(one_hot, src, dst, rel, np.asarray(seg, dtype=np.intp), len(graphs))


# ----------------------------------------------------------------------
# clip records
# ----------------------------------------------------------------------

@dataclass
class ClipSequence:
    clip_id: str
    label: int
    frames: list       # [FrameObjects], ordered by frame_index

    def __len__(self):
        return len(self.frames)


def extract_clip(clip, config=ExtractionConfig()):
    return [extract_scene_graph(f, config) for f in clip.frames]


def scene_graph_cache(clip, graphs):
    return {"clip_id": clip.clip_id, "label": clip.label,
            "frames": [g.to_dict() for g in graphs]}
