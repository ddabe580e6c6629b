"""JSON Lines clip datasets: one record per frame.

    {"clip_id": str, "frame_index": int, "label": 0|1,
     "objects": [{"id": str, "class": str, "x_ft": float, "y_ft": float}]}

Objects may instead carry ``x_px``/``y_px`` image coordinates, projected
through a birds-eye calibration at load time, or ``x_m``/``y_m`` metres.
"""

import json
import logging
import math
from collections import OrderedDict

from .scene_graph import (
    FEET_PER_METER, BevCalibration, ClipSequence, FrameObjects, ProjectionError,
    SceneObject, SchemaError, bev_project,
)

log = logging.getLogger(__name__)


def _object_position(obj, calibration):
    if "x_ft" in obj and "y_ft" in obj:
        return float(obj["x_ft"]), float(obj["y_ft"])
    if "x_m" in obj and "y_m" in obj:
        return float(obj["x_m"]) * FEET_PER_METER, float(obj["y_m"]) * FEET_PER_METER
    if "x_px" in obj and "y_px" in obj:
        if calibration is None:
            raise SchemaError(f"object {obj.get('id')!r} has pixel coordinates "
                              "but no calibration was supplied")
        return bev_project((float(obj["x_px"]), float(obj["y_px"])), calibration)
    raise SchemaError(f"object {obj.get('id')!r} has no position")


def parse_record(rec, calibration=None, vocab=None):
    for key in ("clip_id", "frame_index", "label", "objects"):
        if key not in rec:
            raise SchemaError(f"record missing {key!r}: {rec}")
    if rec["label"] not in (0, 1):
        raise SchemaError(f"label must be 0 or 1 in clip {rec['clip_id']}")
    objects = []
    for obj in rec["objects"]:
        cls = obj.get("class")
        if vocab is not None and cls not in vocab:
            raise SchemaError(f"unknown class {cls!r} in clip {rec['clip_id']}")
        try:
            x, y = _object_position(obj, calibration)
        except ProjectionError as err:
            log.warning("dropping object %s in clip %s: %s", obj.get("id"), rec["clip_id"], err)
            continue
        if not (math.isfinite(x) and math.isfinite(y)):
            raise SchemaError(f"non-finite position for object {obj.get('id')!r}")
        objects.append(SceneObject(str(obj["id"]), cls, x, y))
    return FrameObjects(str(rec["clip_id"]), int(rec["frame_index"]), objects, int(rec["label"]))


def group_clips(frames):
    clips = OrderedDict()
    for f in frames:
        clips.setdefault(f.clip_id, []).append(f)
    out = []
    for clip_id, fs in clips.items():
        labels = {f.label for f in fs}
        if len(labels) != 1:
            raise SchemaError(f"clip {clip_id} has mixed frame labels")
        idx = [f.frame_index for f in fs]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise SchemaError(f"clip {clip_id}: frame indices not strictly increasing")
        out.append(ClipSequence(clip_id, labels.pop(), fs))
    return out


def load_jsonl(path, calibration=None, vocab=None):
    if isinstance(calibration, str):
        calibration = load_calibration(calibration)
    frames = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                frames.append(parse_record(json.loads(line), calibration, vocab))
    return group_clips(frames)


def frame_record(clip_id, frame_index, label, objects):
    return {"clip_id": clip_id, "frame_index": frame_index, "label": label,
            "objects": [{"id": o.object_id, "class": o.cls,
                         "x_ft": round(o.x, 4), "y_ft": round(o.y, 4)} for o in objects]}


def dump_jsonl(clips, fh):
    for clip in clips:
        for f in clip.frames:
            fh.write(json.dumps(frame_record(clip.clip_id, f.frame_index, clip.label, f.objects),
                                sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def save_jsonl(clips, path):
    with open(path, "w") as fh:
        dump_jsonl(clips, fh)


def load_calibration(path):
    with open(path) as fh:
        return BevCalibration.from_dict(json.load(fh))
