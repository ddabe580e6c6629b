"""Kinematic lane-change scenarios with and without collisions.

Everything is expressed relative to the ego car, in feet. Each clip has one
scripted interaction (the template) plus background traffic and roadside
pedestrians. Collision clips end with the scripted vehicle's centre within
``contact_ft`` of the ego car; non-collision clips keep every vehicle at
least ``safe_ft`` away in every frame.
"""

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import group_clips, parse_record
from .scene_graph import DEFAULT_VOCAB, ClipSequence, FrameObjects, SceneObject, SchemaError

LANE = 12.0

COLLISION_TEMPLATES = ("cut_in", "braking_lead", "rear_approach", "ego_merge")
SAFE_TEMPLATES = ("pull_away", "steady_follow", "passing", "benign_lane_change", "near_miss")
DEFAULT_SAFE = ("pull_away", "steady_follow", "passing", "benign_lane_change")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_clips: int = 300
    collision_fraction: float = 0.5
    frames_per_clip: tuple = (20, 60)
    frame_rate: float = 20.0
    n_other_vehicles: tuple = (1, 4)
    n_pedestrians: tuple = (0, 2)
    ego_speed: tuple = (70.0, 100.0)        # ft/s
    closing_speed: tuple = (3.0, 40.0)      # ft/s, scripted vehicle vs ego
    hazard_start_ft: tuple = (14.0, 24.0)   # initial gap of the scripted vehicle
    noise_std: float = 0.25                 # ft
    contact_ft: float = 2.0
    safe_ft: float = 4.0
    collision_templates: tuple = COLLISION_TEMPLATES
    safe_templates: tuple = DEFAULT_SAFE
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.collision_fraction < 1.0:
            raise ValueError(f"collision_fraction must be in (0, 1), got {self.collision_fraction}")
        if self.n_clips < 1:
            raise ValueError("n_clips must be positive")
        for name in ("frames_per_clip", "n_other_vehicles", "n_pedestrians",
                     "ego_speed", "closing_speed", "hazard_start_ft"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.frames_per_clip[0] < 5:
            raise ValueError("clips need at least 5 frames")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        bad = set(self.collision_templates) - set(COLLISION_TEMPLATES)
        bad |= set(self.safe_templates) - set(SAFE_TEMPLATES)
        if bad or not self.collision_templates or not self.safe_templates:
            raise ValueError(f"unknown or empty template set {sorted(bad)}")

    @property
    def n_collisions(self):
        return int(round(self.n_clips * self.collision_fraction))


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def _lane_change(t, start, duration, x_from, x_to):
    return x_from + (x_to - x_from) * smoothstep((t - start) / duration)


@dataclass
class _Track:
    object_id: str
    cls: str
    x: np.ndarray
    y: np.ndarray
    scripted: bool = False


def _approach(rng, t, gap, cfg):
    """Gap to a vehicle closing at constant acceleration, reaching zero at the
    last frame. Returns None when the closing speed leaves the allowed range."""
    t_end = max(t[-1], 1e-9)
    r = rng.uniform(0.4, 1.6)                 # initial / final closing speed
    v_end = 2.0 * gap / (t_end * (1.0 + r))
    lo, hi = cfg.closing_speed
    if not (lo <= v_end <= hi and lo <= r * v_end <= hi):
        return None
    accel = (v_end - r * v_end) / t_end
    tau = t_end - t
    return v_end * tau - 0.5 * accel * tau ** 2


def _recede(rng, t, gap0, gap1):
    """Gap opening from ``gap0`` to ``gap1`` at constant acceleration."""
    t_end = max(t[-1], 1e-9)
    r = rng.uniform(0.4, 1.6)
    v0 = 2.0 * (gap1 - gap0) / (t_end * (1.0 + r))
    accel = (r * v0 - v0) / t_end
    return gap0 + v0 * t + 0.5 * accel * t ** 2


def _scripted(rng, template, t, cfg):
    """Relative (x, y) trajectory of the scripted vehicle and the ego car's
    lateral offset from its starting lane centre, or None if the sampled
    kinematics are infeasible.

    Collision templates close the gap monotonically and end at the contact
    point. Safe templates visit the same gaps without closing in.
    """
    t_end = t[-1]
    ego_x = np.zeros_like(t)
    side = rng.choice([-1.0, 1.0])
    sign = rng.choice([-1.0, 1.0])
    gap = rng.uniform(*cfg.hazard_start_ft)
    dx, dy = rng.uniform(-0.8, 0.8, size=2)
    if template in ("braking_lead", "rear_approach", "cut_in", "ego_merge"):
        closing = _approach(rng, t, gap, cfg)
        if closing is None:
            return None
        if template == "braking_lead":
            sign = 1.0
        elif template == "rear_approach":
            sign = -1.0
        y = dy + sign * closing
        x = np.full_like(t, dx)
        if template == "cut_in":
            start = rng.uniform(0.0, 0.4) * t_end
            x = _lane_change(t, start, t_end - start, side * LANE, dx)
        elif template == "ego_merge":
            start = rng.uniform(0.0, 0.4) * t_end
            ego_x = _lane_change(t, start, t_end - start, 0.0, side * LANE - dx)
            x = side * LANE - ego_x
    elif template == "pull_away":
        y = sign * _recede(rng, t, rng.uniform(5.0, 12.0), gap + rng.uniform(0.0, 10.0))
        x = np.full_like(t, rng.normal(0.0, 0.5))
    elif template == "steady_follow":
        g0 = rng.uniform(6.0, 22.0)
        y = sign * (g0 + rng.uniform(-1.5, 1.5) * t)
        x = np.full_like(t, rng.normal(0.0, 0.5))
    elif template == "passing":
        v = rng.uniform(5.0, 25.0)
        y0 = -sign * rng.uniform(0.0, 1.0) * v * t_end * 0.5
        x = np.full_like(t, side * LANE + rng.normal(0.0, 0.6))
        y = y0 + sign * v * t
    elif template == "benign_lane_change":
        start = rng.uniform(0.0, 0.5) * t_end
        dur = rng.uniform(1.0, 2.5)
        ego_x = _lane_change(t, start, dur, 0.0, side * LANE)
        x = side * LANE - ego_x
        # the target-lane occupant leaves a generous gap that keeps opening
        y = sign * _recede(rng, t, rng.uniform(18.0, 26.0), rng.uniform(28.0, 40.0))
    elif template == "near_miss":
        # approach as in a collision, then hold a gap of 5-9 ft
        hold = rng.uniform(5.0, 9.0)
        t_stop = rng.uniform(0.5, 0.9) * t_end
        v_close = (gap - hold) / max(t_stop, 1e-9)
        y = sign * (hold + v_close * np.maximum(t_stop - t, 0.0))
        x = np.full_like(t, rng.normal(0.0, 0.5))
    else:
        raise GenerationError(f"unknown template {template!r}")
    return x, y, ego_x


def _background(rng, t, n, start_index, ego_x):
    tracks = []
    for k in range(n):
        lane = rng.choice([-2, -1, 1, 2, 0])
        if lane == 0:
            y0 = rng.choice([-1.0, 1.0]) * rng.uniform(20.0, 60.0)
        else:
            y0 = rng.uniform(-60.0, 60.0)
        v = rng.uniform(-6.0, 6.0)
        cls = rng.choice(["car", "car", "car", "truck", "motorcycle"])
        x = lane * LANE + rng.normal(0.0, 0.5) - ego_x
        tracks.append(_Track(f"v{start_index + k}", str(cls), x, y0 + v * t))
    return tracks


def _pedestrians(rng, t, n, ego_speed, ego_x):
    tracks = []
    for k in range(n):
        side = rng.choice([-1.0, 1.0])
        x = side * rng.uniform(1.6 * LANE, 2.0 * LANE)
        y0 = rng.uniform(10.0, 10.0 + ego_speed * t[-1])
        walk = rng.uniform(-5.0, 5.0)
        tracks.append(_Track(f"p{k}", "pedestrian", x - ego_x, y0 - (ego_speed - walk) * t))
    return tracks


def _simulate(rng, label, template, cfg):
    n_frames = int(rng.integers(cfg.frames_per_clip[0], cfg.frames_per_clip[1] + 1))
    t = np.arange(n_frames) / cfg.frame_rate
    scripted = _scripted(rng, template, t, cfg)
    if scripted is None:
        return None
    x, y, ego_x = scripted
    cls = str(rng.choice(["car", "car", "car", "car", "truck", "motorcycle"]))
    tracks = [_Track("v0", cls, np.asarray(x, dtype=float), np.asarray(y, dtype=float), True)]
    n_bg = int(rng.integers(cfg.n_other_vehicles[0], cfg.n_other_vehicles[1] + 1))
    tracks += _background(rng, t, n_bg, 1, ego_x)
    n_ped = int(rng.integers(cfg.n_pedestrians[0], cfg.n_pedestrians[1] + 1))
    tracks += _pedestrians(rng, t, n_ped, rng.uniform(*cfg.ego_speed), ego_x)
    for tr in tracks:
        tr.x = np.round(tr.x + rng.normal(0.0, cfg.noise_std, n_frames), 4)
        tr.y = np.round(tr.y + rng.normal(0.0, cfg.noise_std, n_frames), 4)
    return t, tracks


def _sound(tracks, label, cfg):
    for tr in tracks:
        if tr.cls == "pedestrian":
            continue
        d = np.hypot(tr.x, tr.y)
        if np.any(d == 0):
            return False
        if tr.scripted and label == 1:
            if d[-1] > cfg.contact_ft or d.min() > cfg.contact_ft:
                return False
        elif d.min() < cfg.safe_ft:
            return False
    return True


def generate_clip(cfg, clip_index, label, max_attempts=200):
    rng = np.random.default_rng([cfg.seed, clip_index])
    templates = cfg.collision_templates if label else cfg.safe_templates
    template = str(rng.choice(list(templates)))
    for _ in range(max_attempts):
        sim = _simulate(rng, label, template, cfg)
        if sim is not None and _sound(sim[1], label, cfg):
            t, tracks = sim
            break
    else:
        raise GenerationError(
            f"clip {clip_index}: could not satisfy the {'contact' if label else 'separation'} "
            f"constraint for template {template!r} in {max_attempts} attempts; "
            f"check closing_speed, frames_per_clip and noise_std")
    clip_id = f"clip{clip_index:05d}"
    frames = []
    for k in range(len(t)):
        objs = [SceneObject(tr.object_id, tr.cls, float(tr.x[k]), float(tr.y[k])) for tr in tracks]
        frames.append(FrameObjects(clip_id, k, objs, label))
    return ClipSequence(clip_id, label, frames), template


def generate_dataset(cfg):
    """Returns ``(clips, manifest)``; deterministic in ``cfg.seed``."""
    labels = np.zeros(cfg.n_clips, dtype=int)
    order = np.random.default_rng(cfg.seed).permutation(cfg.n_clips)
    labels[order[:cfg.n_collisions]] = 1
    if cfg.n_collisions in (0, cfg.n_clips):
        raise GenerationError("configuration yields a single-class dataset")
    clips, templates = [], Counter()
    for i, y in enumerate(labels):
        clip, template = generate_clip(cfg, i, int(y))
        clips.append(clip)
        templates[template] += 1
    manifest = {"config": asdict(cfg), "statistics": dataset_statistics(clips),
                "templates": dict(sorted(templates.items()))}
    return clips, manifest


def dataset_statistics(clips):
    lengths = np.array([len(c) for c in clips])
    pos = sum(c.label for c in clips)
    neg = len(clips) - pos
    return {
        "n_clips": len(clips),
        "n_collision": pos,
        "n_no_collision": neg,
        "ratio_no_collision_to_collision": (neg / pos) if pos else None,
        "frames_total": int(lengths.sum()),
        "frames_mean": float(lengths.mean()),
        "frames_min": int(lengths.min()),
        "frames_max": int(lengths.max()),
    }


@dataclass
class ValidationReport:
    ok: bool
    errors: list = field(default_factory=list)
    statistics: dict = field(default_factory=dict)


def validate_dataset(path, vocab=DEFAULT_VOCAB):
    """Check schema, frame ordering, label consistency and class vocabulary."""
    errors = []
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for obj in rec.get("objects", []):
                    if obj.get("class") not in vocab:
                        raise SchemaError(f"unknown class {obj.get('class')!r} "
                                          f"in clip {rec.get('clip_id')}")
                frames.append(parse_record(rec, vocab=vocab))
            except (ValueError, KeyError, TypeError) as err:
                errors.append(f"line {lineno}: {err}")
    by_clip = {}
    for f in frames:
        by_clip.setdefault(f.clip_id, []).append(f)
    for clip_id, fs in by_clip.items():
        if len({f.label for f in fs}) != 1:
            errors.append(f"clip {clip_id}: mixed frame labels")
        idx = [f.frame_index for f in fs]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            errors.append(f"clip {clip_id}: frame indices not strictly increasing")
        for f in fs:
            ids = [o.object_id for o in f.objects]
            if len(ids) != len(set(ids)):
                errors.append(f"clip {clip_id} frame {f.frame_index}: duplicate object ids")
    stats = {}
    if not errors and frames:
        stats = dataset_statistics(group_clips(frames))
    return ValidationReport(not errors, errors, stats)


def min_vehicle_distance(clip):
    """Smallest ego-to-vehicle centre distance over a clip."""
    best = math.inf
    for f in clip.frames:
        for o in f.objects:
            if o.cls != "pedestrian":
                best = min(best, math.hypot(o.x, o.y))
    return best
