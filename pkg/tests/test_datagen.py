import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sg2vec.datagen import (
    COLLISION_TEMPLATES, DEFAULT_SAFE, SAFE_TEMPLATES, GenerationError, ScenarioConfig,
    generate_clip, generate_dataset, min_vehicle_distance, smoothstep, validate_dataset,
)
from sg2vec.dataset import dump_jsonl, load_jsonl, save_jsonl
from sg2vec.scene_graph import extract_scene_graph


@pytest.fixture(scope="module")
def small():
    return generate_dataset(ScenarioConfig(n_clips=40, seed=3))


def test_balanced_split():
    cfg = ScenarioConfig(n_clips=306, collision_fraction=0.5, seed=1)
    clips, manifest = generate_dataset(cfg)
    assert len(clips) == 306
    assert sum(c.label for c in clips) == 153
    assert manifest["statistics"]["n_collision"] == 153


def test_imbalanced_split():
    cfg = ScenarioConfig(n_clips=1043, collision_fraction=1 / 8.91, seed=1)
    clips, manifest = generate_dataset(cfg)
    pos = sum(c.label for c in clips)
    assert abs(pos - 1043 / 8.91) <= 1
    assert manifest["statistics"]["ratio_no_collision_to_collision"] == pytest.approx(7.91, abs=0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(10, 80), st.floats(0.05, 0.95))
def test_realised_ratio_within_one_clip(n, frac):
    cfg = ScenarioConfig(n_clips=n, collision_fraction=frac, frames_per_clip=(20, 24))
    if cfg.n_collisions in (0, n):
        with pytest.raises(GenerationError):
            generate_dataset(cfg)
        return
    clips, _ = generate_dataset(cfg)
    assert abs(sum(c.label for c in clips) - n * frac) <= 1


def test_same_seed_byte_identical(tmp_path):
    cfg = ScenarioConfig(n_clips=12, seed=7)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_jsonl(generate_dataset(cfg)[0], a)
    save_jsonl(generate_dataset(cfg)[0], b)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    save_jsonl(generate_dataset(ScenarioConfig(n_clips=12, seed=8))[0], c)
    assert a.read_bytes() != c.read_bytes()


def test_label_soundness_and_frame_labels(small):
    clips, _ = small
    for clip in clips:
        assert all(f.label == clip.label for f in clip.frames)
        d = min_vehicle_distance(clip)
        if clip.label:
            assert d <= 2.0
        else:
            assert d >= 4.0


def test_collision_clips_end_in_contact(small):
    for clip in small[0]:
        if clip.label:
            last = clip.frames[-1]
            assert min(np.hypot(o.x, o.y) for o in last.objects if o.cls != "pedestrian") <= 2.0


def test_collision_clips_show_near_collision_edges(small):
    for clip in small[0]:
        if clip.label:
            g = extract_scene_graph(clip.frames[-1])
            assert any(r.label == "Near_Collision" for _, _, r in g.edges)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 1))
def test_every_template_draw_is_sound(index, label):
    cfg = ScenarioConfig(safe_templates=SAFE_TEMPLATES, seed=11)
    clip, template = generate_clip(cfg, index, label)
    assert template in (COLLISION_TEMPLATES if label else SAFE_TEMPLATES)
    d = min_vehicle_distance(clip)
    assert d <= 2.0 if label else d >= 4.0
    assert cfg.frames_per_clip[0] <= len(clip) <= cfg.frames_per_clip[1]


def test_trajectories_are_continuous(small):
    # frame to frame, scripted and background vehicles move less than 6 ft
    for clip in small[0]:
        prev = None
        for f in clip.frames:
            pos = {o.object_id: (o.x, o.y) for o in f.objects if o.cls != "pedestrian"}
            if prev:
                for k, (x, y) in pos.items():
                    assert np.hypot(x - prev[k][0], y - prev[k][1]) < 6.0
            prev = pos


def test_pedestrians_stay_off_road(small):
    # shoulder placement is at least 1.6 lanes out; an ego lane change can
    # shift that by one lane, leaving 0.6 lanes of clearance
    for clip in small[0]:
        for f in clip.frames:
            for o in f.objects:
                if o.cls == "pedestrian":
                    assert abs(o.x) >= 0.6 * 12.0


def test_default_mix_excludes_near_miss():
    assert "near_miss" not in DEFAULT_SAFE
    assert ScenarioConfig().safe_templates == DEFAULT_SAFE


def test_round_trip_drops_nothing(small, tmp_path):
    clips, _ = small
    path = tmp_path / "d.jsonl"
    save_jsonl(clips, path)
    loaded = load_jsonl(path)
    assert [c.clip_id for c in loaded] == [c.clip_id for c in clips]
    assert sum(len(c) for c in loaded) == sum(len(c) for c in clips)
    for clip in loaded:
        for f in clip.frames:
            extract_scene_graph(f)


def test_generator_output_validates(small, tmp_path):
    path = tmp_path / "d.jsonl"
    save_jsonl(small[0], path)
    rep = validate_dataset(path)
    assert rep.ok, rep.errors
    assert rep.statistics["n_clips"] == 40


def _records(clips):
    buf = io.StringIO()
    dump_jsonl(clips, buf)
    return [json.loads(line) for line in buf.getvalue().splitlines()]


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_validation_flags_unknown_class(small, tmp_path):
    recs = _records(small[0][:2])
    recs[3]["objects"][0]["class"] = "spaceship"
    path = tmp_path / "bad.jsonl"
    _write(path, recs)
    rep = validate_dataset(path)
    assert not rep.ok
    assert any("spaceship" in e for e in rep.errors)


def test_validation_flags_mixed_labels(small, tmp_path):
    recs = _records(small[0][:2])
    clip_id = recs[0]["clip_id"]
    recs[1]["label"] = 1 - recs[1]["label"]
    path = tmp_path / "bad.jsonl"
    _write(path, recs)
    rep = validate_dataset(path)
    assert not rep.ok
    assert any(clip_id in e and "label" in e for e in rep.errors)


def test_validation_flags_frame_order(small, tmp_path):
    recs = _records(small[0][:1])
    recs[1], recs[2] = recs[2], recs[1]
    path = tmp_path / "bad.jsonl"
    _write(path, recs)
    rep = validate_dataset(path)
    assert any("not strictly increasing" in e for e in rep.errors)


def test_infeasible_config_raises_with_diagnosis():
    cfg = ScenarioConfig(n_clips=4, closing_speed=(0.1, 0.2), seed=0)
    with pytest.raises(GenerationError, match="closing_speed"):
        generate_dataset(cfg)


@pytest.mark.parametrize("kwargs", [
    {"collision_fraction": 1.5}, {"collision_fraction": 0.0}, {"n_clips": 0},
    {"frames_per_clip": (30, 20)}, {"frames_per_clip": (3, 4)}, {"frame_rate": 0.0},
    {"safe_templates": ("teleport",)}, {"collision_templates": ()},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ScenarioConfig(**kwargs)


def test_smoothstep_endpoints_and_monotone():
    s = np.linspace(-0.5, 1.5, 201)
    v = smoothstep(s)
    assert v[0] == 0.0 and v[-1] == 1.0
    assert np.all(np.diff(v) >= 0)
