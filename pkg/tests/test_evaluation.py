import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beatpose.beatmap import Beatmap, BombEvent, Color, CutDirection, NoteEvent, ObstacleEvent, ObstacleKind
from beatpose.context import LaneGeometry
from beatpose.evaluation import (
    CoverageError, HitReport, Outcome, ScoringGeometry, check_bombs, check_obstacles, emit_report,
    oracle_score, report_json, score_hits, style_distance,
)
from beatpose.model import ModelConfig, encode_style, init_params
from beatpose.pose import PoseTrace, canonicalize_window
from beatpose.synthetic import PlayerStyle, play_beatmap, random_beatmap
from helpers import empty_beatmap, random_trace, scoring_case

RATE = 30.0
REST = np.array([[0.0, 1.7, -1.0], [-0.3, 1.0, -1.0], [0.3, 1.0, -1.0]])  # behind the lane plane


def trace_from(fn, song_length=4.0):
    times = np.arange(int(song_length * RATE) + 1) / RATE
    pos = np.stack([fn(t) for t in times])
    rot = np.tile([1.0, 0, 0, 0], (len(times), 3, 1))
    return PoseTrace(times, pos, rot, RATE)


def sweep(hand, start_time, start, velocity):
    def fn(t):
        p = REST.copy()
        p[hand] = np.asarray(start) + np.asarray(velocity) * (t - start_time)
        return p
    return fn


def one_note(cut=CutDirection.Down, color=Color.Right, col=2, row=1, beat=4.0):
    return Beatmap(120.0, (NoteEvent(beat, col, row, color, cut),), song_length=4.0)


def _agree(trace, bm, geom=ScoringGeometry()):
    rep = score_hits(trace, bm, geom)
    outcomes, bombs, walls = oracle_score(trace, bm, geom)
    assert rep.outcomes == outcomes and rep.bomb_touches == bombs and rep.obstacle_collisions == walls
    return rep


def test_downward_sweep_is_hit():
    bm = one_note()  # t = 2.0 s, cell centre (0.3, 1.2, 0)
    trace = trace_from(sweep(2, 2.0, [0.3, 1.2, 0.0], [0, -2.0, 0]))
    assert _agree(trace, bm).outcomes == [Outcome.Hit]


def test_upward_sweep_is_wrong_direction_and_any_waives():
    trace = trace_from(sweep(2, 2.0, [0.3, 1.2, 0.0], [0, 2.0, 0]))
    assert _agree(trace, one_note()).outcomes == [Outcome.WrongDirection]
    assert _agree(trace, one_note(CutDirection.Any)).outcomes == [Outcome.Hit]


def test_stationary_hand_is_too_slow():
    trace = trace_from(sweep(2, 2.0, [0.3, 1.2, 0.0], [0, 0, 0]))
    assert _agree(trace, one_note()).outcomes == [Outcome.TooSlow]


def test_absent_or_wrong_hand_is_miss():
    assert _agree(trace_from(lambda t: REST.copy()), one_note()).outcomes == [Outcome.Miss]
    left_sweeps = trace_from(sweep(1, 2.0, [0.3, 1.2, 0.0], [0, -2.0, 0]))
    assert _agree(left_sweeps, one_note()).outcomes == [Outcome.Miss]


def test_sweep_outside_window_is_miss():
    trace = trace_from(sweep(2, 1.0, [0.3, 1.2, 0.0], [0, -2.0, 0]))
    assert _agree(trace, one_note()).outcomes == [Outcome.Miss]


def test_bombs():
    bm = Beatmap(120.0, bombs=(BombEvent(4.0, 1, 1),), song_length=4.0)  # centre (-0.3, 1.2, 0) at t=2
    geom = ScoringGeometry()
    assert check_bombs(trace_from(lambda t: REST.copy()), bm) == 0
    graze = REST.copy()
    graze[1] = [-0.3, 1.2 + geom.bomb_radius + 1e-6, 0.0]
    assert check_bombs(trace_from(lambda t: graze), bm) == 0
    inside = REST.copy()
    inside[1] = [-0.3, 1.2 + geom.bomb_radius - 1e-3, 0.0]
    assert check_bombs(trace_from(lambda t: inside), bm) == 1
    both = inside.copy()
    both[2] = inside[1]
    assert check_bombs(trace_from(lambda t: both), bm) == 1
    _agree(trace_from(sweep(1, 2.0, [-0.3, 1.2, 0.0], [1.0, 0, 0])), bm)


def test_walls():
    full = Beatmap(120.0, obstacles=(ObstacleEvent(2.0, 2.0, 1, 2, ObstacleKind.FullHeight),), song_length=4.0)
    through = trace_from(lambda t: np.array([[0.0, 1.7, 0.1], REST[1], REST[2]]))
    assert _agree(through, full).obstacle_collisions == 1
    crouch = Beatmap(120.0, obstacles=(ObstacleEvent(2.0, 2.0, 0, 4, ObstacleKind.Crouch),), song_length=4.0)
    ducked = trace_from(lambda t: np.array([[0.0, 1.0, 0.0], REST[1], REST[2]]))
    assert _agree(ducked, crouch).obstacle_collisions == 0
    assert check_obstacles(through, crouch) == 1
    aside = trace_from(lambda t: np.array([[1.5, 1.7, 0.0], REST[1], REST[2]]))
    assert check_obstacles(aside, full) == 0


def test_coverage_error_lists_indices():
    bm = Beatmap(120.0, (NoteEvent(1.0, 0, 0, Color.Left, CutDirection.Up), NoteEvent(7.0, 0, 0, Color.Left, CutDirection.Up)),
                 (BombEvent(7.5, 0, 0),), song_length=4.0)
    short = trace_from(lambda t: REST.copy(), song_length=3.0)
    with pytest.raises(CoverageError) as ei:
        score_hits(short, bm)
    assert ei.value.missing == {"notes": [1], "bombs": [0], "obstacles": []}


def test_synthetic_performer_hits_most_notes():
    bm = random_beatmap(0, n_beats=32)
    rep = score_hits(play_beatmap(bm, PlayerStyle(), rng=0), bm)
    assert rep.hit_rate > 0.9
    assert rep.bomb_touches == 0 and rep.obstacle_collisions == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.02, 0.3), st.floats(0.0, 0.3))
def test_hits_monotone_in_window(seed, w, extra):
    bm, trace = scoring_case(seed)
    small = score_hits(trace, bm, ScoringGeometry(hit_window=w)).counts()["hit"]
    try:
        large = score_hits(trace, bm, ScoringGeometry(hit_window=w + extra)).counts()["hit"]
    except CoverageError:
        return
    assert large >= small


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-np.pi, np.pi), st.floats(-20, 20), st.floats(-20, 20))
def test_rigid_motion_of_trace_and_lanes_keeps_report(seed, yaw, dx, dz):
    from beatpose.pose import AnchorTransform

    bm, trace = scoring_case(seed)
    a = AnchorTransform(yaw, (dx, dz))
    moved = PoseTrace(trace.times, a.apply_points(trace.positions), a.apply_rotations(trace.rotations), trace.rate)
    shift = a.apply_points(np.zeros(3))
    lanes = LaneGeometry(placement_yaw=yaw, placement_xz=(float(shift[0]), float(shift[2])))
    r1 = score_hits(trace, bm)
    r2 = score_hits(moved, bm, ScoringGeometry(lanes=lanes))
    assert r1.outcomes == r2.outcomes
    assert (r1.bomb_touches, r1.obstacle_collisions) == (r2.bomb_touches, r2.obstacle_collisions)


@pytest.mark.parametrize("seed", range(10))
def test_outcomes_partition_notes(seed):
    bm, trace = scoring_case(seed)
    rep = score_hits(trace, bm)
    assert len(rep.outcomes) == len(bm.notes)
    assert sum(rep.counts().values()) == len(bm.notes)


def test_geometry_validation():
    with pytest.raises(ValueError):
        score_hits(trace_from(lambda t: REST.copy()), one_note(), ScoringGeometry(direction_cos_min=0.0))
    with pytest.raises(ValueError):
        ScoringGeometry(bomb_radius=-1).validate()


@pytest.fixture(scope="module")
def style_setup():
    params = init_params(ModelConfig(d_z=4, width=8, h=2, T=5, n=2, n_ref=3), 0)
    donor = random_trace(np.random.default_rng(0), 15)
    refs = np.stack([canonicalize_window(donor.slice(k * 5, (k + 1) * 5))[0].features() for k in range(3)])
    return params, donor, refs


def test_style_distance_zero_on_matching_windows(style_setup):
    params, donor, refs = style_setup
    one = PoseTrace(donor.times[:5], donor.positions[:5], donor.rotations[:5], donor.rate)
    assert style_distance(one, refs[:1], params) == 0.0


def test_style_distance_recomputation_and_scaling(style_setup):
    params, donor, refs = style_setup
    z_ref = encode_style(params, refs)
    expect = np.mean([np.sum((encode_style(params, refs[k:k + 1]) - z_ref) ** 2) for k in range(3)])
    assert style_distance(donor, refs, params) == pytest.approx(expect, rel=1e-12)
    doubled = dict(params, **{"estyle.w2": 2 * params["estyle.w2"], "estyle.b2": 2 * params["estyle.b2"]})
    assert style_distance(donor, refs, doubled) == pytest.approx(4 * expect, rel=1e-12)
    with pytest.raises(ValueError):
        style_distance(PoseTrace(donor.times[:4], donor.positions[:4], donor.rotations[:4], donor.rate), refs, params)


def test_empty_report(tmp_path):
    rep = score_hits(trace_from(lambda t: REST.copy()), empty_beatmap())
    paths = emit_report(rep, tmp_path / "r.json", tmp_path / "plots")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["hit_rate"] == 0 and doc["n_notes"] == 0
    assert len(paths) == 4 and all(p.exists() for p in paths)


def test_report_is_byte_stable_and_complete(tmp_path):
    bm, trace = scoring_case(3)
    rep = score_hits(trace, bm)
    a = report_json(rep, {"x": 1}, {"trace_sha256": "abc"})
    b = report_json(score_hits(trace, bm), {"x": 1}, {"trace_sha256": "abc"})
    assert a == b
    doc = json.loads(a)
    for key in ("hit_rate", "outcomes", "bomb_touches", "obstacle_collisions", "jerk", "style_distance", "config", "inputs"):
        assert key in doc
    assert list(doc) == sorted(doc)


def test_histogram_totals_match_notes(tmp_path):
    rep = HitReport([Outcome.Hit, Outcome.Miss, Outcome.TooSlow], note_times=[1.0, 2.0, 3.0])
    emit_report(rep, tmp_path / "r.json", tmp_path / "plots")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert sum(doc["outcomes"].values()) == 3 == doc["n_notes"]
    assert doc["hit_rate"] == pytest.approx(1 / 3)
