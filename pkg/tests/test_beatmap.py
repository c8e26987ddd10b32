import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from beatpose.beatmap import (
    Beatmap, BeatmapParseError, BeatmapSchemaError, BeatmapValidationError, BombEvent, Color,
    CutDirection, NoteEvent, ObstacleEvent, ObstacleKind, beats_to_seconds, derive_song_length,
    parse_beatmap, seconds_to_beats, serialize_beatmap, sort_events, validate_beatmap,
)

FIXTURES = Path(__file__).parent / "fixtures"
EXPECTED = json.loads((FIXTURES / "expected_beatmaps.json").read_text())


def test_minimal_document():
    bm = parse_beatmap('{"bpm": 120, "notes": [{"beat": 2, "column": 1, "row": 0, "color": 1, "cutDirection": 1}]}')
    assert (len(bm.notes), len(bm.bombs), len(bm.obstacles)) == (1, 0, 0)
    n = bm.notes[0]
    assert (n.beat, n.column, n.row, n.color, n.cut_direction) == (2, 1, 0, Color.Right, CutDirection.Down)


def test_empty_document():
    bm = parse_beatmap('{"bpm": 90}')
    assert bm.notes == () and bm.bombs == () and bm.obstacles == ()
    assert bm.song_length == 2.0


def test_column_out_of_range_names_event_and_field():
    with pytest.raises(BeatmapValidationError) as ei:
        parse_beatmap('{"bpm": 120, "notes": [{"beat": 1, "column": 4, "row": 0, "color": 0, "cutDirection": 0}]}')
    assert ei.value.index == 0 and ei.value.field == "column"


def test_parse_error_has_byte_offset():
    raw = '{"bpm": 120, "notes": [é'
    with pytest.raises(BeatmapParseError) as ei:
        parse_beatmap(raw)
    assert ei.value.offset == len('{"bpm": 120, "notes": ['.encode())


def test_missing_field_is_named():
    with pytest.raises(BeatmapSchemaError) as ei:
        parse_beatmap('{"bpm": 120, "bombs": [{"beat": 1, "row": 0}]}')
    assert ei.value.field == "bombs[0].column"


def test_song_length_derived_from_last_event():
    bm = parse_beatmap('{"bpm": 120, "bombs": [{"beat": 6, "column": 0, "row": 0}]}')
    assert bm.song_length == 3.0 + 2.0
    assert derive_song_length(bm) == 5.0


@pytest.mark.parametrize("beat,bpm,expected", [(2.0, 120, 1.0), (0.0, 90, 0.0), (1.0, 60, 1.0)])
def test_beats_to_seconds_cases(beat, bpm, expected):
    assert beats_to_seconds(beat, bpm) == expected


@pytest.mark.parametrize("bpm", [0, -10])
def test_beats_to_seconds_rejects_bad_bpm(bpm):
    with pytest.raises(ValueError):
        beats_to_seconds(1.0, bpm)
    with pytest.raises(ValueError):
        seconds_to_beats(1.0, bpm)


@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(1, 400), st.floats(0, 100))
def test_beats_to_seconds_is_linear(a, b, bpm, k):
    f = lambda x: beats_to_seconds(x, bpm)  # noqa: E731
    assert f(a + b) == pytest.approx(f(a) + f(b), rel=1e-12, abs=1e-300)
    assert f(k * a) == pytest.approx(k * f(a), rel=1e-12, abs=1e-300)


def _note(beat, col=0, row=0, color=Color.Left):
    return NoteEvent(beat, col, row, color, CutDirection.Down)


def test_sort_is_stable_on_ties():
    a, b, c = _note(2), _note(1, color=Color.Left), _note(1, color=Color.Right)
    out = sort_events(Beatmap(120, (a, b, c)))
    assert out.notes == (b, c, a)


def test_sort_breaks_ties_by_column_then_row():
    evs = (_note(1, 2, 0), _note(1, 0, 2), _note(1, 0, 1))
    assert [(n.column, n.row) for n in sort_events(Beatmap(120, evs)).notes] == [(0, 1), (0, 2), (2, 0)]


def test_sort_empty():
    assert sort_events(Beatmap(120)) == Beatmap(120)


event_beats = st.lists(st.tuples(st.integers(0, 16).map(lambda b: b / 2), st.integers(0, 3), st.integers(0, 2),
                                 st.integers(0, 1)), max_size=12)


@given(event_beats)
def test_sort_is_idempotent_permutation(spec):
    bm = Beatmap(120, tuple(NoteEvent(b, c, r, Color(k), CutDirection.Any) for b, c, r, k in spec), song_length=100)
    once = sort_events(bm)
    assert sort_events(once) == once
    assert sorted(map(repr, once.notes)) == sorted(map(repr, bm.notes))
    keys = [(n.beat, n.column, n.row) for n in once.notes]
    assert keys == sorted(keys)


def test_validate_cases():
    good = Beatmap(120, (_note(1),), song_length=5.0)
    assert validate_beatmap(good) == []
    wall = Beatmap(120, obstacles=(ObstacleEvent(1, 1, 3, 2, ObstacleKind.FullHeight),), song_length=5.0)
    assert [v.field for v in validate_beatmap(wall)] == ["width"]
    late = Beatmap(120, (_note(20),), song_length=5.0)
    assert len(validate_beatmap(late)) == 1


_PLANTS = {
    "note_column": lambda bm: bm.__class__(bm.bpm, (NoteEvent(1, 4, 0, Color.Left, CutDirection.Up),) + bm.notes[1:], bm.bombs, bm.obstacles, bm.song_length),
    "note_row": lambda bm: bm.__class__(bm.bpm, (NoteEvent(1, 0, 5, Color.Left, CutDirection.Up),) + bm.notes[1:], bm.bombs, bm.obstacles, bm.song_length),
    "bomb_column": lambda bm: bm.__class__(bm.bpm, bm.notes, (BombEvent(1, -1, 0),) + bm.bombs[1:], bm.obstacles, bm.song_length),
    "obstacle_duration": lambda bm: bm.__class__(bm.bpm, bm.notes, bm.bombs, (ObstacleEvent(1, -2, 0, 1, ObstacleKind.Crouch),) + bm.obstacles[1:], bm.song_length),
    "bpm": lambda bm: bm.__class__(-5, bm.notes, bm.bombs, bm.obstacles, bm.song_length),
    "song_length": lambda bm: bm.__class__(bm.bpm, bm.notes, bm.bombs, bm.obstacles, 0.0),
}


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.sampled_from(sorted(_PLANTS)))
def test_planted_single_violation_is_found(seed, plant):
    from beatpose.synthetic import random_beatmap

    bm = random_beatmap(seed, n_beats=16, bomb_rate=0.5, obstacle_rate=0.1)
    if not (bm.notes and bm.bombs and bm.obstacles):
        bm = Beatmap(bm.bpm, bm.notes or (_note(1),), bm.bombs or (BombEvent(1, 0, 0),),
                     bm.obstacles or (ObstacleEvent(1, 1, 0, 1, ObstacleKind.FullHeight),), bm.song_length)
        bm = sort_events(bm)
    assert validate_beatmap(bm) == []
    bad = sort_events(_PLANTS[plant](bm)) if plant not in ("bpm", "song_length") else _PLANTS[plant](bm)
    found = validate_beatmap(bad)
    # with song_length <= 0 the per-event time bound is not checked, so one violation remains
    assert len(found) == 1, found


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_fixture_corpus(name):
    raw = (FIXTURES / "beatmaps" / name).read_bytes()
    exp = EXPECTED[name]
    if exp["kind"] == "valid":
        bm = parse_beatmap(raw)
        assert validate_beatmap(bm) == []
        again = parse_beatmap(serialize_beatmap(bm))
        assert again == bm
        doc = json.loads(raw)
        assert len(bm.notes) == len(doc.get("notes", []))
        assert len(bm.bombs) == len(doc.get("bombs", []))
        assert len(bm.obstacles) == len(doc.get("obstacles", []))
    elif exp["kind"] == "violation":
        with pytest.raises(BeatmapValidationError) as ei:
            parse_beatmap(raw)
        assert len(ei.value.violations) == 1
        v = ei.value.violations[0]
        assert (v.category, v.index, v.field) == (exp["category"], exp["index"], exp["field"])
    elif exp["kind"] == "parse":
        with pytest.raises(BeatmapParseError):
            parse_beatmap(raw)
    else:
        with pytest.raises(BeatmapSchemaError) as ei:
            parse_beatmap(raw)
        assert ei.value.field == exp["field"]
