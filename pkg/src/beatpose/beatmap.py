"""Beatmap parsing, validation and beat/time resolution.

The wire format is a single JSON object::

    {"bpm": 120, "songLength": 30.0,
     "notes": [{"beat": 2, "column": 1, "row": 0, "color": 1, "cutDirection": 1}],
     "bombs": [{"beat": 3, "column": 0, "row": 2}],
     "obstacles": [{"beat": 4, "duration": 1, "column": 0, "width": 2, "kind": 0}]}

The grid is fixed at 4 columns by 3 rows. Tempo is a single constant bpm.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Any, NamedTuple

N_COLUMNS = 4
N_ROWS = 3
SONG_TAIL_SECONDS = 2.0

# keys that would imply a tempo map; only constant tempo is supported
_TEMPO_MAP_KEYS = ("bpmChanges", "bpmEvents", "tempoChanges")


class Color(enum.IntEnum):
    Left = 0
    Right = 1


class CutDirection(enum.IntEnum):
    Up = 0
    Down = 1
    Left = 2
    Right = 3
    UpLeft = 4
    UpRight = 5
    DownLeft = 6
    DownRight = 7
    Any = 8


class ObstacleKind(enum.IntEnum):
    FullHeight = 0
    Crouch = 1


@dataclass(frozen=True)
class NoteEvent:
    beat: float
    column: int
    row: int
    color: Color
    cut_direction: CutDirection


@dataclass(frozen=True)
class BombEvent:
    beat: float
    column: int
    row: int


@dataclass(frozen=True)
class ObstacleEvent:
    beat: float
    duration: float
    column: int
    width: int
    kind: ObstacleKind


@dataclass(frozen=True)
class Beatmap:
    bpm: float
    notes: tuple[NoteEvent, ...] = ()
    bombs: tuple[BombEvent, ...] = ()
    obstacles: tuple[ObstacleEvent, ...] = ()
    song_length: float = SONG_TAIL_SECONDS

    def seconds(self, beat: float) -> float:
        return beats_to_seconds(beat, self.bpm)


class Violation(NamedTuple):
    """One broken invariant. ``index`` is None for map-level rules."""

    category: str
    index: int | None
    field: str
    rule: str

    def __str__(self) -> str:
        where = self.category if self.index is None else f"{self.category}[{self.index}]"
        return f"{where}.{self.field}: {self.rule}"


class BeatmapError(ValueError):
    pass


class BeatmapParseError(BeatmapError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class BeatmapSchemaError(BeatmapError):
    def __init__(self, field: str, msg: str = "missing required field"):
        super().__init__(f"{msg}: {field}")
        self.field = field


class BeatmapValidationError(BeatmapError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        first = self.violations[0]
        super().__init__(
            f"{len(self.violations)} violation(s); first: {first}"
        )

    @property
    def index(self) -> int | None:
        return self.violations[0].index

    @property
    def field(self) -> str:
        return self.violations[0].field


def beats_to_seconds(beat: float, bpm: float) -> float:
    if not bpm > 0:
        raise ValueError(f"bpm must be positive, got {bpm!r}")
    return beat * 60.0 / bpm


def seconds_to_beats(seconds: float, bpm: float) -> float:
    if not bpm > 0:
        raise ValueError(f"bpm must be positive, got {bpm!r}")
    return seconds * bpm / 60.0


def _event_key(e) -> tuple[float, int, int]:
    return (e.beat, e.column, getattr(e, "row", 0))


def sort_events(beatmap: Beatmap) -> Beatmap:
    """Sort every event list by (beat, column, row); ties keep declaration order."""
    return Beatmap(
        bpm=beatmap.bpm,
        notes=tuple(sorted(beatmap.notes, key=_event_key)),
        bombs=tuple(sorted(beatmap.bombs, key=_event_key)),
        obstacles=tuple(sorted(beatmap.obstacles, key=_event_key)),
        song_length=beatmap.song_length,
    )


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v: Any) -> bool:
    if isinstance(v, bool):
        return False
    return isinstance(v, int) or (isinstance(v, float) and v.is_integer())


def _check_cell(out, cat, i, e):
    if not (_is_int(e.column) and 0 <= e.column < N_COLUMNS):
        out.append(Violation(cat, i, "column", f"column must be in [0,{N_COLUMNS - 1}]"))
    if not (_is_int(e.row) and 0 <= e.row < N_ROWS):
        out.append(Violation(cat, i, "row", f"row must be in [0,{N_ROWS - 1}]"))


def _check_beat(out, cat, i, e, bpm, song_length):
    if not (_is_number(e.beat) and e.beat >= 0):
        out.append(Violation(cat, i, "beat", "beat must be >= 0"))
    elif bpm is not None and song_length is not None:
        if beats_to_seconds(e.beat, bpm) > song_length:
            out.append(Violation(cat, i, "beat", "event time exceeds song_length"))


def _check_sorted(out, cat, events):
    for i in range(1, len(events)):
        if _event_key(events[i]) < _event_key(events[i - 1]):
            out.append(Violation(cat, i, "beat", "events not sorted by (beat, column, row)"))
            return


def validate_beatmap(beatmap: Beatmap) -> list[Violation]:
    """Return every invariant violation; an empty list means the map is valid."""
    out: list[Violation] = []
    bpm = beatmap.bpm if _is_number(beatmap.bpm) and beatmap.bpm > 0 else None
    if bpm is None:
        out.append(Violation("map", None, "bpm", "bpm must be > 0"))
    song = beatmap.song_length if _is_number(beatmap.song_length) and beatmap.song_length > 0 else None
    if song is None:
        out.append(Violation("map", None, "song_length", "song_length must be > 0"))

    for i, e in enumerate(beatmap.notes):
        _check_beat(out, "notes", i, e, bpm, song)
        _check_cell(out, "notes", i, e)
        if not isinstance(e.color, Color):
            out.append(Violation("notes", i, "color", "color must be 0 (Left) or 1 (Right)"))
        if not isinstance(e.cut_direction, CutDirection):
            out.append(Violation("notes", i, "cut_direction", "cut direction must be in [0,8]"))
    for i, e in enumerate(beatmap.bombs):
        _check_beat(out, "bombs", i, e, bpm, song)
        _check_cell(out, "bombs", i, e)
    for i, e in enumerate(beatmap.obstacles):
        _check_beat(out, "obstacles", i, e, bpm, song)
        col_ok = _is_int(e.column) and 0 <= e.column < N_COLUMNS
        width_ok = _is_int(e.width) and e.width >= 1
        if not col_ok:
            out.append(Violation("obstacles", i, "column", f"column must be in [0,{N_COLUMNS - 1}]"))
        if not width_ok:
            out.append(Violation("obstacles", i, "width", "width must be >= 1"))
        if col_ok and width_ok and e.column + e.width > N_COLUMNS:
            out.append(Violation("obstacles", i, "width", f"column + width must be <= {N_COLUMNS}"))
        if not (_is_number(e.duration) and e.duration > 0):
            out.append(Violation("obstacles", i, "duration", "duration must be > 0"))
        if not isinstance(e.kind, ObstacleKind):
            out.append(Violation("obstacles", i, "kind", "kind must be 0 (FullHeight) or 1 (Crouch)"))

    _check_sorted(out, "notes", beatmap.notes)
    _check_sorted(out, "bombs", beatmap.bombs)
    _check_sorted(out, "obstacles", beatmap.obstacles)
    return out


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise BeatmapSchemaError(f"{path}.{key}" if path else key)
    return obj[key]


def _enum_or_raw(enum_cls, value):
    try:
        return enum_cls(value)
    except ValueError:
        return value


def _decode_events(doc: dict, key: str) -> list[dict]:
    items = doc.get(key, [])
    if not isinstance(items, list):
        raise BeatmapSchemaError(key, "expected an array")
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise BeatmapSchemaError(f"{key}[{i}]", "expected an object")
    return items


def parse_beatmap(raw: str | bytes) -> Beatmap:
    """Parse the JSON wire format into a sorted, validated :class:`Beatmap`.

    Raises
    ------
    BeatmapParseError
        Malformed JSON; carries the byte offset of the failure.
    BeatmapSchemaError
        A required field is missing or has the wrong container type.
    BeatmapValidationError
        A value breaks an invariant; carries every violation found.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(raw[: exc.pos].encode("utf-8"))
        raise BeatmapParseError(exc.msg, offset) from None
    if not isinstance(doc, dict):
        raise BeatmapSchemaError("<root>", "expected a JSON object")

    bpm = _require(doc, "bpm", "")
    for key in _TEMPO_MAP_KEYS:
        if doc.get(key):
            raise BeatmapValidationError(
                [Violation("map", None, key, "variable tempo is not supported")]
            )

    notes = []
    for i, n in enumerate(_decode_events(doc, "notes")):
        notes.append(NoteEvent(
            beat=_require(n, "beat", f"notes[{i}]"),
            column=_require(n, "column", f"notes[{i}]"),
            row=_require(n, "row", f"notes[{i}]"),
            color=_enum_or_raw(Color, _require(n, "color", f"notes[{i}]")),
            cut_direction=_enum_or_raw(CutDirection, _require(n, "cutDirection", f"notes[{i}]")),
        ))
    bombs = []
    for i, b in enumerate(_decode_events(doc, "bombs")):
        bombs.append(BombEvent(
            beat=_require(b, "beat", f"bombs[{i}]"),
            column=_require(b, "column", f"bombs[{i}]"),
            row=_require(b, "row", f"bombs[{i}]"),
        ))
    obstacles = []
    for i, o in enumerate(_decode_events(doc, "obstacles")):
        obstacles.append(ObstacleEvent(
            beat=_require(o, "beat", f"obstacles[{i}]"),
            duration=_require(o, "duration", f"obstacles[{i}]"),
            column=_require(o, "column", f"obstacles[{i}]"),
            width=_require(o, "width", f"obstacles[{i}]"),
            kind=_enum_or_raw(ObstacleKind, _require(o, "kind", f"obstacles[{i}]")),
        ))

    # Violations are reported against declaration indices, so validate
    # the unsorted lists first (with the ordering rule disabled).
    song_length = doc.get("songLength")
    provisional = Beatmap(
        bpm=bpm,
        notes=tuple(notes),
        bombs=tuple(bombs),
        obstacles=tuple(obstacles),
        song_length=song_length if song_length is not None else float("inf"),
    )
    violations = [v for v in validate_beatmap(provisional) if "not sorted" not in v.rule]
    if song_length is None and not violations:
        song_length = derive_song_length(provisional)
    if violations:
        raise BeatmapValidationError(violations)

    return sort_events(Beatmap(
        bpm=bpm,
        notes=tuple(notes),
        bombs=tuple(bombs),
        obstacles=tuple(obstacles),
        song_length=song_length,
    ))


def derive_song_length(beatmap: Beatmap) -> float:
    """Last event time plus a fixed tail, used when the file omits songLength."""
    beats = [e.beat for e in (*beatmap.notes, *beatmap.bombs, *beatmap.obstacles)]
    last = max(beats, default=0.0)
    return beats_to_seconds(last, beatmap.bpm) + SONG_TAIL_SECONDS


def beatmap_to_dict(beatmap: Beatmap) -> dict:
    return {
        "bpm": beatmap.bpm,
        "songLength": beatmap.song_length,
        "notes": [
            {"beat": n.beat, "column": n.column, "row": n.row,
             "color": int(n.color), "cutDirection": int(n.cut_direction)}
            for n in beatmap.notes
        ],
        "bombs": [{"beat": b.beat, "column": b.column, "row": b.row} for b in beatmap.bombs],
        "obstacles": [
            {"beat": o.beat, "duration": o.duration, "column": o.column,
             "width": o.width, "kind": int(o.kind)}
            for o in beatmap.obstacles
        ],
    }


def serialize_beatmap(beatmap: Beatmap) -> str:
    return json.dumps(beatmap_to_dict(beatmap), indent=2)


def load_beatmap(path) -> Beatmap:
    with open(path, "rb") as f:
        return parse_beatmap(f.read())
