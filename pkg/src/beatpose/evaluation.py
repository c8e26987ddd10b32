"""Geometric scoring of a pose trace against a beatmap, plus style and smoothness metrics.

The trace is read as piecewise linear between frames, so each frame interval
carries one constant velocity. Contacts are judged at ``substeps`` fixed
instants per interval, ``(m + 0.5) / substeps`` of the way along it. Each
event looks at the frames inside its timing window and the intervals joining
them:

* a note counts an instant when the matching hand is strictly inside the cell
  box; the best such instant decides the outcome (Hit, then WrongDirection,
  then TooSlow, else Miss)
* a bomb is touched when either hand is strictly closer than ``bomb_radius``
  to the cell centre at some instant
* a wall is hit when the head sphere overlaps the moving wall box at some instant

The scorer solves each condition for the interval of times where it holds
and then checks which instants fall inside; :func:`oracle_score` evaluates
every instant directly. A window holding fewer than two frames tests nothing.
All tests run in lane coordinates, so moving the lanes and the player
together does not change the result.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .beatmap import Beatmap, Color, CutDirection
from .context import DEFAULT_GEOMETRY, LaneGeometry
from .model import encode_style
from .pose import FEATURES_PER_FRAME, PoseTrace, canonicalize_window, jerk_metric

REPORT_HEADER = ("proxy evaluation: geometric hit/bomb/wall checks and latent style distance; "
                 "not a reproduction of any published metric")
_TIME_TOL = 1e-9
_S = math.sqrt(0.5)
_CUTS = {
    CutDirection.Up: (0.0, 1.0), CutDirection.Down: (0.0, -1.0),
    CutDirection.Left: (-1.0, 0.0), CutDirection.Right: (1.0, 0.0),
    CutDirection.UpLeft: (-_S, _S), CutDirection.UpRight: (_S, _S),
    CutDirection.DownLeft: (-_S, -_S), CutDirection.DownRight: (_S, -_S),
}
_HAND = {Color.Left: 1, Color.Right: 2}


def cut_vector(direction) -> np.ndarray | None:
    """Unit hand-motion direction in lane coordinates; ``None`` for Any."""
    d = _CUTS.get(CutDirection(direction))
    return None if d is None else np.array([d[0], d[1], 0.0])


class CoverageError(ValueError):
    def __init__(self, missing: dict[str, list[int]]):
        parts = [f"{cat} {idx}" for cat, idx in missing.items() if idx]
        super().__init__("trace does not cover the timing window of " + "; ".join(parts))
        self.missing = missing


class Outcome(str, enum.Enum):
    Hit = "hit"
    WrongDirection = "wrong_direction"
    TooSlow = "too_slow"
    Miss = "miss"


@dataclass(frozen=True)
class ScoringGeometry:
    hit_window: float = 0.20
    min_hand_speed: float = 1.0
    direction_cos_min: float = 0.5
    bomb_radius: float = 0.15
    head_radius: float = 0.10
    substeps: int = 10
    lanes: LaneGeometry = DEFAULT_GEOMETRY

    def validate(self):
        for name in ("hit_window", "min_hand_speed", "bomb_radius", "head_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        if not 0 < self.direction_cos_min <= 1:
            raise ValueError("direction_cos_min must be in (0, 1]")
        return self

    @property
    def cell_half_extent(self) -> np.ndarray:
        return self.lanes.cell_half_extent


@dataclass
class HitReport:
    outcomes: list[Outcome]
    bomb_touches: int = 0
    obstacle_collisions: int = 0
    jerk: float = 0.0
    style_distance: float | None = None
    note_times: list[float] = field(default_factory=list)
    bombs_touched: list[bool] = field(default_factory=list)
    obstacles_hit: list[bool] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        return self.counts()["hit"] / max(1, len(self.outcomes))

    def counts(self) -> dict[str, int]:
        out = {o.value: 0 for o in Outcome}
        for o in self.outcomes:
            out[o.value] += 1
        return out


# --------------------------------------------------------------------------
# windows and coverage
# --------------------------------------------------------------------------

def _frames_within(times, lo, hi):
    i0 = int(np.searchsorted(times, lo - _TIME_TOL, side="left"))
    i1 = int(np.searchsorted(times, hi + _TIME_TOL, side="right")) - 1
    return i0, i1


def _covers(times, lo, hi, song_length):
    lo, hi = max(lo, 0.0), min(hi, song_length)
    return len(times) > 0 and times[0] <= lo + _TIME_TOL and times[-1] >= hi - _TIME_TOL


def _event_windows(trace, beatmap, geom):
    """Frame ranges per category plus the indices the trace fails to cover."""
    hw = geom.hit_window
    windows, missing = {}, {"notes": [], "bombs": [], "obstacles": []}
    for cat, events in (("notes", beatmap.notes), ("bombs", beatmap.bombs)):
        ranges = []
        for i, e in enumerate(events):
            t = beatmap.seconds(e.beat)
            if not _covers(trace.times, t - hw, t + hw, beatmap.song_length):
                missing[cat].append(i)
            ranges.append(_frames_within(trace.times, t - hw, t + hw))
        windows[cat] = ranges
    ranges = []
    for i, o in enumerate(beatmap.obstacles):
        s = beatmap.seconds(o.beat)
        e = s + beatmap.seconds(o.duration)
        if not _covers(trace.times, s, e, beatmap.song_length):
            missing["obstacles"].append(i)
        ranges.append(_frames_within(trace.times, s, e))
    windows["obstacles"] = ranges
    return windows, missing


def _lane_positions(trace, geom):
    return geom.lanes.placement.apply_points(np.asarray(trace.positions, dtype=float))


def _require_uniform(trace):
    if len(trace) > 1:
        dt = np.diff(trace.times)
        if np.any(np.abs(dt - 1.0 / trace.rate) > 1e-6):
            raise ValueError("scoring needs a uniform-rate trace")


# --------------------------------------------------------------------------
# per-segment interval tests
# --------------------------------------------------------------------------

def _lattice(substeps):
    return (np.arange(substeps) + 0.5) / substeps


def _any_on_lattice(us, lo, hi, closed=(-math.inf, math.inf)):
    """True if some lattice point u satisfies lo < u < hi and closed[0] <= u <= closed[1]."""
    return any(lo < u < hi and closed[0] <= u <= closed[1] for u in us)


def _box_interval(a, b, centre, half):
    """Open interval of u where a + u (b - a) is strictly inside the box, or None."""
    lo_u, hi_u = -math.inf, math.inf
    d = b - a
    for k in range(3):
        if d[k] == 0.0:
            if not abs(a[k] - centre[k]) < half[k]:
                return None
            continue
        u0 = (centre[k] - half[k] - a[k]) / d[k]
        u1 = (centre[k] + half[k] - a[k]) / d[k]
        if u0 > u1:
            u0, u1 = u1, u0
        lo_u, hi_u = max(lo_u, u0), min(hi_u, u1)
    return (lo_u, hi_u) if lo_u < hi_u else None


def _quadratic_below(qa, qb, qc):
    """Open interval where qa u^2 + qb u + qc < 0 (qa >= 0), or None."""
    if qa == 0.0:
        if qb == 0.0:
            return (-math.inf, math.inf) if qc < 0 else None
        root = -qc / qb
        return (-math.inf, root) if qb > 0 else (root, math.inf)
    disc = qb * qb - 4.0 * qa * qc
    if disc <= 0.0:
        return None
    sq = math.sqrt(disc)
    return ((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa))


def _sphere_touch(a, b, c, r2, us):
    d = b - a
    e = a - c
    iv = _quadratic_below(float(d @ d), 2.0 * float(d @ e), float(e @ e) - r2)
    return iv is not None and _any_on_lattice(us, *iv)


def _box_pieces(a, b, lo, hi):
    """Split [0, 1] where the squared distance to the box changes formula.

    Yields (u0, u1, qa, qb, qc) with distance^2 = qa u^2 + qb u + qc on [u0, u1].
    """
    d = b - a
    cuts = [0.0, 1.0]
    for k in range(3):
        if d[k] != 0.0:
            for bound in (lo[k], hi[k]):
                u = (bound - a[k]) / d[k]
                if 0.0 < u < 1.0:
                    cuts.append(u)
    cuts.sort()
    for u0, u1 in zip(cuts[:-1], cuts[1:]):
        mid = a + 0.5 * (u0 + u1) * d
        qa = qb = qc = 0.0
        for k in range(3):
            if mid[k] < lo[k]:
                off = a[k] - lo[k]
            elif mid[k] > hi[k]:
                off = a[k] - hi[k]
            else:
                continue
            qa += d[k] * d[k]
            qb += 2.0 * off * d[k]
            qc += off * off
        yield u0, u1, qa, qb, qc


def _box_touch(a, b, lo, hi, r2, us):
    for u0, u1, qa, qb, qc in _box_pieces(a, b, lo, hi):
        iv = _quadratic_below(qa, qb, qc - r2)
        if iv is not None and _any_on_lattice(us, *iv, closed=(u0, u1)):
            return True
    return False


def _classify(flags: list[tuple[float, float | None]], geom) -> Outcome:
    """flags: (speed, cos or None) for every segment or sample where the hand is inside."""
    if not flags:
        return Outcome.Miss
    fast = [c for s, c in flags if s >= geom.min_hand_speed]
    if any(c is None or c >= geom.direction_cos_min for c in fast):
        return Outcome.Hit
    return Outcome.WrongDirection if fast else Outcome.TooSlow


def _velocity_flags(vel, required):
    speed = float(np.linalg.norm(vel))
    if required is None:
        return speed, None
    return speed, (float(vel @ required) / speed if speed > 0 else -1.0)


# --------------------------------------------------------------------------
# public scoring
# --------------------------------------------------------------------------

def _note_outcomes(trace, beatmap, geom, pos, windows):
    dt = 1.0 / trace.rate
    half = geom.cell_half_extent
    us = _lattice(geom.substeps)
    out = []
    for note, (i0, i1) in zip(beatmap.notes, windows):
        hand = _HAND[Color(note.color)]
        centre = geom.lanes.local_cell_center(note.column, note.row)
        required = cut_vector(note.cut_direction)
        flags = []
        for k in range(i0, i1):
            a, b = pos[k, hand], pos[k + 1, hand]
            iv = _box_interval(a, b, centre, half)
            if iv is not None and _any_on_lattice(us, *iv):
                flags.append(_velocity_flags((b - a) / dt, required))
        out.append(_classify(flags, geom))
    return out


def _bomb_flags(beatmap, geom, pos, windows):
    r2 = geom.bomb_radius ** 2
    us = _lattice(geom.substeps)
    out = []
    for bomb, (i0, i1) in zip(beatmap.bombs, windows):
        c = geom.lanes.local_cell_center(bomb.column, bomb.row)
        out.append(any(_sphere_touch(pos[k, hand], pos[k + 1, hand], c, r2, us)
                       for hand in (1, 2) for k in range(i0, i1)))
    return out


def _wall_at(beatmap, geom, o):
    s = beatmap.seconds(o.beat)
    lo, ext = geom.lanes.local_obstacle_box(o, beatmap.seconds(o.duration))
    return s, lo, lo + ext


def _obstacle_flags(trace, beatmap, geom, pos, windows):
    r2 = geom.head_radius ** 2
    v = geom.lanes.beam_speed
    us = _lattice(geom.substeps)
    out = []
    for o, (i0, i1) in zip(beatmap.obstacles, windows):
        s, lo, hi = _wall_at(beatmap, geom, o)
        hit = False
        for k in range(i0, i1):
            # follow the head in the wall's frame, where the wall stands still
            a = pos[k, 0] + np.array([0.0, 0.0, (trace.times[k] - s) * v])
            b = pos[k + 1, 0] + np.array([0.0, 0.0, (trace.times[k + 1] - s) * v])
            if _box_touch(a, b, lo, hi, r2, us):
                hit = True
                break
        out.append(hit)
    return out


def _prepare(trace, beatmap, geom):
    geom.validate()
    _require_uniform(trace)
    windows, missing = _event_windows(trace, beatmap, geom)
    if any(missing.values()):
        raise CoverageError(missing)
    return windows, _lane_positions(trace, geom)


def check_bombs(trace: PoseTrace, beatmap: Beatmap, geom: ScoringGeometry = ScoringGeometry()) -> int:
    windows, pos = _prepare(trace, beatmap, geom)
    return sum(_bomb_flags(beatmap, geom, pos, windows["bombs"]))


def check_obstacles(trace: PoseTrace, beatmap: Beatmap, geom: ScoringGeometry = ScoringGeometry()) -> int:
    windows, pos = _prepare(trace, beatmap, geom)
    return sum(_obstacle_flags(trace, beatmap, geom, pos, windows["obstacles"]))


def score_hits(trace: PoseTrace, beatmap: Beatmap, geom: ScoringGeometry = ScoringGeometry()) -> HitReport:
    """Full geometric report: per-note outcomes, bomb touches, wall collisions, jerk."""
    windows, pos = _prepare(trace, beatmap, geom)
    bombs = _bomb_flags(beatmap, geom, pos, windows["bombs"])
    walls = _obstacle_flags(trace, beatmap, geom, pos, windows["obstacles"])
    return HitReport(
        outcomes=_note_outcomes(trace, beatmap, geom, pos, windows["notes"]),
        bomb_touches=sum(bombs),
        obstacle_collisions=sum(walls),
        jerk=jerk_metric(trace) if len(trace) >= 4 else 0.0,
        note_times=[beatmap.seconds(n.beat) for n in beatmap.notes],
        bombs_touched=bombs,
        obstacles_hit=walls,
    )


# --------------------------------------------------------------------------
# dense sampling reference
# --------------------------------------------------------------------------

def oracle_score(trace: PoseTrace, beatmap: Beatmap, geom: ScoringGeometry = ScoringGeometry()
                 ) -> tuple[list[Outcome], int, int]:
    """Brute-force check at ``geom.substeps`` samples per frame interval, pointwise.

    Samples sit at ``(m + 0.5)/substeps`` of each interval; velocity is a
    central difference of the interpolated trajectory around each sample.
    """
    windows, pos = _prepare(trace, beatmap, geom)
    dt = 1.0 / trace.rate
    h = 0.5 / geom.substeps
    us = _lattice(geom.substeps)
    half = geom.cell_half_extent

    def samples(i0, i1, joint):
        for k in range(i0, i1):
            a, b = pos[k, joint], pos[k + 1, joint]
            for u in us:
                p = a + u * (b - a)
                vel = ((a + (u + h) * (b - a)) - (a + (u - h) * (b - a))) / (2 * h * dt)
                yield trace.times[k] + u * dt, p, vel

    outcomes = []
    for note, (i0, i1) in zip(beatmap.notes, windows["notes"]):
        centre = geom.lanes.local_cell_center(note.column, note.row)
        required = cut_vector(note.cut_direction)
        flags = [_velocity_flags(vel, required) for _, p, vel in samples(i0, i1, _HAND[Color(note.color)])
                 if np.all(np.abs(p - centre) < half)]
        outcomes.append(_classify(flags, geom))

    bombs = 0
    for bomb, (i0, i1) in zip(beatmap.bombs, windows["bombs"]):
        c = geom.lanes.local_cell_center(bomb.column, bomb.row)
        bombs += any(float((p - c) @ (p - c)) < geom.bomb_radius ** 2
                     for hand in (1, 2) for _, p, _ in samples(i0, i1, hand))

    walls = 0
    v = geom.lanes.beam_speed
    for o, (i0, i1) in zip(beatmap.obstacles, windows["obstacles"]):
        s, lo, hi = _wall_at(beatmap, geom, o)
        hit = False
        for t, p, _ in samples(i0, i1, 0):
            shift = (t - s) * v
            nearest = np.clip(p, [lo[0], lo[1], lo[2] - shift], [hi[0], hi[1], hi[2] - shift])
            if float((p - nearest) @ (p - nearest)) < geom.head_radius ** 2:
                hit = True
                break
        walls += hit
    return outcomes, bombs, walls


# --------------------------------------------------------------------------
# style and reporting
# --------------------------------------------------------------------------

def style_distance(trace: PoseTrace, refs, params) -> float:
    """Mean squared latent distance of consecutive ``T``-frame windows to the refs' style latent."""
    T = params["estyle.w1"].shape[0] // FEATURES_PER_FRAME
    if len(trace) < T:
        raise ValueError(f"trace has {len(trace)} frames; style distance needs at least T={T}")
    z_ref = encode_style(params, refs)
    windows = np.stack([canonicalize_window(trace.slice(k * T, (k + 1) * T))[0].features()
                        for k in range(len(trace) // T)])
    z = encode_style(params, windows[:, None])
    return float(np.mean(np.sum((z - z_ref) ** 2, axis=-1)))


def report_dict(report: HitReport, config: dict | None = None, inputs: dict | None = None) -> dict:
    return {
        "header": REPORT_HEADER,
        "hit_rate": report.hit_rate,
        "n_notes": len(report.outcomes),
        "outcomes": report.counts(),
        "notes": [{"time": t, "outcome": o.value} for t, o in zip(report.note_times, report.outcomes)],
        "bomb_touches": int(report.bomb_touches),
        "obstacle_collisions": int(report.obstacle_collisions),
        "jerk": float(report.jerk),
        "style_distance": None if report.style_distance is None else float(report.style_distance),
        "config": config or {},
        "inputs": inputs or {},
    }


def report_json(report: HitReport, config: dict | None = None, inputs: dict | None = None) -> str:
    return json.dumps(report_dict(report, config, inputs), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report: HitReport, json_path, plot_dir=None, config: dict | None = None,
                inputs: dict | None = None, trace: PoseTrace | None = None) -> list[Path]:
    """Write the JSON report and, with ``plot_dir``, three PNG plots. Returns written paths."""
    json_path = Path(json_path)
    json_path.write_text(report_json(report, config, inputs))
    written = [json_path]
    if plot_dir is not None:
        written += _plots(report, Path(plot_dir), trace)
    return written


def _plots(report: HitReport, plot_dir: Path, trace: PoseTrace | None) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    order = list(Outcome)
    paths = []

    fig, ax = plt.subplots(figsize=(8, 2.5))
    ys = [order.index(o) for o in report.outcomes]
    ax.scatter(report.note_times, ys, s=12)
    ax.set_yticks(range(len(order)), [o.value for o in order])
    ax.set_xlabel("time (s)")
    ax.set_title("note outcomes over time")
    paths.append(_save(fig, plot_dir / "hit_timeline.png", plt))

    fig, ax = plt.subplots(figsize=(8, 3))
    counts = report.counts()
    labels = [f"note:{o.value}" for o in order]
    values = [counts[o.value] for o in order]
    labels += ["bomb:touched", "bomb:clear", "wall:collided", "wall:clear"]
    values += [sum(report.bombs_touched), len(report.bombs_touched) - sum(report.bombs_touched),
               sum(report.obstacles_hit), len(report.obstacles_hit) - sum(report.obstacles_hit)]
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(values)), labels, rotation=30, ha="right", fontsize=7)
    ax.set_title("outcomes per category")
    paths.append(_save(fig, plot_dir / "outcome_histogram.png", plt))

    fig, ax = plt.subplots(figsize=(8, 2.5))
    if trace is not None and len(trace) >= 4:
        p = np.asarray(trace.positions, dtype=float)
        d3 = (p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]) * trace.rate ** 3
        ax.plot(trace.times[:-3] + 1.5 / trace.rate, np.linalg.norm(d3, axis=-1).mean(axis=1))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("jerk (m/s^3)")
    ax.set_title("jerk over time")
    paths.append(_save(fig, plot_dir / "jerk_over_time.png", plt))
    return paths


def _save(fig, path, plt):
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def geometry_dict(geom: ScoringGeometry) -> dict:
    return asdict(geom)
