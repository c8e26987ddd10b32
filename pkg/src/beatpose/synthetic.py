"""Synthetic beatmaps and scripted player traces.

Used for fixtures, demos and the end-to-end pipeline when no recorded play
data is at hand. The scripted player swings the matching hand through every
note's cell along its cut direction, ducks under crouch walls and steps
around full-height ones. ``style`` changes swing size, speed and idle sway,
so different values give distinguishable performers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .beatmap import (
    Beatmap, BombEvent, Color, CutDirection, NoteEvent, ObstacleEvent, ObstacleKind,
    derive_song_length, sort_events,
)
from .context import DEFAULT_GEOMETRY, LaneGeometry
from .evaluation import cut_vector
from .pose import DEFAULT_RATE, PoseTrace, rest_pose, uniform_grid, yaw_quat, quat_mul, quat_normalize


@dataclass(frozen=True)
class PlayerStyle:
    swing_length: float = 0.5   # meters travelled through the cell
    swing_speed: float = 2.5    # m/s at the cell centre
    sway: float = 0.03          # idle head sway amplitude, meters
    sway_hz: float = 0.5
    hand_reach: float = 0.1     # forward offset of the hands from the cell centre

    @classmethod
    def preset(cls, name: str) -> "PlayerStyle":
        presets = {
            "calm": cls(),
            "energetic": cls(swing_length=0.8, swing_speed=3.5, sway=0.08, sway_hz=1.1, hand_reach=0.2),
            "lazy": cls(swing_length=0.35, swing_speed=1.6, sway=0.01, sway_hz=0.3, hand_reach=0.05),
        }
        return presets[name]


def random_beatmap(rng, n_beats: int = 64, bpm: float = 120.0, note_density: float = 0.6,
                   bomb_rate: float = 0.1, obstacle_rate: float = 0.04) -> Beatmap:
    """A playable random map on a half-beat grid."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    notes, bombs, obstacles = [], [], []
    last_hand_beat = {Color.Left: -10.0, Color.Right: -10.0}
    busy_until = -1.0
    for k in range(4, 2 * n_beats):
        beat = k / 2
        if beat < busy_until:
            continue
        u = rng.random()
        if u < obstacle_rate:
            width = int(rng.integers(1, 3))
            col = int(rng.integers(0, 4 - width + 1))
            obstacles.append(ObstacleEvent(beat, 1.0, col, width, ObstacleKind(int(rng.integers(0, 2)))))
            busy_until = beat + 2.0
            continue
        if u < obstacle_rate + note_density:
            color = Color(int(rng.integers(0, 2)))
            if beat - last_hand_beat[color] < 1.0:
                color = Color(1 - color)
            if beat - last_hand_beat[color] < 1.0:
                continue
            last_hand_beat[color] = beat
            col = int(rng.integers(0, 2)) + (2 if color == Color.Right else 0)
            notes.append(NoteEvent(beat, col, int(rng.integers(0, 3)), color,
                                   CutDirection(int(rng.integers(0, 9)))))
        elif rng.random() < bomb_rate:
            bombs.append(BombEvent(beat, int(rng.integers(0, 4)), int(rng.integers(0, 3))))
    bm = Beatmap(bpm, tuple(notes), tuple(bombs), tuple(obstacles))
    return sort_events(Beatmap(bpm, bm.notes, bm.bombs, bm.obstacles, derive_song_length(bm)))


def _hand_keys(beatmap: Beatmap, color: Color, rest, style: PlayerStyle, geometry: LaneGeometry):
    """Keyframes (time, position, velocity) for one hand."""
    keys = [(-1.0, rest, np.zeros(3))]
    for note in beatmap.notes:
        if note.color != color:
            continue
        t = beatmap.seconds(note.beat)
        centre = geometry.to_world(geometry.local_cell_center(note.column, note.row)
                                   + np.array([0.0, 0.0, style.hand_reach]))
        d = cut_vector(note.cut_direction)
        if d is None:
            d = np.array([0.0, -1.0, 0.0])
        d = geometry.to_world_vectors(d)
        half = style.swing_length / 2
        dt = half / style.swing_speed
        keys.append((t - dt, centre - d * half, d * style.swing_speed))
        keys.append((t + dt, centre + d * half, d * style.swing_speed * 0.5))
    keys.sort(key=lambda k: k[0])
    cleaned = [keys[0]]
    for k in keys[1:]:
        if k[0] - cleaned[-1][0] > 0.6:
            # drift back toward rest in long gaps
            mid = (cleaned[-1][0] + k[0]) / 2
            cleaned.append((mid, rest, np.zeros(3)))
        if k[0] > cleaned[-1][0] + 1e-3:
            cleaned.append(k)
    return cleaned


def _spline(keys, times):
    kt = np.array([k[0] for k in keys])
    kp = np.array([k[1] for k in keys])
    kv = np.array([k[2] for k in keys])
    return CubicHermiteSpline(kt, kp, kv, axis=0)(times)


def play_beatmap(beatmap: Beatmap, style: PlayerStyle = PlayerStyle(), rate: float = DEFAULT_RATE,
                 rng=None, geometry: LaneGeometry = DEFAULT_GEOMETRY, start: float = 0.0,
                 end: float | None = None) -> PoseTrace:
    """Scripted 3-point trace that plays ``beatmap`` in the given style."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    end = beatmap.song_length if end is None else end
    times = uniform_grid(start, end, rate)
    rest_p, rest_q = rest_pose()
    horizon = end + 2.0

    lh = _spline(_hand_keys(beatmap, Color.Left, rest_p[1], style, geometry) + [(horizon, rest_p[1], np.zeros(3))], times)
    rh = _spline(_hand_keys(beatmap, Color.Right, rest_p[2], style, geometry) + [(horizon, rest_p[2], np.zeros(3))], times)

    phase = rng.uniform(0, 2 * np.pi)
    head = np.tile(rest_p[0], (len(times), 1))
    head[:, 0] += style.sway * np.sin(2 * np.pi * style.sway_hz * times + phase)
    head[:, 1] += 0.5 * style.sway * np.sin(4 * np.pi * style.sway_hz * times + phase)
    for o in beatmap.obstacles:
        s = beatmap.seconds(o.beat)
        e = s + beatmap.seconds(o.duration)
        lo, ext = geometry.local_obstacle_box(o, e - s)
        # smooth bump that peaks while the wall is active
        w = np.clip(np.minimum(times - (s - 0.4), (e + 0.4) - times) / 0.4, 0.0, 1.0)
        w = w * w * (3 - 2 * w)
        if o.kind == ObstacleKind.Crouch:
            head[:, 1] -= w * (rest_p[0][1] - (lo[1] - 0.25))
        else:
            left_gap = lo[0] - 0.25
            right_gap = lo[0] + ext[0] + 0.25
            target = left_gap if abs(left_gap) < abs(right_gap) else right_gap
            head[:, 0] += w * (target - rest_p[0][0])

    positions = np.stack([head, lh, rh], axis=1)
    yaw = 0.15 * np.sin(2 * np.pi * style.sway_hz * 0.5 * times + phase)
    head_q = np.stack([yaw_quat(a) for a in yaw])
    rotations = np.empty((len(times), 3, 4))
    rotations[:, 0] = head_q
    for j, hand in ((1, lh), (2, rh)):
        vel = np.gradient(hand, times, axis=0)
        tilt = np.clip(vel[:, 0] * 0.3, -0.8, 0.8)
        pitch = np.clip(vel[:, 1] * 0.3, -0.8, 0.8)
        qa = np.stack([np.cos(tilt / 2), np.zeros_like(tilt), np.zeros_like(tilt), np.sin(tilt / 2)], -1)
        qb = np.stack([np.cos(pitch / 2), np.sin(pitch / 2), np.zeros_like(pitch), np.zeros_like(pitch)], -1)
        rotations[:, j] = quat_normalize(quat_mul(qa, qb))
    rotations[:, 0] = quat_normalize(rotations[:, 0])
    return PoseTrace(times, positions, rotations, float(rate))


def write_demo(out_dir, seed: int = 0, n_beats: int = 48, rate: float = DEFAULT_RATE) -> dict:
    """Write a small playable corpus: one beatmap, two performances and a manifest."""
    from pathlib import Path
    import json

    from .beatmap import serialize_beatmap
    from .pose import write_pose_trace

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    bm = random_beatmap(rng, n_beats=n_beats)
    (out / "beatmap.json").write_text(serialize_beatmap(bm) + "\n")
    for name, style in (("play.csv", "calm"), ("donor.csv", "energetic")):
        with open(out / name, "w", newline="", encoding="utf-8") as f:
            write_pose_trace(play_beatmap(bm, PlayerStyle.preset(style), rate, rng), f)
    manifest = {"pairs": [{"trace": "play.csv", "beatmap": "beatmap.json", "donor": "donor.csv"}]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


if __name__ == "__main__":
    import sys

    write_demo(sys.argv[1] if len(sys.argv) > 1 else "demo", int(sys.argv[2]) if len(sys.argv) > 2 else 0)
