"""Game-context features and aligned training examples.

Events are placed on a fixed lane grid in front of the player; every spatial
feature is expressed in the canonical frame of the pose history it is paired
with, so a rigidly moved player sees the same numbers.
"""
from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .beatmap import Beatmap, NoteEvent, BombEvent, ObstacleEvent, ObstacleKind, load_beatmap
from .pose import (
    DEFAULT_RATE, FEATURES_PER_FRAME, AnchorTransform, PoseTrace, PoseWindow,
    apply_anchor, canonicalize_window, load_pose_trace, resample,
)

NOTE_FEATURES = 15
BOMB_FEATURES = 4
OBSTACLE_FEATURES = 8
CATEGORIES = ("notes", "bombs", "obstacles")
CATEGORY_WIDTHS = {"notes": NOTE_FEATURES, "bombs": BOMB_FEATURES, "obstacles": OBSTACLE_FEATURES}
RECORD_LAYOUT_VERSION = 1
_TIME_EPS = 1e-9


class WindowError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class LaneGeometry:
    column_x: tuple[float, ...] = (-0.9, -0.3, 0.3, 0.9)
    row_y: tuple[float, ...] = (0.8, 1.2, 1.6)
    cell_width: float = 0.6
    cell_height: float = 0.4
    cell_depth: float = 0.6
    z_spawn: float = 0.0
    beam_speed: float = 4.0
    wall_top: float = 2.0
    crouch_bottom: float = 1.2
    # where the lane grid sits in the world: yaw about +y, then horizontal offset
    placement_yaw: float = 0.0
    placement_xz: tuple[float, float] = (0.0, 0.0)

    @property
    def placement(self) -> AnchorTransform:
        """World-to-lane transform (lane coordinates are the grid's own frame)."""
        x, z = self.placement_xz
        return AnchorTransform(-self.placement_yaw, (-x, -z))

    def to_world(self, p) -> np.ndarray:
        return self.placement.invert_points(p)

    def to_world_vectors(self, v) -> np.ndarray:
        return self.placement.invert_vectors(v)

    def cell_center(self, column: int, row: int) -> np.ndarray:
        """Cell centre in world coordinates."""
        return self.to_world(self.local_cell_center(column, row))

    def local_cell_center(self, column: int, row: int) -> np.ndarray:
        return np.array([self.column_x[column], self.row_y[row], self.z_spawn])

    @property
    def cell_half_extent(self) -> np.ndarray:
        return np.array([self.cell_width, self.cell_height, self.cell_depth]) / 2

    def local_obstacle_box(self, e: ObstacleEvent, duration_s: float) -> tuple[np.ndarray, np.ndarray]:
        """Min corner and extent of a wall at its start time, lane coordinates."""
        y0 = 0.0 if e.kind == ObstacleKind.FullHeight else self.crouch_bottom
        lo = np.array([self.column_x[e.column] - self.cell_width / 2, y0, self.z_spawn])
        extent = np.array([e.width * self.cell_width, self.wall_top - y0, duration_s * self.beam_speed])
        return lo, extent

    def obstacle_box(self, e: ObstacleEvent, duration_s: float) -> tuple[np.ndarray, np.ndarray]:
        """World min corner and world-frame extent (box diagonal) of a wall."""
        lo, extent = self.local_obstacle_box(e, duration_s)
        return self.to_world(lo), self.to_world_vectors(extent)


DEFAULT_GEOMETRY = LaneGeometry()


@dataclass(frozen=True)
class ContextConfig:
    h: int = 15
    T: int = 30
    n: int = 4
    horizon: float = 2.0
    n_ref: int = 4
    rate: float = DEFAULT_RATE

    def validate(self):
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.n_ref < 1:
            raise ValueError("n_ref must be >= 1")
        if not self.rate > 0:
            raise ValueError("rate must be > 0")
        return self


@dataclass(frozen=True)
class GameContext:
    query_time: float
    notes: np.ndarray
    notes_mask: np.ndarray
    bombs: np.ndarray
    bombs_mask: np.ndarray
    obstacles: np.ndarray
    obstacles_mask: np.ndarray

    @property
    def n(self) -> int:
        return len(self.notes_mask)

    def features(self) -> np.ndarray:
        """Flat game feature vector (rows followed by masks, per category)."""
        parts = []
        for cat in CATEGORIES:
            parts += [getattr(self, cat).ravel(), getattr(self, cat + "_mask")]
        return np.concatenate(parts)


@dataclass(frozen=True)
class StyleReferenceSet:
    refs: tuple[PoseWindow, ...]
    starts: tuple[int, ...] = ()

    def __len__(self):
        return len(self.refs)

    def features(self) -> np.ndarray:
        """Shape (N_ref, T, 27)."""
        return np.stack([r.features() for r in self.refs])


@dataclass(frozen=True)
class TrainingExample:
    history: PoseWindow
    future: PoseWindow
    context: GameContext
    style_refs: StyleReferenceSet
    anchor: AnchorTransform


# --------------------------------------------------------------------------
# event featurisation
# --------------------------------------------------------------------------

def featurize_note(e: NoteEvent, t: float, anchor: AnchorTransform = AnchorTransform.identity(),
                   bpm: float = 60.0, geometry: LaneGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    row = np.zeros(NOTE_FEATURES)
    row[0] = e.beat * 60.0 / bpm - t
    row[1:4] = anchor.apply_points(geometry.cell_center(e.column, e.row))
    row[4 + int(e.color)] = 1.0
    row[6 + int(e.cut_direction)] = 1.0
    return row


def featurize_bomb(e: BombEvent, t: float, anchor: AnchorTransform = AnchorTransform.identity(),
                   bpm: float = 60.0, geometry: LaneGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    row = np.zeros(BOMB_FEATURES)
    row[0] = e.beat * 60.0 / bpm - t
    row[1:4] = anchor.apply_points(geometry.cell_center(e.column, e.row))
    return row


def featurize_obstacle(e: ObstacleEvent, t: float, anchor: AnchorTransform = AnchorTransform.identity(),
                       bpm: float = 60.0, geometry: LaneGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Time to start (0 while active), duration, min corner and extent.

    Under a yawed anchor the extent is the rotated box diagonal, so
    ``corner + extent`` stays the opposite corner.
    """
    duration_s = e.duration * 60.0 / bpm
    lo, extent = geometry.obstacle_box(e, duration_s)
    row = np.zeros(OBSTACLE_FEATURES)
    row[0] = max(0.0, e.beat * 60.0 / bpm - t)
    row[1] = duration_s
    row[2:5] = anchor.apply_points(lo)
    row[5:8] = anchor.apply_vectors(extent)
    return row


def _pack(rows: list[np.ndarray], n: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros((n, width))
    mask = np.zeros(n)
    for i, r in enumerate(rows[:n]):
        out[i] = r
        mask[i] = 1.0
    return out, mask


def upcoming_events(beatmap: Beatmap, t: float, n: int = 4, horizon: float = 2.0,
                    anchor: AnchorTransform = AnchorTransform.identity(),
                    geometry: LaneGeometry = DEFAULT_GEOMETRY) -> GameContext:
    """The first ``n`` events of each category in ``[t, t + horizon]``.

    Obstacles also count while active (``t`` inside ``[start, start + duration]``),
    with time-to-event clamped to zero. Missing rows are zero with mask 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    bpm = beatmap.bpm
    end = t + horizon + _TIME_EPS

    def ahead(e):
        s = e.beat * 60.0 / bpm
        return t - _TIME_EPS <= s <= end

    notes = [featurize_note(e, t, anchor, bpm, geometry) for e in beatmap.notes if ahead(e)]
    bombs = [featurize_bomb(e, t, anchor, bpm, geometry) for e in beatmap.bombs if ahead(e)]
    obstacles = []
    for e in beatmap.obstacles:
        s = e.beat * 60.0 / bpm
        active = s <= t <= s + e.duration * 60.0 / bpm
        if active or ahead(e):
            obstacles.append(featurize_obstacle(e, t, anchor, bpm, geometry))
    # beatmap lists are beat-sorted; a stable sort on the clamped time keeps that order for ties
    notes.sort(key=lambda r: r[0])
    bombs.sort(key=lambda r: r[0])
    obstacles.sort(key=lambda r: r[0])
    # tiny negative times from the tolerance above are clamped
    for rows in (notes, bombs, obstacles):
        for r in rows:
            r[0] = max(r[0], 0.0)
    nf, nm = _pack(notes, n, NOTE_FEATURES)
    bf, bm = _pack(bombs, n, BOMB_FEATURES)
    of, om = _pack(obstacles, n, OBSTACLE_FEATURES)
    return GameContext(float(t), nf, nm, bf, bm, of, om)


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------

def frame_index(trace: PoseTrace, t: float, tol: float = 1e-6) -> int:
    i = int(np.argmin(np.abs(trace.times - t)))
    if abs(trace.times[i] - t) > tol:
        raise WindowError(f"time {t!r} is not on the trace's frame grid")
    return i


def build_training_window(trace: PoseTrace, beatmap: Beatmap, t: float, cfg: ContextConfig,
                          style_refs: StyleReferenceSet | None = None,
                          geometry: LaneGeometry = DEFAULT_GEOMETRY,
                          seed: int = 0) -> TrainingExample:
    """Cut history ``[t - h, t]`` and future ``(t, t + T]`` frames around ``t``.

    Both windows and the game context share the history's anchor. Without
    ``style_refs`` the references are drawn from ``trace`` itself.
    """
    if t < trace.times[0] - 1e-6:
        raise WindowError(f"time {t!r} is before the trace start")
    i = frame_index(trace, t)
    if i - cfg.h < 0:
        raise WindowError(f"need {cfg.h} history frames before t={t!r}, have {i}")
    if i + cfg.T > len(trace) - 1:
        raise WindowError(f"need {cfg.T} future frames after t={t!r}, have {len(trace) - 1 - i}")
    history, anchor = canonicalize_window(trace.slice(i - cfg.h, i + 1))
    future = apply_anchor(trace.slice(i + 1, i + 1 + cfg.T), anchor)
    ctx = upcoming_events(beatmap, float(trace.times[i]), cfg.n, cfg.horizon, anchor, geometry)
    if style_refs is None:
        style_refs = select_style_references(trace, cfg.n_ref, cfg.T, seed)
    return TrainingExample(history, future, ctx, style_refs, anchor)


def select_style_references(donor: PoseTrace, n_ref: int, T: int, rng_seed) -> StyleReferenceSet:
    """Draw ``n_ref`` non-overlapping ``T``-frame windows uniformly at random.

    Every configuration of disjoint windows is equally likely. Each window is
    canonicalised on its own last frame.
    """
    if n_ref < 1:
        raise ValueError("n_ref must be >= 1")
    length = len(donor)
    slack = length - n_ref * T
    if slack < 0:
        raise CapacityError(f"donor has {length} frames, need {n_ref} x {T} = {n_ref * T}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    # stars and bars: sorted distinct picks from slack + n_ref slots map 1:1 to gap layouts
    picks = np.sort(rng.choice(slack + n_ref, size=n_ref, replace=False))
    starts = [int(p - k + k * T) for k, p in enumerate(picks)]
    refs = tuple(canonicalize_window(donor.slice(s, s + T))[0] for s in starts)
    return StyleReferenceSet(refs, tuple(starts))


# --------------------------------------------------------------------------
# array packing
# --------------------------------------------------------------------------

def example_arrays(ex: TrainingExample) -> dict[str, np.ndarray]:
    c = ex.context
    return {
        "history": ex.history.features(),
        "future": ex.future.features(),
        "notes": c.notes, "notes_mask": c.notes_mask,
        "bombs": c.bombs, "bombs_mask": c.bombs_mask,
        "obstacles": c.obstacles, "obstacles_mask": c.obstacles_mask,
        "refs": ex.style_refs.features(),
        "query_time": np.array(c.query_time),
        "anchor": np.array([ex.anchor.yaw, *ex.anchor.translation_xz]),
    }


def stack_examples(examples) -> dict[str, np.ndarray]:
    """Batch examples (``TrainingExample`` or array dicts) along a new axis 0."""
    dicts = [e if isinstance(e, dict) else example_arrays(e) for e in examples]
    if not dicts:
        raise ValueError("no examples to stack")
    return {k: np.stack([d[k] for d in dicts]) for k in dicts[0]}


def record_layout(cfg: ContextConfig) -> list[tuple[str, list[int]]]:
    n = cfg.n
    return [
        ("query_time", []),
        ("anchor", [3]),
        ("history", [cfg.h + 1, FEATURES_PER_FRAME]),
        ("future", [cfg.T, FEATURES_PER_FRAME]),
        ("notes", [n, NOTE_FEATURES]), ("notes_mask", [n]),
        ("bombs", [n, BOMB_FEATURES]), ("bombs_mask", [n]),
        ("obstacles", [n, OBSTACLE_FEATURES]), ("obstacles_mask", [n]),
        ("refs", [cfg.n_ref, cfg.T, FEATURES_PER_FRAME]),
    ]


def _record_size(layout) -> int:
    return sum(int(np.prod(shape)) if shape else 1 for _, shape in layout)


def encode_record(arrays: dict, layout) -> bytes:
    flat = np.concatenate([np.asarray(arrays[name], dtype="<f8").ravel() for name, _ in layout])
    payload = flat.astype("<f4").tobytes()
    return struct.pack("<I", len(payload)) + payload


def read_dataset(path, layout) -> dict[str, np.ndarray]:
    """Load every record as float64 arrays stacked on axis 0."""
    data = Path(path).read_bytes()
    size = _record_size(layout)
    records = []
    pos = 0
    while pos < len(data):
        (nbytes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if nbytes != 4 * size:
            raise ValueError(f"record at byte {pos - 4} has {nbytes} bytes, layout expects {4 * size}")
        records.append(np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float64))
        pos += nbytes
    flat = np.stack(records) if records else np.zeros((0, size))
    out = {}
    col = 0
    for name, shape in layout:
        k = int(np.prod(shape)) if shape else 1
        out[name] = flat[:, col:col + k].reshape((len(flat), *shape))
        col += k
    return out


def layout_from_manifest(manifest: dict) -> list[tuple[str, list[int]]]:
    return [(f["name"], list(f["shape"])) for f in manifest["record_layout"]["fields"]]


# --------------------------------------------------------------------------
# dataset build
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_rng(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named pipeline stage."""
    tag = int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")
    return np.random.default_rng([int(seed), tag, *extra])


@dataclass
class PairSpec:
    trace: Path
    beatmap: Path
    donor: Path | None = None


def read_manifest(path) -> list[PairSpec]:
    """Manifest JSON: ``{"pairs": [{"trace": ..., "beatmap": ..., "donor": ...}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    pairs = doc.get("pairs") if isinstance(doc, dict) else None
    if not isinstance(pairs, list) or not pairs:
        raise ManifestError("manifest needs a non-empty 'pairs' list")
    out = []
    for i, p in enumerate(pairs):
        if not isinstance(p, dict) or "trace" not in p or "beatmap" not in p:
            raise ManifestError(f"pairs[{i}] must name both 'trace' and 'beatmap'")
        spec = PairSpec(path.parent / p["trace"], path.parent / p["beatmap"],
                        path.parent / p["donor"] if p.get("donor") else None)
        for f in (spec.trace, spec.beatmap, spec.donor):
            if f is not None and not f.is_file():
                raise ManifestError(f"pairs[{i}]: missing file {f}")
        out.append(spec)
    return out


def load_trace_file(path, rate: float) -> PoseTrace:
    with open(path, newline="", encoding="utf-8") as f:
        trace = load_pose_trace(f)
    spacing = np.diff(trace.times)
    if len(trace) > 1 and np.all(np.abs(spacing - 1.0 / rate) <= 1e-6):
        return PoseTrace(trace.times, trace.positions, trace.rotations, float(rate))
    return resample(trace, rate)


def example_times(trace: PoseTrace, cfg: ContextConfig, stride: int) -> list[float]:
    first = cfg.h
    last = len(trace) - 1 - cfg.T
    return [float(trace.times[i]) for i in range(first, last + 1, stride)]


@dataclass
class DatasetResult:
    n_examples: int
    manifest: dict = field(default_factory=dict)


def build_dataset(pairs: list[PairSpec], cfg: ContextConfig, stride: int, seed: int,
                  out_path, manifest_path=None, geometry: LaneGeometry = DEFAULT_GEOMETRY,
                  threads: int = 1) -> DatasetResult:
    """Write every admissible example to ``out_path`` plus a JSON manifest.

    Output is a pure function of the inputs, config and seed; records are
    written in (pair, time) order whatever ``threads`` is.
    """
    cfg.validate()
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out_path = Path(out_path)
    manifest_path = Path(manifest_path) if manifest_path else out_path.with_suffix(".manifest.json")
    layout = record_layout(cfg)
    counts = []
    inputs = []
    with open(out_path, "wb") as out:
        for k, spec in enumerate(pairs):
            trace = load_trace_file(spec.trace, cfg.rate)
            beatmap = load_beatmap(spec.beatmap)
            if trace.times[0] > beatmap.song_length:
                raise ManifestError(f"pairs[{k}]: trace starts after the end of its beatmap")
            donor = load_trace_file(spec.donor, cfg.rate) if spec.donor else trace
            refs = select_style_references(donor, cfg.n_ref, cfg.T, stage_rng(seed, "dataset", k))
            times = example_times(trace, cfg, stride)

            def make(t, trace=trace, beatmap=beatmap, refs=refs):
                ex = build_training_window(trace, beatmap, t, cfg, refs, geometry)
                return encode_record(example_arrays(ex), layout)

            if threads > 1:
                with ThreadPoolExecutor(threads) as pool:
                    records = list(pool.map(make, times))
            else:
                records = [make(t) for t in times]
            for rec in records:
                out.write(rec)
            counts.append(len(records))
            inputs.append({
                "trace": str(spec.trace.name), "trace_sha256": sha256_file(spec.trace),
                "beatmap": str(spec.beatmap.name), "beatmap_sha256": sha256_file(spec.beatmap),
                "donor_sha256": sha256_file(spec.donor) if spec.donor else None,
                "style_ref_starts": list(refs.starts),
            })
    manifest = {
        "cfg": asdict(cfg),
        "geometry": asdict(geometry),
        "stride": stride,
        "seed": seed,
        "counts": {"total": sum(counts), "per_pair": counts},
        "inputs": inputs,
        "dataset_sha256": sha256_file(out_path),
        "record_layout": {
            "version": RECORD_LAYOUT_VERSION,
            "encoding": "u32 little-endian payload byte count, then little-endian float32 values",
            "fields": [{"name": name, "shape": shape} for name, shape in layout],
            "floats_per_record": _record_size(layout),
        },
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return DatasetResult(sum(counts), manifest)


def context_config_from_manifest(manifest: dict) -> ContextConfig:
    return ContextConfig(**manifest["cfg"])

