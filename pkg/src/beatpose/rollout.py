"""Autoregressive whole-song generation.

Each step canonicalises the last ``h + 1`` committed frames, builds the game
context at the newest frame, predicts ``T`` canonical frames, maps them back
to the world and commits the first ``stride``. With ``blend > 0`` the head of
each new window is crossfaded against the overlapping tail of the previous one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .beatmap import Beatmap
from .context import DEFAULT_GEOMETRY, ContextConfig, GameContext, LaneGeometry, StyleReferenceSet, upcoming_events
from .model import ShapeError, decode, encode_3p, encode_game, encode_style
from .pose import (
    N_JOINTS, PoseTrace, PoseWindow, canonicalize_window, hold_pose, quat_conj, quat_mul,
    quat_normalize, rest_pose, rotation_from_6d, slerp_many, uniform_grid,
)


class RolloutError(RuntimeError):
    def __init__(self, message: str, timestamp: float | None = None):
        super().__init__(message)
        self.timestamp = timestamp


@dataclass(frozen=True)
class RolloutConfig:
    stride: int = 10
    blend: int = 0
    seed_history: PoseWindow | None = None

    def validate(self, T: int):
        if not 1 <= self.stride <= T:
            raise ValueError(f"stride must be in [1, T={T}], got {self.stride}")
        if not 0 <= self.blend < self.stride:
            raise ValueError(f"blend must be in [0, stride), got {self.blend}")
        if self.stride + self.blend > T:
            raise ValueError(f"stride + blend must be <= T={T}")
        return self


def default_seed_history(h: int, rate: float, start: float = 0.0) -> PoseWindow:
    positions, rotations = rest_pose()
    return hold_pose(positions, rotations, h + 1, rate, start)


class ModelPredictor:
    """Adapter from model parameters to the predictor protocol used by :func:`rollout`.

    The style latent is computed once from ``style_refs``. ``restyle`` (a
    callable from query time to a reference set) re-conditions every window.
    """

    def __init__(self, params, style_refs, restyle: Callable[[float], StyleReferenceSet] | None = None):
        self.params = params
        self.style_latent = encode_style(params, style_refs)
        self.restyle = restyle

    def __call__(self, history: PoseWindow, ctx: GameContext) -> np.ndarray:
        zs = self.style_latent if self.restyle is None else encode_style(self.params, self.restyle(ctx.query_time))
        return decode(self.params, encode_3p(self.params, history.features()), encode_game(self.params, ctx), zs)


def stitch(prev_tail: PoseWindow, new_head: PoseWindow, blend: int) -> PoseWindow:
    """Crossfade ``blend`` frames: weight ``(i + 1)/(blend + 1)`` toward the new frames."""
    if blend == 0:
        return new_head
    if len(prev_tail) != blend or len(new_head) != blend:
        raise ShapeError(f"stitch needs {blend} frames on both sides, got {len(prev_tail)} and {len(new_head)}")
    w = (np.arange(blend) + 1.0) / (blend + 1.0)
    a, b = prev_tail.positions, new_head.positions
    positions = a + w[:, None, None] * (b - a)
    rotations = slerp_many(prev_tail.rotations, new_head.rotations, np.repeat(w[:, None], N_JOINTS, axis=1))
    return PoseWindow(new_head.times.copy(), positions, rotations, new_head.canonical)


def _as_window(pred, times) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, PoseWindow):
        return np.asarray(pred.positions, float), np.asarray(pred.rotations, float)
    f = np.asarray(pred, dtype=float).reshape(len(times), N_JOINTS, 9)
    return f[..., :3].copy(), rotation_from_6d(f[..., 3:])


def _to_world(pos, rot, last_world: PoseWindow, last_canon: PoseWindow, anchor):
    """Map predicted canonical frames to the world relative to the newest history frame.

    Expressing each frame as an offset from the anchor frame keeps a
    prediction equal to that frame bit-identical to it in world coordinates.
    """
    lw_p, lw_q = last_world.positions[-1], last_world.rotations[-1]
    lc_p, lc_q = last_canon.positions[-1], last_canon.rotations[-1]
    world_p = lw_p + anchor.invert_vectors(pos - lc_p)
    world_q = np.empty_like(rot)
    for k in range(len(rot)):
        for j in range(N_JOINTS):
            if np.array_equal(rot[k, j], lc_q[j]):
                world_q[k, j] = lw_q[j]
            else:
                world_q[k, j] = quat_normalize(quat_mul(lw_q[j], quat_normalize(quat_mul(quat_conj(lc_q[j]), rot[k, j]))))
    return world_p, world_q


def rollout(predictor, beatmap: Beatmap, style_refs: StyleReferenceSet | None, cfg: RolloutConfig,
            context_cfg: ContextConfig = ContextConfig(), geometry: LaneGeometry = DEFAULT_GEOMETRY) -> PoseTrace:
    """Generate a world-frame trace from the seed history to the end of the song.

    ``predictor`` is either a parameter dict or a callable
    ``(canonical history window, GameContext) -> (T, 27) features or PoseWindow``.
    """
    h, T, rate = context_cfg.h, context_cfg.T, context_cfg.rate
    cfg.validate(T)
    if not callable(predictor):
        predictor = ModelPredictor(predictor, style_refs)
    seed = cfg.seed_history if cfg.seed_history is not None else default_seed_history(h, rate)
    if len(seed) != h + 1:
        raise ShapeError(f"seed history needs {h + 1} frames, got {len(seed)}")
    start = float(seed.times[0])
    grid = uniform_grid(start, max(beatmap.song_length, start), rate)
    total = max(len(grid), h + 1)
    grid = start + np.arange(total) / rate

    positions = np.empty((total, N_JOINTS, 3))
    rotations = np.empty((total, N_JOINTS, 4))
    positions[:h + 1] = seed.positions
    rotations[:h + 1] = seed.rotations
    done = h + 1
    prev = None  # previous predicted world window and the frame index it starts at
    while done < total:
        t = float(grid[done - 1])
        hist = PoseWindow(grid[done - h - 1:done].copy(), positions[done - h - 1:done].copy(),
                          rotations[done - h - 1:done].copy())
        canon, anchor = canonicalize_window(hist)
        ctx = upcoming_events(beatmap, t, context_cfg.n, context_cfg.horizon, anchor, geometry)
        future_times = grid[done - 1] + (np.arange(T) + 1.0) / rate
        pos, rot = _as_window(predictor(canon, ctx), future_times)
        if pos.shape != (T, N_JOINTS, 3) or rot.shape != (T, N_JOINTS, 4):
            raise ShapeError(f"predictor returned shapes {pos.shape}, {rot.shape}; expected {T} frames")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(rot))):
            raise RolloutError(f"non-finite prediction at t={t:.6f}s", t)
        wp, wq = _to_world(pos, rot, hist, canon, anchor)
        n_new = min(cfg.stride, total - done)
        new = PoseWindow(grid[done:done + n_new].copy(), wp[:n_new], wq[:n_new])
        if cfg.blend and prev is not None:
            k = min(cfg.blend, n_new)
            off = done - prev[0]
            tail = PoseWindow(new.times[:k], prev[1][off:off + k], prev[2][off:off + k])
            head = PoseWindow(new.times[:k], new.positions[:k], new.rotations[:k])
            mixed = stitch(tail, head, k)
            new.positions[:k] = mixed.positions
            new.rotations[:k] = mixed.rotations
        positions[done:done + n_new] = new.positions
        rotations[done:done + n_new] = new.rotations
        prev = (done, wp, wq)
        done += n_new
    return PoseTrace(grid, positions, rotations, float(rate))
