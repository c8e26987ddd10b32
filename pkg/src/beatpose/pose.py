"""Three-point (head, left hand, right hand) pose sequences.

Conventions used throughout the package: +y is up, +z is forward, units are
meters and seconds. Quaternions are stored as ``(w, x, y, z)``. Arrays carry
joints on the second-to-last axis in the order ``JOINTS``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

JOINTS = ("head", "lh", "rh")
N_JOINTS = 3
FEATURES_PER_JOINT = 9  # position xyz + 6d rotation
FEATURES_PER_FRAME = N_JOINTS * FEATURES_PER_JOINT
DEFAULT_RATE = 30.0

CSV_HEADER = ["t"] + [
    f"{j}_{c}" for j in JOINTS for c in ("px", "py", "pz", "qw", "qx", "qy", "qz")
]

QUAT_LOAD_TOLERANCE = 1e-2
DEGENERATE_6D = 1e-8
DEGENERATE_FACING = 1e-6
SLERP_LINEAR_BELOW = 1e-6


class PoseError(ValueError):
    pass


class PoseFormatError(PoseError):
    pass


class PoseDataError(PoseError):
    pass


class DegenerateRotationError(PoseError):
    pass


class DegenerateFacingError(PoseError):
    pass


# --------------------------------------------------------------------------
# quaternion algebra (vectorised over leading axes)
# --------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion with w >= 0 (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
        q = np.array(q)
        if q[0] < 0:
            q = -q
        out[k] = q / np.linalg.norm(q)
    return out.reshape(m.shape[:-2] + (4,))


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def yaw_quat(yaw: float) -> np.ndarray:
    """Rotation by ``yaw`` radians about +y (so +z turns toward +x)."""
    return np.array([math.cos(yaw / 2), 0.0, math.sin(yaw / 2), 0.0])


def quat_angle(a, b):
    """Geodesic angle between rotations, sign-insensitive."""
    rel = quat_mul(quat_conj(a), b)
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))


def slerp(q0, q1, u: float) -> np.ndarray:
    """Shortest-path spherical interpolation between two unit quaternions.

    Below an angle of 1e-6 rad the result is a normalised linear blend.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if np.array_equal(q0, q1):
        return q0.copy()
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
        if np.array_equal(q0, q1):
            return q0.copy()
    dot = min(dot, 1.0)
    theta = math.acos(dot)
    if theta < SLERP_LINEAR_BELOW:
        q = q0 + u * (q1 - q0)
    else:
        s = math.sin(theta)
        q = (math.sin((1.0 - u) * theta) / s) * q0 + (math.sin(u * theta) / s) * q1
    return q / np.linalg.norm(q)


def slerp_many(q0, q1, u) -> np.ndarray:
    """Row-wise :func:`slerp` for arrays of shape (..., 4); ``u`` broadcasts."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), q0.shape[:-1])
    out = np.empty(np.broadcast_shapes(q0.shape, q1.shape))
    a = np.broadcast_to(q0, out.shape).reshape(-1, 4)
    b = np.broadcast_to(q1, out.shape).reshape(-1, 4)
    uu = np.broadcast_to(u, out.shape[:-1]).reshape(-1)
    flat = out.reshape(-1, 4)
    for k in range(flat.shape[0]):
        flat[k] = slerp(a[k], b[k], uu[k])
    return out


# --------------------------------------------------------------------------
# 6d rotation features
# --------------------------------------------------------------------------

def rotation_to_6d(q) -> np.ndarray:
    """First two rotation-matrix columns, concatenated: (..., 4) -> (..., 6)."""
    m = quat_to_matrix(q)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def orthonormalize_6d(v6):
    """Gram-Schmidt on the two 3-vector halves; returns three basis columns."""
    v6 = np.asarray(v6, dtype=float)
    a1, a2 = v6[..., :3], v6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < DEGENERATE_6D):
        raise DegenerateRotationError("first 6d half has zero length")
    b1 = a1 / n1
    v = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nv < DEGENERATE_6D):
        raise DegenerateRotationError("6d halves are collinear")
    b2 = v / nv
    return b1, b2, np.cross(b1, b2)


def rotation_from_6d(v6) -> np.ndarray:
    b1, b2, b3 = orthonormalize_6d(v6)
    return matrix_to_quat(np.stack([b1, b2, b3], axis=-1))


# --------------------------------------------------------------------------
# frames, traces and windows
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ThreePointPose:
    timestamp: float
    positions: np.ndarray  # (3 joints, xyz)
    rotations: np.ndarray  # (3 joints, wxyz)

    @property
    def head(self):
        return self.positions[0], self.rotations[0]

    @property
    def left_hand(self):
        return self.positions[1], self.rotations[1]

    @property
    def right_hand(self):
        return self.positions[2], self.rotations[2]


def _frames(times, positions, rotations):
    return [ThreePointPose(float(t), p, r) for t, p, r in zip(times, positions, rotations)]


@dataclass(frozen=True)
class PoseTrace:
    times: np.ndarray      # (L,)
    positions: np.ndarray  # (L, 3, 3)
    rotations: np.ndarray  # (L, 3, 4)
    rate: float = DEFAULT_RATE

    def __len__(self):
        return len(self.times)

    @property
    def frames(self) -> list[ThreePointPose]:
        return _frames(self.times, self.positions, self.rotations)

    def slice(self, start: int, stop: int) -> "PoseWindow":
        return PoseWindow(self.times[start:stop].copy(), self.positions[start:stop].copy(),
                          self.rotations[start:stop].copy())

    @classmethod
    def from_frames(cls, frames: Iterable[ThreePointPose], rate: float) -> "PoseTrace":
        frames = list(frames)
        return cls(
            np.array([f.timestamp for f in frames], dtype=float),
            np.stack([np.asarray(f.positions, dtype=float) for f in frames]),
            np.stack([np.asarray(f.rotations, dtype=float) for f in frames]),
            float(rate),
        )


@dataclass(frozen=True)
class PoseWindow:
    times: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    canonical: bool = False

    def __len__(self):
        return len(self.times)

    @property
    def frames(self) -> list[ThreePointPose]:
        return _frames(self.times, self.positions, self.rotations)

    def features(self) -> np.ndarray:
        """Per-frame model features, shape (L, 27): per joint position + 6d."""
        six = rotation_to_6d(self.rotations)
        return np.concatenate([self.positions, six], axis=-1).reshape(len(self), FEATURES_PER_FRAME)


def window_from_features(features, times, canonical: bool = True) -> PoseWindow:
    f = np.asarray(features, dtype=float).reshape(-1, N_JOINTS, FEATURES_PER_JOINT)
    return PoseWindow(np.asarray(times, dtype=float), f[..., :3].copy(),
                      rotation_from_6d(f[..., 3:]), canonical)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def load_pose_trace(stream, rate: float | None = None) -> PoseTrace:
    """Read the 22-column pose CSV.

    Quaternions are renormalised; a norm off by more than 1e-2 is rejected.
    ``rate`` defaults to the inverse median frame spacing.
    """
    if isinstance(stream, (str, bytes)) and not hasattr(stream, "read"):
        stream = io.StringIO(stream.decode("utf-8") if isinstance(stream, bytes) else stream)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CSV_HEADER:
        raise PoseFormatError("pose CSV header does not match the expected 22 columns")
    rows = []
    for lineno, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise PoseFormatError(f"row {lineno}: expected {len(CSV_HEADER)} columns, got {len(row)}")
        try:
            rows.append([float(x) for x in row])
        except ValueError as exc:
            raise PoseFormatError(f"row {lineno}: {exc}") from None
    if not rows:
        raise PoseFormatError("pose CSV has no data rows")
    data = np.array(rows)
    times = data[:, 0]
    if not np.all(np.isfinite(times)):
        raise PoseFormatError("non-finite timestamp")
    for i in range(1, len(times)):
        if not times[i] > times[i - 1]:
            raise PoseFormatError(f"row {i + 1}: timestamp {times[i]!r} is not strictly increasing")
    per_joint = data[:, 1:].reshape(-1, N_JOINTS, 7)
    positions = per_joint[..., :3].copy()
    quats = per_joint[..., 3:].copy()
    norms = np.linalg.norm(quats, axis=-1)
    bad = np.abs(norms - 1.0) > QUAT_LOAD_TOLERANCE
    if np.any(bad):
        row, joint = np.argwhere(bad)[0]
        raise PoseDataError(
            f"row {row + 1}: {JOINTS[joint]} quaternion norm {norms[row, joint]:.6g} "
            f"is off by more than {QUAT_LOAD_TOLERANCE}"
        )
    quats /= norms[..., None]
    if rate is None:
        rate = 1.0 / float(np.median(np.diff(times))) if len(times) > 1 else DEFAULT_RATE
    return PoseTrace(times, positions, quats, float(rate))


def write_pose_trace(trace, stream) -> None:
    """Write the pose CSV; floats use ``repr`` so the output round-trips exactly."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for t, p, q in zip(trace.times, trace.positions, trace.rotations):
        row = [repr(float(t))]
        for j in range(N_JOINTS):
            row += [repr(float(x)) for x in p[j]]
            row += [repr(float(x)) for x in q[j]]
        w.writerow(row)


def pose_trace_to_csv(trace) -> str:
    buf = io.StringIO()
    write_pose_trace(trace, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def uniform_grid(start: float, stop: float, rate: float) -> np.ndarray:
    """Grid ``start + k / rate`` covering [start, stop] (stop included up to 1e-9 s)."""
    n = int(math.floor((stop - start) * rate + 1e-9)) + 1
    return start + np.arange(n) / rate


def resample(trace: PoseTrace, target_rate: float = DEFAULT_RATE) -> PoseTrace:
    if len(trace) < 2:
        raise PoseError("resample needs at least two frames")
    if not target_rate > 0:
        raise PoseError("target_rate must be positive")
    grid = uniform_grid(trace.times[0], trace.times[-1], target_rate)
    idx = np.clip(np.searchsorted(trace.times, grid, side="right") - 1, 0, len(trace) - 2)
    t0 = trace.times[idx]
    t1 = trace.times[idx + 1]
    u = (grid - t0) / (t1 - t0)
    # snap onto source frames to keep resampling at the native rate exact
    u = np.where(np.abs(u) < 1e-9, 0.0, np.where(np.abs(u - 1) < 1e-9, 1.0, u))
    p0 = trace.positions[idx]
    p1 = trace.positions[idx + 1]
    positions = p0 + u[:, None, None] * (p1 - p0)
    rotations = np.empty((len(grid), N_JOINTS, 4))
    for k in range(len(grid)):
        for j in range(N_JOINTS):
            if u[k] == 0.0:
                rotations[k, j] = trace.rotations[idx[k], j]
            elif u[k] == 1.0:
                rotations[k, j] = trace.rotations[idx[k] + 1, j]
            else:
                rotations[k, j] = slerp(trace.rotations[idx[k], j], trace.rotations[idx[k] + 1, j], u[k])
    return PoseTrace(grid, positions, rotations, float(target_rate))


# --------------------------------------------------------------------------
# canonical frame
# --------------------------------------------------------------------------

class AnchorTransform(NamedTuple):
    """Rigid yaw + horizontal translation taking world coordinates to canonical.

    ``canonical = R_y(yaw) @ (world + [tx, 0, tz])``.
    """

    yaw: float
    translation_xz: tuple[float, float]

    @classmethod
    def identity(cls) -> "AnchorTransform":
        return cls(0.0, (0.0, 0.0))

    @property
    def quat(self) -> np.ndarray:
        return yaw_quat(self.yaw)

    def apply_points(self, p):
        p = np.asarray(p, dtype=float)
        shifted = p + np.array([self.translation_xz[0], 0.0, self.translation_xz[1]])
        return _rotate_y(shifted, self.yaw)

    def invert_points(self, p):
        p = np.asarray(p, dtype=float)
        back = _rotate_y(p, -self.yaw)
        return back - np.array([self.translation_xz[0], 0.0, self.translation_xz[1]])

    def apply_rotations(self, q):
        return quat_mul(self.quat, q)

    def invert_rotations(self, q):
        return quat_mul(yaw_quat(-self.yaw), q)

    def apply_vectors(self, v):
        return _rotate_y(np.asarray(v, dtype=float), self.yaw)

    def invert_vectors(self, v):
        return _rotate_y(np.asarray(v, dtype=float), -self.yaw)


def _rotate_y(p, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=-1)


def heading(rotation) -> float:
    """Yaw of the forward (+z) axis projected onto the ground plane."""
    f = quat_rotate(rotation, np.array([0.0, 0.0, 1.0]))
    if math.hypot(f[0], f[2]) < DEGENERATE_FACING:
        raise DegenerateFacingError("head is facing straight up or down")
    return math.atan2(f[0], f[2])


def anchor_for(positions_last, rotations_last) -> AnchorTransform:
    """Anchor placing the given frame's head at the horizontal origin facing +z."""
    head_p = positions_last[0]
    return AnchorTransform(-heading(rotations_last[0]), (-float(head_p[0]), -float(head_p[2])))


def apply_anchor(window: PoseWindow, anchor: AnchorTransform, canonical: bool = True) -> PoseWindow:
    return PoseWindow(window.times.copy(), anchor.apply_points(window.positions),
                      anchor.apply_rotations(window.rotations), canonical)


def canonicalize_window(window: PoseWindow) -> tuple[PoseWindow, AnchorTransform]:
    anchor = anchor_for(window.positions[-1], window.rotations[-1])
    return apply_anchor(window, anchor), anchor


def decanonicalize(window: PoseWindow, anchor: AnchorTransform) -> PoseWindow:
    return PoseWindow(window.times.copy(), anchor.invert_points(window.positions),
                      anchor.invert_rotations(window.rotations), False)


def compose_anchors(first: AnchorTransform, second: AnchorTransform) -> AnchorTransform:
    """Anchor equivalent to applying ``first`` and then ``second``."""
    # second(first(p)) = R(b)(R(a)(p + t1) + t2) = R(a+b)(p + t1 + R(-a) t2)
    t2 = _rotate_y(np.array([second.translation_xz[0], 0.0, second.translation_xz[1]]), -first.yaw)
    yaw = math.remainder(first.yaw + second.yaw, 2 * math.pi)
    return AnchorTransform(yaw, (first.translation_xz[0] + float(t2[0]),
                                 first.translation_xz[1] + float(t2[2])))


# --------------------------------------------------------------------------
# smoothness
# --------------------------------------------------------------------------

def jerk_metric(trace) -> float:
    """Mean magnitude of third finite differences of joint positions (m/s^3).

    Uses the four-point stencil ``x[i+3] - 3x[i+2] + 3x[i+1] - x[i]``, centred
    between samples, which is exact for cubic motion.
    """
    p = np.asarray(trace.positions, dtype=float)
    if p.shape[0] < 4:
        raise PoseError("jerk_metric needs at least four frames")
    dt = 1.0 / trace.rate
    d3 = (p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]) / dt ** 3
    return float(np.mean(np.linalg.norm(d3, axis=-1)))


def rest_pose() -> tuple[np.ndarray, np.ndarray]:
    """Standing pose: head at 1.7 m facing +z, hands low and forward."""
    positions = np.array([[0.0, 1.7, 0.0], [-0.3, 1.2, 0.2], [0.3, 1.2, 0.2]])
    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (N_JOINTS, 1))
    return positions, rotations


def hold_pose(positions, rotations, n_frames: int, rate: float, start: float = 0.0) -> PoseWindow:
    times = start + np.arange(n_frames) / rate
    return PoseWindow(times, np.repeat(np.asarray(positions, float)[None], n_frames, axis=0),
                      np.repeat(np.asarray(rotations, float)[None], n_frames, axis=0))


__all__ = [
    "AnchorTransform", "PoseTrace", "PoseWindow", "ThreePointPose",
    "canonicalize_window", "decanonicalize", "jerk_metric", "load_pose_trace",
    "resample", "rotation_from_6d", "rotation_to_6d", "slerp", "write_pose_trace",
]
