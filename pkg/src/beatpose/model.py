"""Encoders, decoder, losses and optimiser for style-conditioned pose prediction.

Everything is plain numpy with hand-written reverse-mode gradients:

* ``e3p``    per-frame tanh layer, mean over history frames, linear map to ``d_z``
* ``egame``  per-row tanh layer for each event category, masked sum-pool,
             linear map of the three pooled vectors to ``d_z``
* ``estyle`` tanh layer over a flattened ``T``-frame window, linear map to
             ``d_z``, mean over references
* ``dec``    tanh layer over ``[z3p, zgame, zstyle]``, linear map to ``T x 27``;
             each 6d rotation is Gram-Schmidt orthonormalised on output

Parameters live in a flat ``dict`` of named arrays. Batches are dicts of
arrays with a leading batch axis, as produced by
:func:`beatpose.context.stack_examples`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .context import BOMB_FEATURES, CATEGORIES, NOTE_FEATURES, OBSTACLE_FEATURES
from .pose import FEATURES_PER_FRAME, FEATURES_PER_JOINT, N_JOINTS

CHECKPOINT_MAGIC = b"BPCK"
CHECKPOINT_VERSION = 1
_ROW_WIDTHS = {"notes": NOTE_FEATURES, "bombs": BOMB_FEATURES, "obstacles": OBSTACLE_FEATURES}
_NORM_FLOOR = 1e-12
_IDENTITY_JOINT = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_z: int = 32
    width: int = 64
    h: int = 15
    T: int = 30
    n: int = 4
    n_ref: int = 4

    @property
    def history_len(self) -> int:
        return self.h + 1


class LossBreakdown(NamedTuple):
    recon: float
    match: float
    total: float
    lambda_match: float


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    w, dz = cfg.width, cfg.d_z
    window = cfg.T * FEATURES_PER_FRAME
    shapes = {
        "e3p.w1": (FEATURES_PER_FRAME, w), "e3p.b1": (w,),
        "e3p.w2": (w, dz), "e3p.b2": (dz,),
    }
    for cat in CATEGORIES:
        shapes[f"egame.{cat}.w"] = (_ROW_WIDTHS[cat], w)
        shapes[f"egame.{cat}.b"] = (w,)
    shapes.update({
        "egame.w2": (3 * w, dz), "egame.b2": (dz,),
        "estyle.w1": (window, w), "estyle.b1": (w,),
        "estyle.w2": (w, dz), "estyle.b2": (dz,),
        "dec.w1": (3 * dz, w), "dec.b1": (w,),
        "dec.w2": (w, window), "dec.b2": (window,),
    })
    return shapes


def init_params(cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
    """Uniform(-s, s) with s = 1/sqrt(fan_in); biases use their layer's fan-in."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    shapes = _layer_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        prefix, last = name.rsplit(".", 1)
        weight = name if last.startswith("w") else f"{prefix}.{last.replace('b', 'w')}"
        s = 1.0 / math.sqrt(shapes[weight][0])
        params[name] = rng.uniform(-s, s, size=shape)
    # start every decoded rotation near identity so Gram-Schmidt sees unit-scale halves
    params["dec.b2"] += np.tile(_IDENTITY_JOINT, cfg.T * N_JOINTS)
    return params


def config_from_params(params: dict[str, np.ndarray]) -> ModelConfig:
    width, d_z = params["e3p.w2"].shape
    window = params["estyle.w1"].shape[0]
    return ModelConfig(d_z=d_z, width=width, T=window // FEATURES_PER_FRAME)


def _check(arr, shape, what):
    arr = np.asarray(arr, dtype=float)
    if arr.shape[1:] != tuple(shape):
        raise ShapeError(f"{what}: expected (batch, {', '.join(map(str, shape))}), got {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------

def _e3p_forward(p, hist):
    a = np.tanh(hist @ p["e3p.w1"] + p["e3p.b1"])
    pooled = a.mean(axis=1)
    return pooled @ p["e3p.w2"] + p["e3p.b2"], (hist, a, pooled)


def _e3p_backward(p, cache, dz, grads):
    hist, a, pooled = cache
    grads["e3p.w2"] += pooled.T @ dz
    grads["e3p.b2"] += dz.sum(0)
    da = np.repeat((dz @ p["e3p.w2"].T)[:, None, :] / a.shape[1], a.shape[1], axis=1)
    dpre = da * (1.0 - a * a)
    grads["e3p.w1"] += np.einsum("blf,blw->fw", hist, dpre)
    grads["e3p.b1"] += dpre.sum((0, 1))


def _egame_forward(p, batch):
    acts, pooled = {}, []
    for cat in CATEGORIES:
        t = np.tanh(batch[cat] @ p[f"egame.{cat}.w"] + p[f"egame.{cat}.b"])
        acts[cat] = t
        pooled.append((t * batch[cat + "_mask"][..., None]).sum(axis=1))
    pooled = np.concatenate(pooled, axis=-1)
    return pooled @ p["egame.w2"] + p["egame.b2"], (acts, pooled)


def _egame_backward(p, batch, cache, dz, grads):
    acts, pooled = cache
    grads["egame.w2"] += pooled.T @ dz
    grads["egame.b2"] += dz.sum(0)
    dpooled = dz @ p["egame.w2"].T
    w = p["egame.notes.b"].shape[0]
    for k, cat in enumerate(CATEGORIES):
        t = acts[cat]
        da = dpooled[:, None, k * w:(k + 1) * w] * batch[cat + "_mask"][..., None]
        dpre = da * (1.0 - t * t)
        grads[f"egame.{cat}.w"] += np.einsum("bnf,bnw->fw", batch[cat], dpre)
        grads[f"egame.{cat}.b"] += dpre.sum((0, 1))


def _estyle_forward(p, refs):
    # refs: (B, N, T*27)
    a = np.tanh(refs @ p["estyle.w1"] + p["estyle.b1"])
    per_ref = a @ p["estyle.w2"] + p["estyle.b2"]
    return per_ref.mean(axis=1), (refs, a)


def _estyle_backward(p, cache, dz, grads, need_input=False):
    refs, a = cache
    n = a.shape[1]
    dper = np.repeat(dz[:, None, :] / n, n, axis=1)
    grads["estyle.w2"] += np.einsum("bnw,bnd->wd", a, dper)
    grads["estyle.b2"] += dper.sum((0, 1))
    dpre = (dper @ p["estyle.w2"].T) * (1.0 - a * a)
    grads["estyle.w1"] += np.einsum("bnf,bnw->fw", refs, dpre)
    grads["estyle.b1"] += dpre.sum((0, 1))
    if need_input:
        return dpre @ p["estyle.w1"].T
    return None


# --------------------------------------------------------------------------
# decoder and rotation handling
# --------------------------------------------------------------------------

def _gram_schmidt(raw):
    """raw (..., 9) per joint -> (pos, b1, b2, cache)."""
    pos = raw[..., :3]
    a1 = raw[..., 3:6]
    a2 = raw[..., 6:9]
    n1 = np.maximum(np.linalg.norm(a1, axis=-1, keepdims=True), _NORM_FLOOR)
    b1 = a1 / n1
    s = np.sum(b1 * a2, axis=-1, keepdims=True)
    v = a2 - s * b1
    nv = np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), _NORM_FLOOR)
    b2 = v / nv
    return pos, b1, b2, (a2, n1, b1, s, nv, b2)


def _gram_schmidt_backward(cache, g1, g2):
    a2, n1, b1, s, nv, b2 = cache
    gv = (g2 - b2 * np.sum(b2 * g2, axis=-1, keepdims=True)) / nv
    b1_dot_gv = np.sum(b1 * gv, axis=-1, keepdims=True)
    ga2 = gv - b1 * b1_dot_gv
    gb1 = g1 - b1_dot_gv * a2 - s * gv
    ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / n1
    return ga1, ga2


def _decode_forward(p, z3, zg, zs, T):
    u = np.concatenate([z3, zg, zs], axis=-1)
    hdn = np.tanh(u @ p["dec.w1"] + p["dec.b1"])
    raw = (hdn @ p["dec.w2"] + p["dec.b2"]).reshape(len(u), T, N_JOINTS, FEATURES_PER_JOINT)
    pos, b1, b2, gs = _gram_schmidt(raw)
    feats = np.concatenate([pos, b1, b2], axis=-1).reshape(len(u), T, FEATURES_PER_FRAME)
    return feats, (u, hdn, gs)


def _decode_backward(p, cache, dfeats, grads):
    u, hdn, gs = cache
    B = len(u)
    d = dfeats.reshape(B, -1, N_JOINTS, FEATURES_PER_JOINT)
    ga1, ga2 = _gram_schmidt_backward(gs, d[..., 3:6], d[..., 6:9])
    draw = np.concatenate([d[..., :3], ga1, ga2], axis=-1).reshape(B, -1)
    grads["dec.w2"] += hdn.T @ draw
    grads["dec.b2"] += draw.sum(0)
    dpre = (draw @ p["dec.w2"].T) * (1.0 - hdn * hdn)
    grads["dec.w1"] += u.T @ dpre
    grads["dec.b1"] += dpre.sum(0)
    du = dpre @ p["dec.w1"].T
    dz = p["e3p.b2"].shape[0]
    return du[:, :dz], du[:, dz:2 * dz], du[:, 2 * dz:]


def _frames(feats):
    """(B, T, 27) -> positions (B,T,3,3) and rotation columns c1, c2, c3."""
    f = feats.reshape(feats.shape[0], feats.shape[1], N_JOINTS, FEATURES_PER_JOINT)
    return f[..., :3], f[..., 3:6], f[..., 6:9]


def _orthonormal_columns(feats):
    _, a1, a2 = _frames(feats)
    c1 = a1 / np.linalg.norm(a1, axis=-1, keepdims=True)
    v = a2 - np.sum(c1 * a2, axis=-1, keepdims=True) * c1
    c2 = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return c1, c2, np.cross(c1, c2)


def _geodesic(pred_cols, target_cols):
    """Angle between rotations given as column triples; returns (theta, parts)."""
    p1, p2, p3 = pred_cols
    t1, t2, t3 = target_cols
    P = np.stack([p1, p2, p3], axis=-1)  # columns
    Tm = np.stack([t1, t2, t3], axis=-1)
    M = np.einsum("...ki,...kj->...ij", Tm, P)  # M_ij = t_i . p_j
    c = (M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2] - 1.0) / 2.0
    v = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], -1)
    s = np.linalg.norm(v, axis=-1) / 2.0
    theta = np.arctan2(s, c)
    return theta, (P, Tm, c, v, s)


def _geodesic_sq_backward(theta, parts, g):
    """Gradient of g * theta^2 w.r.t. the three predicted columns."""
    P, Tm, c, v, s = parts
    r2 = s * s + c * c
    dc = g * 2.0 * theta * (-s) / r2
    ratio = np.where(s > 0, theta / np.where(s > 0, s, 1.0), 1.0)
    dv = (g * ratio * c / r2)[..., None] * v / 2.0
    G = np.zeros(P.shape)
    for i in range(3):
        G[..., i, i] += dc / 2.0
    G[..., 2, 1] += dv[..., 0]
    G[..., 1, 2] -= dv[..., 0]
    G[..., 0, 2] += dv[..., 1]
    G[..., 2, 0] -= dv[..., 1]
    G[..., 1, 0] += dv[..., 2]
    G[..., 0, 1] -= dv[..., 2]
    dP = np.einsum("...ki,...ij->...kj", Tm, G)  # dL/dP = T G
    g1, g2, g3 = dP[..., 0], dP[..., 1], dP[..., 2]
    p1, p2 = P[..., 0], P[..., 1]
    return g1 + np.cross(p2, g3), g2 + np.cross(g3, p1)


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def _batched(x, ndim):
    x = np.asarray(x, dtype=float)
    return (x[None], True) if x.ndim == ndim else (x, False)


def encode_3p(params, history, n_frames: int | None = None) -> np.ndarray:
    """Latent of a canonical history window, (h+1, 27) or batched.

    ``n_frames`` (normally h+1) rejects windows of any other length.
    """
    x, single = _batched(history, 2)
    x = _check(x, (x.shape[1] if x.ndim == 3 else -1, FEATURES_PER_FRAME), "history")
    if n_frames is not None and x.shape[1] != n_frames:
        raise ShapeError(f"history: expected {n_frames} frames, got {x.shape[1]}")
    z, _ = _e3p_forward(params, x)
    return z[0] if single else z


def _context_batch(ctx):
    if hasattr(ctx, "notes_mask"):
        ctx = {k: getattr(ctx, k) for k in ("notes", "notes_mask", "bombs", "bombs_mask",
                                             "obstacles", "obstacles_mask")}
    single = np.asarray(ctx["notes"]).ndim == 2
    out = {k: (np.asarray(v, dtype=float)[None] if single else np.asarray(v, dtype=float))
           for k, v in ctx.items() if k in _CTX_KEYS}
    for cat in CATEGORIES:
        rows, mask = out[cat], out[cat + "_mask"]
        if rows.ndim != 3 or rows.shape[2] != _ROW_WIDTHS[cat] or mask.shape != rows.shape[:2]:
            raise ShapeError(f"{cat}: expected rows (batch, n, {_ROW_WIDTHS[cat]}) with matching mask")
    return out, single


_CTX_KEYS = ("notes", "notes_mask", "bombs", "bombs_mask", "obstacles", "obstacles_mask")


def encode_game(params, ctx) -> np.ndarray:
    """Permutation-invariant latent of a GameContext (or dict of its arrays)."""
    b, single = _context_batch(ctx)
    z, _ = _egame_forward(params, b)
    return z[0] if single else z


def _style_input(params, refs):
    if hasattr(refs, "refs"):
        refs = refs.features()
    x = np.asarray(refs, dtype=float)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[2:] != (params["estyle.w1"].shape[0] // FEATURES_PER_FRAME, FEATURES_PER_FRAME):
        raise ShapeError(f"style references: expected (batch, N_ref, T, 27), got {np.shape(refs)}")
    return x.reshape(x.shape[0], x.shape[1], -1), single


def encode_style(params, refs) -> np.ndarray:
    """Mean of per-reference latents; refs is (N_ref, T, 27), batched, or a StyleReferenceSet."""
    x, single = _style_input(params, refs)
    z, _ = _estyle_forward(params, x)
    return z[0] if single else z


def decode(params, z3p, zgame, zstyle) -> np.ndarray:
    """Predicted canonical future window features, (T, 27) or batched."""
    z3, single = _batched(z3p, 1)
    zg, _ = _batched(zgame, 1)
    zs, _ = _batched(zstyle, 1)
    T = params["dec.w2"].shape[1] // FEATURES_PER_FRAME
    feats, _ = _decode_forward(params, z3, zg, zs, T)
    return feats[0] if single else feats


def predict(params, batch) -> np.ndarray:
    z3, _ = _e3p_forward(params, np.asarray(batch["history"], dtype=float))
    zg, _ = _egame_forward(params, batch)
    zs, _ = _estyle_forward(params, _style_input(params, batch["refs"])[0])
    T = params["dec.w2"].shape[1] // FEATURES_PER_FRAME
    return _decode_forward(params, z3, zg, zs, T)[0]


def _recon_terms(pred, target):
    pp, _, _ = _frames(pred)
    tp, _, _ = _frames(target)
    pos_err = np.sum((pp - tp) ** 2, axis=-1)
    theta, parts = _geodesic(_orthonormal_columns(pred), _orthonormal_columns(target))
    return pos_err, theta, parts


def loss_recon(pred, target) -> float:
    """Mean squared joint position error plus mean squared geodesic angle."""
    p, single = _batched(pred, 2)
    t, _ = _batched(target, 2)
    if p.shape != t.shape or p.shape[-1] != FEATURES_PER_FRAME:
        raise ShapeError(f"pred {np.shape(pred)} and target {np.shape(target)} differ")
    pos_err, theta, _ = _recon_terms(p, t)
    per = pos_err.mean(axis=(1, 2)) + (theta ** 2).mean(axis=(1, 2))
    return float(per[0]) if single else float(per.mean())


def loss_match(pred, refs, params) -> float:
    """Squared distance between the style latent of ``pred`` and the refs' pooled latent."""
    p, single = _batched(pred, 2)
    x, _ = _style_input(params, refs)
    if len(x) != len(p):
        raise ShapeError("pred and refs batch sizes differ")
    z_pred, _ = _estyle_forward(params, p.reshape(len(p), 1, -1))
    z_ref, _ = _estyle_forward(params, x)
    per = np.sum((z_pred - z_ref) ** 2, axis=-1)
    return float(per[0]) if single else float(per.mean())


def _validate_batch(params, batch):
    cfg_T = params["dec.w2"].shape[1] // FEATURES_PER_FRAME
    hist = _check(batch["history"], (np.shape(batch["history"])[1], FEATURES_PER_FRAME), "history")
    fut = _check(batch["future"], (cfg_T, FEATURES_PER_FRAME), "future")
    if len(hist) != len(fut):
        raise ShapeError("history and future batch sizes differ")
    return cfg_T


def loss_and_grad(params, batch, lambda_match=0.1, need_grad=True, style_target=None):
    """Forward pass over a batch; returns (LossBreakdown, grads or None).

    The matching term compares against the references' style latent with no
    gradient through that branch. ``style_target`` replaces that latent with a
    fixed array, which turns the stop-gradient into an ordinary constant (the
    form finite differences can check).
    """
    T = _validate_batch(params, batch)
    ctx, _ = _context_batch({k: batch[k] for k in _CTX_KEYS})
    hist = np.asarray(batch["history"], dtype=float)
    target = np.asarray(batch["future"], dtype=float)
    refs, _ = _style_input(params, batch["refs"])
    B = len(hist)

    z3, c3 = _e3p_forward(params, hist)
    zg, cg = _egame_forward(params, ctx)
    zs, cs = _estyle_forward(params, refs)
    pred, cd = _decode_forward(params, z3, zg, zs, T)

    pos_err, theta, parts = _recon_terms(pred, target)
    norm = T * N_JOINTS
    recon_per = pos_err.sum(axis=(1, 2)) / norm + (theta ** 2).sum(axis=(1, 2)) / norm
    zp, cp = _estyle_forward(params, pred.reshape(B, 1, -1))
    ref_latent = zs if style_target is None else np.asarray(style_target, dtype=float)
    diff = zp - ref_latent  # constant in this term: no gradient flows into it
    match_per = np.sum(diff * diff, axis=-1)
    recon = float(recon_per.mean())
    match = float(match_per.mean())
    total = recon + lambda_match * match
    breakdown = LossBreakdown(recon, match, total, float(lambda_match))
    if not need_grad:
        return breakdown, None

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    # d(recon)/d(pred)
    pp, _, _ = _frames(pred)
    tp, _, _ = _frames(target)
    dpos = 2.0 * (pp - tp) / (norm * B)
    gc1, gc2 = _geodesic_sq_backward(theta, parts, np.full(theta.shape, 1.0 / (norm * B)))
    dpred = np.concatenate([dpos, gc1, gc2], axis=-1).reshape(pred.shape)
    # d(lambda * match)/d(pred), through the prediction branch only
    dzp = (2.0 * lambda_match / B) * diff
    dpred_match = _estyle_backward(params, cp, dzp, grads, need_input=True)
    dpred = dpred + dpred_match.reshape(pred.shape)

    dz3, dzg, dzs = _decode_backward(params, cd, dpred, grads)
    _estyle_backward(params, cs, dzs, grads)
    _e3p_backward(params, c3, dz3, grads)
    _egame_backward(params, ctx, cg, dzg, grads)
    return breakdown, grads


def total_loss(batch, params, lambda_match=0.1) -> LossBreakdown:
    """Full pipeline loss; a single example dict is promoted to a batch of one."""
    if np.asarray(batch["history"]).ndim == 2:
        batch = {k: np.asarray(v)[None] for k, v in batch.items()}
    return loss_and_grad(params, batch, lambda_match, need_grad=False)[0]


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def init_opt_state(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def train_step(params, batch, opt_state, lr, lambda_match=0.1, momentum=0.9,
               batch_index: int = 0, grad_fn: Callable | None = None):
    """One SGD-with-momentum update: ``v = momentum * v + g; p = p - lr * v``.

    Returns new ``(params, opt_state, LossBreakdown)``; inputs are not mutated.
    """
    grad_fn = grad_fn or loss_and_grad
    breakdown, grads = grad_fn(params, batch, lambda_match)
    if not math.isfinite(breakdown.total):
        raise TrainingError(f"non-finite loss {breakdown.total!r} at batch {batch_index}")
    new_params, new_state = {}, {}
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at batch {batch_index}")
        v = momentum * opt_state[name] + g
        new_state[name] = v
        new_params[name] = value - lr * v
    return new_params, new_state, breakdown


def gradient_check(params, batch, epsilon=1e-5, lambda_match=0.1,
                   grad_fn: Callable | None = None) -> float:
    """Max over all parameter entries of ``|g_fd - g| / max(1e-8, |g_fd| + |g|)``.

    ``g_fd`` is the central difference of the total loss. ``grad_fn`` lets a
    test substitute a (deliberately wrong) analytic gradient.
    """
    grad_fn = grad_fn or loss_and_grad
    _, grads = grad_fn(params, batch, lambda_match)
    # hold the reference style latent at its current value, matching the
    # stop-gradient the analytic gradient applies
    target = encode_style(params, batch["refs"])
    worst = 0.0
    probe = {k: v.copy() for k, v in params.items()}
    for name, value in params.items():
        flat = probe[name].reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_and_grad(probe, batch, lambda_match, False, target)[0].total
            flat[i] = orig - epsilon
            down = loss_and_grad(probe, batch, lambda_match, False, target)[0].total
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            err = abs(fd - g[i]) / max(1e-8, abs(fd) + abs(g[i]))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], cfg: ModelConfig) -> bytes:
    """Write the binary checkpoint; returns the bytes written."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<6I", CHECKPOINT_VERSION, cfg.d_z, cfg.h, cfg.T, cfg.n, cfg.n_ref)
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    data = bytes(out)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, d_z, h, T, n, n_ref = struct.unpack_from("<6I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 28)
    pos = 32
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    width = params["e3p.w2"].shape[0]
    return ModelConfig(d_z=d_z, width=width, h=h, T=T, n=n, n_ref=n_ref), params


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def scheduled_lr(base_lr: float, step: int, n_steps: int, schedule: str = "cosine") -> float:
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, n_steps)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def iterate_minibatches(n_examples: int, batch_size: int, rng):
    """Endless stream of index arrays; reshuffles each epoch, full batch if small."""
    if n_examples <= batch_size:
        idx = np.arange(n_examples)
        while True:
            yield idx
    while True:
        order = rng.permutation(n_examples)
        for start in range(0, n_examples - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train(params, data: dict, n_steps: int, lr: float, rng, batch_size: int = 16,
          lambda_match: float = 0.1, momentum: float = 0.9, schedule: str = "cosine",
          opt_state=None, callback: Callable | None = None):
    """Run ``n_steps`` of :func:`train_step`; returns (params, opt_state, history)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    opt_state = init_opt_state(params) if opt_state is None else opt_state
    n = len(data["history"])
    if n == 0:
        raise TrainingError("no training examples")
    batches = iterate_minibatches(n, batch_size, rng)
    history = []
    for step in range(n_steps):
        idx = next(batches)
        batch = {k: v[idx] for k, v in data.items()}
        step_lr = scheduled_lr(lr, step, n_steps, schedule)
        params, opt_state, lb = train_step(params, batch, opt_state, step_lr, lambda_match,
                                           momentum, batch_index=step)
        history.append(lb)
        if callback is not None:
            callback(step, lb)
    return params, opt_state, history
