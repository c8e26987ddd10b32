"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .context import BOMB_FEATURES, CATEGORIES, NOTE_FEATURES, OBSTACLE_FEATURES
from .model import ShapeError
from .pose import FEATURES_PER_FRAME

_WIDTHS = {"notes": NOTE_FEATURES, "bombs": BOMB_FEATURES, "obstacles": OBSTACLE_FEATURES}


def check_finite_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_batch(batch: dict, require_future: bool = True) -> dict:
    """Coerce a batch dict to float arrays and check that the shapes agree."""
    required = ["history", "refs", *CATEGORIES, *(c + "_mask" for c in CATEGORIES)]
    if require_future:
        required.append("future")
    missing = [k for k in required if k not in batch]
    if missing:
        raise ShapeError(f"batch is missing {', '.join(missing)}")
    out = dict(batch)
    out["history"] = check_finite_array(batch["history"], "history", 3)
    out["refs"] = check_finite_array(batch["refs"], "refs", 4)
    B = len(out["history"])
    if B == 0:
        raise ShapeError("empty batch")
    if out["history"].shape[2] != FEATURES_PER_FRAME or out["refs"].shape[3] != FEATURES_PER_FRAME:
        raise ShapeError(f"pose windows need {FEATURES_PER_FRAME} features per frame")
    if require_future:
        out["future"] = check_finite_array(batch["future"], "future", 3)
        if out["future"].shape[2] != FEATURES_PER_FRAME:
            raise ShapeError(f"future needs {FEATURES_PER_FRAME} features per frame")
    for cat in CATEGORIES:
        rows = check_finite_array(batch[cat], cat, 3)
        mask = check_finite_array(batch[cat + "_mask"], cat + "_mask", 2)
        if rows.shape[2] != _WIDTHS[cat] or mask.shape != rows.shape[:2]:
            raise ShapeError(f"{cat}: expected rows (batch, n, {_WIDTHS[cat]}) with a matching mask")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError(f"{cat}_mask: entries must be 0 or 1")
        out[cat], out[cat + "_mask"] = rows, mask
    for key in out:
        if key in required and len(out[key]) != B:
            raise ShapeError(f"{key}: batch size {len(out[key])} != {B}")
    return out
