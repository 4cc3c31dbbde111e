"""Pose and segmentation error metrics, plus JSON report serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import EmbeddedCloud, RigidTransform
from .segmentation import set_metrics

SIG_DIGITS = 9


@dataclass(frozen=True)
class PoseErrors:
    rotation_deg: float
    translation_m: float
    add: float
    add_s: float


def rotation_error_deg(R_est, R_gt) -> float:
    c = (np.trace(np.asarray(R_gt).T @ np.asarray(R_est)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_errors(est: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    return (rotation_error_deg(est.rotation, gt.rotation),
            float(np.linalg.norm(est.translation - gt.translation)))


def add_metrics(model, est: RigidTransform, gt: RigidTransform,
                chunk: int = 1024) -> tuple[float, float]:
    """ADD and ADD-S (brute-force closest-point) over the model points."""
    pts = model.points if isinstance(model, EmbeddedCloud) else np.asarray(model, dtype=float)
    if len(pts) == 0:
        raise ValueError("ADD needs a non-empty model")
    a = est.apply(pts)
    b = gt.apply(pts)
    direct = np.linalg.norm(a - b, axis=1)
    add = float(direct.mean())
    mins = np.empty(len(a))
    bb = (b ** 2).sum(axis=1)
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = (blk ** 2).sum(axis=1)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        # the matching point is always a candidate, so ADD-S never exceeds ADD
        mins[s:s + chunk] = np.minimum(np.sqrt(np.maximum(d2.min(axis=1), 0.0)),
                                       direct[s:s + chunk])
    return add, float(mins.mean())


def full_pose_errors(model, est: RigidTransform, gt: RigidTransform) -> PoseErrors:
    r, t = pose_errors(est, gt)
    add, adds = add_metrics(model, est, gt)
    return PoseErrors(r, t, add, adds)


def segmentation_metrics(selected, gt_indices) -> tuple[float, float, float]:
    """(precision, recall, IoU); precision is 0 for an empty selection."""
    return set_metrics(selected, gt_indices)


# ---------------------------------------------------------------------------
# serialization

def _round(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(f"{x:.{SIG_DIGITS}g}") if np.isfinite(x) else None
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """JSON text with every float rounded to 9 significant digits."""
    return json.dumps(_round(obj), indent=2) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def pose_record(transform: RigidTransform, inliers: int = 0, converged: bool = True,
                residual_rms: float = 0.0, stage_timings_ms=None) -> dict:
    return {
        "rotation": transform.rotation.tolist(),
        "translation": transform.translation.tolist(),
        "scale": transform.scale,
        "inliers": int(inliers),
        "converged": bool(converged),
        "residual_rms": float(residual_rms),
        "stage_timings_ms": dict(stage_timings_ms or {}),
    }


def read_pose(path) -> RigidTransform:
    d = json.loads(Path(path).read_text())
    return RigidTransform.from_matrix(d["rotation"], d["translation"], d.get("scale", 1.0),
                                      project=True)
