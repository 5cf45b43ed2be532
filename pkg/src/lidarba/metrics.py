"""Trajectory drift figures."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Pose


@dataclass
class DriftReport:
    mode: str  # "loop" or "truth"
    n_poses: int
    path_length: float
    error: float  # m; end-to-end gap (loop) or translation RMSE (truth)
    percentage: float
    axis_error: tuple[float, float, float]  # per-axis magnitude, same convention as ``error``
    elevation_error: float  # z component of ``axis_error``

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axis_error"] = list(self.axis_error)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _poses(traj) -> tuple[list[int] | None, list[Pose]]:
    traj = list(traj)
    if traj and isinstance(traj[0], tuple):
        return [int(s) for s, _ in traj], [p for _, p in traj]
    return None, traj


def path_length(poses) -> float:
    t = np.array([p.translation for p in poses]).reshape(-1, 3)
    return float(np.sum(np.linalg.norm(np.diff(t, axis=0), axis=1)))


def evaluate_drift(trajectory, truth=None) -> DriftReport:
    """Drift of ``trajectory`` (Poses or ``(scan_id, Pose)`` pairs).

    Without ``truth`` the trajectory is taken to be a closed loop and the
    error is the gap between its first and last position.  With ``truth``
    the estimate is moved so its first pose coincides with the first true
    pose and the error is the RMS position error.  When both sides carry
    scan ids, poses are paired by id.
    """
    ids, est = _poses(trajectory)
    if not est:
        raise ValueError("empty trajectory")
    length = path_length(est)
    if truth is None:
        gap = est[-1].translation - est[0].translation
        err = float(np.linalg.norm(gap))
        axis = np.abs(gap)
        mode = "loop"
    else:
        t_ids, gt = _poses(truth)
        if ids is not None and t_ids is not None:
            lookup = dict(zip(t_ids, gt))
            missing = [s for s in ids if s not in lookup]
            if missing:
                raise ValueError(f"no ground truth for scan ids {missing[:5]}")
            gt = [lookup[s] for s in ids]
        elif len(gt) != len(est):
            raise ValueError("trajectory and ground truth differ in length")
        align = gt[0] @ est[0].inverse()
        diff = np.array([(align @ e).translation - g.translation for e, g in zip(est, gt)])
        err = float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))
        axis = np.sqrt(np.mean(diff ** 2, axis=0))
        mode = "truth"
    pct = 100.0 * err / length if length > 0 else (0.0 if err == 0 else float("inf"))
    return DriftReport(mode, len(est), length, err, pct, tuple(float(a) for a in axis), float(axis[2]))
