"""Plain-text scan and trajectory files.

Scan file::

    # balm-scan v1
    scan_id 12
    timestamp 1.2
    P 0.1 2.0 -0.3
    E 1.0 1.0 0.5

Trajectory file: one ``scan_id tx ty tz qx qy qz qw`` line per pose.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .scan import LabeledScan

SCAN_HEADER = "# balm-scan v1"
_LABELS = ("P", "E")


class FormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    # 17 significant digits round-trip a double exactly; "+ 0.0" drops negative zero
    return format(float(x) + 0.0, ".17g")


def format_scan(scan: LabeledScan) -> str:
    lines = [SCAN_HEADER, f"scan_id {int(scan.scan_id)}", f"timestamp {_fmt(scan.timestamp)}"]
    for label, pts in (("P", scan.plane_points), ("E", scan.edge_points)):
        lines.extend(f"{label} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}" for p in pts)
    return "\n".join(lines) + "\n"


def save_scan(path, scan: LabeledScan) -> None:
    Path(path).write_text(format_scan(scan))


def parse_scan(text: str) -> LabeledScan:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCAN_HEADER:
        raise FormatError(f"line 1: expected header '{SCAN_HEADER}'")
    fields = {}
    for lineno, name, cast in ((2, "scan_id", int), (3, "timestamp", float)):
        parts = lines[lineno - 1].split() if len(lines) >= lineno else []
        if len(parts) != 2 or parts[0] != name:
            raise FormatError(f"malformed line {lineno}: expected '{name} <value>'")
        try:
            fields[name] = cast(parts[1])
        except ValueError:
            raise FormatError(f"malformed line {lineno}: bad {name} value {parts[1]!r}") from None
    pts = {"P": [], "E": []}
    for lineno, line in enumerate(lines[3:], start=4):
        parts = line.split()
        if not parts:
            continue
        if parts[0] not in _LABELS:
            raise FormatError(f"unknown label at line {lineno}: {parts[0]!r}")
        if len(parts) != 4:
            raise FormatError(f"malformed line {lineno}: expected '<label> <x> <y> <z>'")
        try:
            xyz = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError(f"malformed line {lineno}: non-numeric coordinate") from None
        if not np.all(np.isfinite(xyz)):
            raise FormatError(f"malformed line {lineno}: non-finite coordinate")
        pts[parts[0]].append(xyz)
    if not pts["P"] and not pts["E"]:
        raise FormatError("no features")
    return LabeledScan(fields["scan_id"], fields["timestamp"],
                       np.array(pts["P"]).reshape(-1, 3), np.array(pts["E"]).reshape(-1, 3))


def load_scan(path) -> LabeledScan:
    return parse_scan(Path(path).read_text())


def scan_filename(scan_id: int) -> str:
    return f"scan_{int(scan_id):06d}.txt"


def save_scans(directory, scans) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for s in scans:
        p = d / scan_filename(s.scan_id)
        save_scan(p, s)
        out.append(p)
    return out


def load_scans(directory) -> list[LabeledScan]:
    """Every ``*.txt`` scan in ``directory``, ordered by scan id."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    scans = []
    for p in sorted(d.glob("*.txt")):
        with open(p) as f:
            if f.readline().strip() != SCAN_HEADER:
                continue
        try:
            scans.append(load_scan(p))
        except FormatError as e:
            raise FormatError(f"{p.name}: {e}") from None
    if not scans:
        raise FileNotFoundError(f"no scan files in {d}")
    scans.sort(key=lambda s: s.scan_id)
    ids = [s.scan_id for s in scans]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate scan ids")
    return scans


# ---------------------------------------------------------------------------
# trajectories


def pose_to_quat(pose: Pose, tol: float = 1e-6) -> np.ndarray:
    """Unit quaternion ``(x, y, z, w)`` with ``w >= 0``."""
    R = pose.rotation
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or np.linalg.det(R) <= 0:
        raise ValueError("rotation is not orthonormal")
    q = Rotation.from_matrix(R).as_quat()
    if q[3] < 0:
        q = -q
    return q


def quat_to_pose(q, t) -> Pose:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
        raise ValueError("quaternion is not unit length")
    return Pose(Rotation.from_quat(q / n).as_matrix(), t)


def format_trajectory(trajectory) -> str:
    lines = []
    for sid, pose in trajectory:
        q = pose_to_quat(pose)
        vals = " ".join(_fmt(v) for v in (*pose.translation, *q))
        lines.append(f"{int(sid)} {vals}")
    return "\n".join(lines) + ("\n" if lines else "")


def save_trajectory(path, trajectory) -> None:
    """``trajectory``: iterable of ``(scan_id, Pose)``."""
    Path(path).write_text(format_trajectory(trajectory))


def load_trajectory(path) -> list[tuple[int, Pose]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 8:
            raise FormatError(f"malformed line {lineno}: expected 8 fields")
        try:
            sid = int(parts[0])
            v = np.array([float(x) for x in parts[1:]])
            out.append((sid, quat_to_pose(v[3:], v[:3])))
        except ValueError as e:
            raise FormatError(f"malformed line {lineno}: {e}") from None
    return out


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
