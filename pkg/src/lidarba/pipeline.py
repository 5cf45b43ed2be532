"""Scan-to-map odometry with periodic sliding-window refinement.

Each incoming scan is registered against the cached leaf features of the
two voxel maps, pushed into the maps, and every few scans the whole window
is refined by eigenvalue bundle adjustment.  Scans that fall out of the
window are folded into the maps' fixed statistics.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .features import FeatureKind
from .geometry import Pose, boxplus, skew_batch
from .scan import LabeledScan
from .solver import BAProblem, CostItem, LMConfig, NoConstraints, SolveReport, optimize
from .voxel_map import VoxelMap, VoxelMapConfig, compress_per_scan

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    window_size: int = 20
    refine_every: int | None = 5  # None disables refinement
    odometry_iters: int = 10
    odometry_step_tol: float = 1e-6
    match_radius: float = 1.0
    min_matches: int = 10
    degeneracy_ratio: float = 1e-6
    compress: bool = True
    final_refine: bool = True
    voxel: VoxelMapConfig = field(default_factory=VoxelMapConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if self.refine_every is not None and not 1 <= self.refine_every <= self.window_size:
            raise ValueError("refine_every must lie in [1, window_size]")
        if self.odometry_iters < 1:
            raise ValueError("odometry_iters must be positive")

    @property
    def refine_enabled(self) -> bool:
        return self.refine_every is not None

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        voxel = VoxelMapConfig(**d.pop("voxel", {}))
        lm = LMConfig(**d.pop("lm", {}))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(voxel=voxel, lm=lm, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WindowEntry:
    scan_id: int
    pose: Pose
    scan: LabeledScan


@dataclass
class RegistrationResult:
    pose: Pose
    n_matches: int = 0
    iterations: int = 0
    degenerate: bool = False
    bootstrap: bool = False
    rank: int = 6


class PipelineState:
    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.plane_map = VoxelMap(FeatureKind.PLANE, self.config.voxel)
        self.edge_map = VoxelMap(FeatureKind.EDGE, self.config.voxel)
        self.window: list[WindowEntry] = []
        self.trajectory: list[tuple[int, Pose]] = []
        self.flags: list[tuple[int, str]] = []
        self._seen: set[int] = set()
        self._since_refine = 0

    @property
    def maps(self) -> tuple[VoxelMap, VoxelMap]:
        return self.plane_map, self.edge_map

    def latest_pose(self) -> Pose | None:
        if self.window:
            return self.window[-1].pose
        if self.trajectory:
            return self.trajectory[-1][1]
        return None

    def full_trajectory(self) -> list[tuple[int, Pose]]:
        return self.trajectory + [(e.scan_id, e.pose) for e in self.window]


def _residuals(index, kind: FeatureKind, local: np.ndarray, pose: Pose, radius: float):
    """Stacked residuals and 6-column Jacobians for matched points."""
    if len(local) == 0 or index.empty:
        return np.zeros(0), np.zeros((0, 6))
    world = pose.apply(local)
    idx, _ = index.match(world, radius)
    ok = idx >= 0
    if not np.any(ok):
        return np.zeros(0), np.zeros((0, 6))
    pf, p = local[ok], world[ok]
    n, q = index.n[idx[ok]], index.q[idx[ok]]
    if kind is FeatureKind.PLANE:
        r = np.einsum("ij,ij->i", n, p - q)
        J = np.hstack([np.cross(pf, n @ pose.rotation), n])
        return r, J
    # edge: residual is the 3-vector offset orthogonal to the line
    P = np.eye(3) - n[:, :, None] * n[:, None, :]
    r = np.einsum("iab,ib->ia", P, p - q)
    # d p / d phi = -R skew(pf)
    dphi = -np.einsum("ab,ibc->iac", pose.rotation, skew_batch(pf))
    J = np.concatenate([np.matmul(P, dphi), P], axis=2)
    return r.reshape(-1), J.reshape(-1, 6)


def register_scan(state: PipelineState, scan: LabeledScan, initial_guess: Pose | None = None) -> RegistrationResult:
    """Gauss-Newton scan-to-map registration against cached leaf features.

    Directions whose Hessian eigenvalue falls below ``degeneracy_ratio``
    times the largest are left at the guess and the result is flagged.
    """
    cfg = state.config
    guess = initial_guess or state.latest_pose() or Pose.identity()
    if not guess.is_valid():
        raise ValueError("initial guess is not a valid pose")
    pidx, eidx = state.plane_map.index(), state.edge_map.index()
    if pidx.empty and eidx.empty:
        return RegistrationResult(guess, bootstrap=True)
    pose = guess
    result = RegistrationResult(guess)
    for it in range(cfg.odometry_iters):
        rp, Jp = _residuals(pidx, FeatureKind.PLANE, scan.plane_points, pose, cfg.match_radius)
        re, Je = _residuals(eidx, FeatureKind.EDGE, scan.edge_points, pose, cfg.match_radius)
        n_matches = len(rp) + len(re) // 3
        if n_matches < cfg.min_matches:
            log.debug("scan %s: only %d matches", scan.scan_id, n_matches)
            return RegistrationResult(guess, n_matches=n_matches, iterations=it, degenerate=True, rank=0)
        r = np.concatenate([rp, re])
        J = np.vstack([Jp, Je])
        H = J.T @ J
        g = J.T @ r
        w, V = np.linalg.eigh(H)
        keep = w > cfg.degeneracy_ratio * max(w[-1], 1e-300)
        delta = -V[:, keep] @ ((V[:, keep].T @ g) / w[keep])
        pose = boxplus(pose, delta)
        result = RegistrationResult(pose, n_matches, it + 1, bool(not np.all(keep)), rank=int(keep.sum()))
        if np.linalg.norm(delta) < cfg.odometry_step_tol:
            break
    return result


def marginalize_oldest(state: PipelineState) -> int:
    entry = state.window.pop(0)
    for vmap in state.maps:
        if entry.scan_id in vmap.scans:
            vmap.marginalize_scan(entry.scan_id, entry.pose)
    state.trajectory.append((entry.scan_id, entry.pose))
    return entry.scan_id


def push_scan(state: PipelineState, scan: LabeledScan, pose: Pose) -> None:
    """Insert a registered scan into both maps, marginalizing if the window is full."""
    sid = int(scan.scan_id)
    if sid in state._seen:
        raise ValueError(f"duplicate scan id {sid}")
    if len(state.window) >= state.config.window_size:
        marginalize_oldest(state)
    state._seen.add(sid)
    for vmap, pts in ((state.plane_map, scan.plane_points), (state.edge_map, scan.edge_points)):
        if len(pts):
            vmap.insert_points(sid, pts, pose.apply(pts))
        vmap.rebuild()
    state.window.append(WindowEntry(sid, pose, scan))
    state._since_refine += 1


def window_items(state: PipelineState) -> list[CostItem]:
    """Cost items from every leaf that holds window points, in both maps."""
    pos = {e.scan_id: i for i, e in enumerate(state.window)}
    items = []
    for vmap in state.maps:
        for node in vmap.window_leaves(vmap.roots_of_scans(pos)):
            if state.config.compress:
                node = compress_per_scan(node, state.config.voxel)
            ids = np.array([pos[int(s)] for s in node.scan_ids], dtype=int)
            if node.fixed_stats is None and len(np.unique(ids)) < 2:
                continue  # a single rigid scan has no pose gradient
            items.append(CostItem(vmap.kind, ids, node.local, node.fixed_stats))
    return items


def refine(state: PipelineState) -> SolveReport | None:
    """Bundle-adjust the window with its oldest pose fixed, then update the maps."""
    state._since_refine = 0
    if len(state.window) < 2:
        return None
    items = window_items(state)
    if not items:
        state.flags.append((state.window[-1].scan_id, "no constraints"))
        return None
    problem = BAProblem([e.pose for e in state.window], items, {0})
    try:
        poses, report = optimize(problem, state.config.lm)
    except NoConstraints:
        state.flags.append((state.window[-1].scan_id, "no constraints"))
        return None
    for e, p in zip(state.window, poses):
        e.pose = p
    update = {e.scan_id: e.pose for e in state.window}
    for vmap in state.maps:
        vmap.update_features(update)
    return report


@dataclass
class RunStats:
    odometry_ms: list[float] = field(default_factory=list)
    refine_ms: list[float] = field(default_factory=list)
    refine_iterations: list[int] = field(default_factory=list)
    window_voxels: list[int] = field(default_factory=list)
    plane_leaves: int = 0
    edge_leaves: int = 0
    degenerate_scans: list[int] = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_scans"] = len(self.odometry_ms)
        d["n_refines"] = len(self.refine_ms)
        return d


def _do_refine(state: PipelineState, stats: RunStats) -> None:
    ids = [e.scan_id for e in state.window]
    n_vox = sum(len(m.window_leaves(m.roots_of_scans(ids))) for m in state.maps)
    t0 = time.perf_counter()
    report = refine(state)
    if report is not None:
        stats.refine_ms.append(1e3 * (time.perf_counter() - t0))
        stats.refine_iterations.append(report.iterations)
        stats.window_voxels.append(n_vox)


def run(scans: Iterable[LabeledScan], config: PipelineConfig | None = None,
        state: PipelineState | None = None) -> tuple[list[tuple[int, Pose]], RunStats]:
    """Process scans in order; returns the full trajectory and timing stats."""
    state = state or PipelineState(config)
    cfg = state.config
    stats = RunStats()
    for scan in scans:
        t0 = time.perf_counter()
        reg = register_scan(state, scan)
        stats.odometry_ms.append(1e3 * (time.perf_counter() - t0))
        if reg.degenerate and not reg.bootstrap:
            stats.degenerate_scans.append(int(scan.scan_id))
        push_scan(state, scan, reg.pose)
        if cfg.refine_enabled and state._since_refine >= cfg.refine_every:
            _do_refine(state, stats)
    if cfg.refine_enabled and cfg.final_refine and state._since_refine:
        _do_refine(state, stats)
    stats.plane_leaves = len(state.plane_map.leaves())
    stats.edge_leaves = len(state.edge_map.leaves())
    stats.flags = list(state.flags)
    return state.full_trajectory(), stats
