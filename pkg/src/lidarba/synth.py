"""Synthetic plane/edge scenes observed from a known trajectory."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, exp_so3
from .metrics import path_length  # noqa: F401  (re-exported)
from .scan import LabeledScan


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


@dataclass
class PlaneSpec:
    center: np.ndarray
    normal: np.ndarray
    extent: tuple[float, float]  # half-widths along u_axis and normal x u_axis
    u_axis: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.normal = _unit(self.normal)
        if self.u_axis is None:
            helper = np.eye(3)[np.argmin(np.abs(self.normal))]
            self.u_axis = np.cross(self.normal, helper)
        u = np.asarray(self.u_axis, dtype=float)
        self.u_axis = _unit(u - (u @ self.normal) * self.normal)

    @property
    def radius(self) -> float:
        return float(np.hypot(*self.extent))

    def sample(self, rng, n):
        v_axis = np.cross(self.normal, self.u_axis)
        s = rng.uniform(-1.0, 1.0, size=(n, 2)) * np.asarray(self.extent, dtype=float)
        return self.center + s[:, :1] * self.u_axis + s[:, 1:] * v_axis


@dataclass
class EdgeSpec:
    center: np.ndarray
    direction: np.ndarray
    length: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.direction = _unit(self.direction)

    @property
    def radius(self) -> float:
        return 0.5 * self.length

    def sample(self, rng, n):
        s = rng.uniform(-0.5, 0.5, size=(n, 1)) * self.length
        return self.center + s * self.direction


@dataclass
class SceneSpec:
    planes: list[PlaneSpec]
    edges: list[EdgeSpec]
    trajectory: list[Pose]
    points_per_feature_per_scan: int = 100
    edge_points_per_scan: int | None = None
    sigma_point: float = 0.0
    sigma_rot: float = 0.0
    sigma_t: float = 0.0
    seed: int = 0
    max_range: float | None = None
    dt: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        planes = [PlaneSpec(p["center"], p["normal"], tuple(p["extent"]), p.get("u_axis")) for p in d.get("planes", [])]
        edges = [EdgeSpec(e["center"], e["direction"], e["length"]) for e in d.get("edges", [])]
        traj = []
        for t in d["trajectory"]:
            traj.append(Pose.from_rotvec(t.get("rotvec", (0.0, 0.0, 0.0)), t.get("t", (0.0, 0.0, 0.0))))
        noise = d.get("noise", {})
        return cls(planes, edges, traj,
                   points_per_feature_per_scan=d.get("points_per_feature_per_scan", 100),
                   edge_points_per_scan=d.get("edge_points_per_scan"),
                   sigma_point=noise.get("sigma_point", 0.0),
                   sigma_rot=noise.get("sigma_rot", 0.0),
                   sigma_t=noise.get("sigma_t", 0.0),
                   seed=d.get("seed", 0),
                   max_range=d.get("max_range"),
                   dt=d.get("dt", 0.1))

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        from .geometry import log_so3

        return {
            "planes": [{"center": p.center.tolist(), "normal": p.normal.tolist(), "extent": list(p.extent),
                        "u_axis": p.u_axis.tolist()} for p in self.planes],
            "edges": [{"center": e.center.tolist(), "direction": e.direction.tolist(), "length": e.length}
                      for e in self.edges],
            "trajectory": [{"rotvec": log_so3(T.rotation).tolist(), "t": T.translation.tolist()}
                           for T in self.trajectory],
            "points_per_feature_per_scan": self.points_per_feature_per_scan,
            "edge_points_per_scan": self.edge_points_per_scan,
            "noise": {"sigma_point": self.sigma_point, "sigma_rot": self.sigma_rot, "sigma_t": self.sigma_t},
            "seed": self.seed,
            "max_range": self.max_range,
            "dt": self.dt,
        }


@dataclass
class SyntheticScene:
    scans: list[LabeledScan]
    truth: list[Pose]
    initial: list[Pose]  # truth perturbed by the pose noise; the first pose is exact
    plane_labels: list[np.ndarray] = field(default_factory=list)  # feature index per plane point
    edge_labels: list[np.ndarray] = field(default_factory=list)


def _visible_samples(feature, rng, n, origin, max_range, oversample=8, rounds=6):
    if n == 0:
        return np.zeros((0, 3))
    if max_range is None:
        return feature.sample(rng, n)
    if np.linalg.norm(feature.center - origin) - feature.radius > max_range:
        return np.zeros((0, 3))
    got = []
    have = 0
    for _ in range(rounds):
        cand = feature.sample(rng, n * oversample)
        keep = cand[np.linalg.norm(cand - origin, axis=1) <= max_range]
        got.append(keep)
        have += len(keep)
        if have >= n:
            break
    pts = np.vstack(got)
    return pts[:n]


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    if not spec.planes and not spec.edges:
        raise ValueError("scene has no features")
    rng = np.random.default_rng(spec.seed)
    n_plane = spec.points_per_feature_per_scan
    n_edge = spec.edge_points_per_scan if spec.edge_points_per_scan is not None else n_plane
    scans, initial, plane_labels, edge_labels = [], [], [], []
    for j, T in enumerate(spec.trajectory):
        origin = T.translation
        inv = T.inverse()
        groups = []
        for features, count in ((spec.planes, n_plane), (spec.edges, n_edge)):
            pts, labels = [], []
            for f_idx, feat in enumerate(features):
                p = _visible_samples(feat, rng, count, origin, spec.max_range)
                pts.append(p)
                labels.append(np.full(len(p), f_idx, dtype=int))
            P = np.vstack(pts) if pts else np.zeros((0, 3))
            if spec.sigma_point > 0 and len(P):
                P = P + rng.normal(scale=spec.sigma_point, size=P.shape)
            groups.append((inv.apply(P), np.concatenate(labels) if labels else np.zeros(0, dtype=int)))
        scans.append(LabeledScan(j, j * spec.dt, groups[0][0], groups[1][0]))
        plane_labels.append(groups[0][1])
        edge_labels.append(groups[1][1])
        if j == 0:
            initial.append(T)
        else:
            phi = rng.normal(scale=spec.sigma_rot, size=3)
            dt = rng.normal(scale=spec.sigma_t, size=3)
            initial.append(Pose(T.rotation @ exp_so3(phi), T.translation + dt))
    return SyntheticScene(scans, list(spec.trajectory), initial, plane_labels, edge_labels)


# ---------------------------------------------------------------------------
# canned scenes


def room_scene(n_scans: int = 20, seed: int = 0, points_per_plane: int = 150, points_per_edge: int = 40,
               sigma_point: float = 0.0, sigma_rot: float = np.deg2rad(2.0), sigma_t: float = 0.05) -> SceneSpec:
    """Closed box room (6 planes, 8 edges) seen from a short in-room path.

    Walls sit off the voxel lattice so no plane coincides with a cell face.
    """
    lo = np.array([-3.62, -2.83, -1.16])
    hi = np.array([4.41, 3.27, 1.71])
    c = (lo + hi) / 2
    h = (hi - lo) / 2
    inset = 0.02
    planes = [
        PlaneSpec([c[0], c[1], lo[2]], [0, 0, 1], (h[0] - inset, h[1] - inset), [1, 0, 0]),
        PlaneSpec([c[0], c[1], hi[2]], [0, 0, -1], (h[0] - inset, h[1] - inset), [1, 0, 0]),
        PlaneSpec([lo[0], c[1], c[2]], [1, 0, 0], (h[1] - inset, h[2] - inset), [0, 1, 0]),
        PlaneSpec([hi[0], c[1], c[2]], [-1, 0, 0], (h[1] - inset, h[2] - inset), [0, 1, 0]),
        PlaneSpec([c[0], lo[1], c[2]], [0, 1, 0], (h[0] - inset, h[2] - inset), [1, 0, 0]),
        PlaneSpec([c[0], hi[1], c[2]], [0, -1, 0], (h[0] - inset, h[2] - inset), [1, 0, 0]),
    ]
    edges = []
    for x in (lo[0], hi[0]):
        for y in (lo[1], hi[1]):
            edges.append(EdgeSpec([x, y, c[2]], [0, 0, 1], 2 * h[2]))
    edges += [
        EdgeSpec([c[0], lo[1], lo[2]], [1, 0, 0], 2 * h[0]),
        EdgeSpec([c[0], hi[1], lo[2]], [1, 0, 0], 2 * h[0]),
        EdgeSpec([lo[0], c[1], lo[2]], [0, 1, 0], 2 * h[1]),
        EdgeSpec([hi[0], c[1], lo[2]], [0, 1, 0], 2 * h[1]),
    ]
    traj = []
    for j in range(n_scans):
        a = 2 * np.pi * j / max(n_scans, 1)
        pos = c + np.array([1.5 * np.cos(a), 1.0 * np.sin(a), 0.2 * np.sin(2 * a)])
        rv = np.array([0.05 * np.sin(a), 0.04 * np.cos(a), a / 2])
        traj.append(Pose.from_rotvec(rv, pos))
    return SceneSpec(planes, edges, traj, points_per_plane, points_per_edge,
                     sigma_point=sigma_point, sigma_rot=sigma_rot, sigma_t=sigma_t, seed=seed)


def corridor_loop_scene(seed: int = 0, sigma_point: float = 0.02, length: float = 32.0, width: float = 20.0,
                        step: float = 0.6, turn_radius: float = 1.0, turn_step_deg: float = 9.0,
                        points_per_feature: int = 40, max_range: float = 8.0, tile: float = 2.0) -> SceneSpec:
    """Closed rectangular corridor loop whose last pose equals the first.

    Besides walls, floor and ceiling the corridor has door-frame edges and
    narrow pilaster faces at irregular spacing, so motion along the
    corridor axis stays observable.  Large surfaces are tiled into panels
    of at most ``tile`` metres so the sampled density stays roughly even.
    """
    rng = np.random.default_rng(10_000 + seed)
    off = np.array([0.37, 0.21, 0.0])
    hw, z_lo, z_hi = 1.5, -1.13, 1.61
    zc, hz = (z_lo + z_hi) / 2, (z_hi - z_lo) / 2
    L, W = length, width
    planes, edges = [], []

    def add_plane(center, normal, extent, u):
        # tile into panels so every panel in range gets its share of points
        base = PlaneSpec(np.asarray(center, dtype=float) + off, normal, extent, u)
        v = np.cross(base.normal, base.u_axis)
        nu = max(1, int(np.ceil(2 * extent[0] / tile)))
        nv = max(1, int(np.ceil(2 * extent[1] / tile)))
        for i in range(nu):
            for k in range(nv):
                cu = -extent[0] + (2 * i + 1) * extent[0] / nu
                cv = -extent[1] + (2 * k + 1) * extent[1] / nv
                planes.append(PlaneSpec(base.center + cu * base.u_axis + cv * v, base.normal,
                                        (extent[0] / nu, extent[1] / nv), base.u_axis))

    # walls: outer ring and inner ring
    for y, n, x0, x1 in ((-hw, 1, -hw, L + hw), (W + hw, -1, -hw, L + hw), (hw, -1, hw, L - hw), (W - hw, 1, hw, L - hw)):
        add_plane([(x0 + x1) / 2, y, zc], [0, n, 0], ((x1 - x0) / 2 - 0.02, hz - 0.02), [1, 0, 0])
    for x, n, y0, y1 in ((-hw, 1, -hw, W + hw), (L + hw, -1, -hw, W + hw), (hw, -1, hw, W - hw), (L - hw, 1, hw, W - hw)):
        add_plane([x, (y0 + y1) / 2, zc], [n, 0, 0], ((y1 - y0) / 2 - 0.02, hz - 0.02), [0, 1, 0])
    # floor and ceiling strips
    for z, n in ((z_lo, 1), (z_hi, -1)):
        add_plane([L / 2, 0, z], [0, 0, n], (L / 2 + hw, hw), [1, 0, 0])
        add_plane([L / 2, W, z], [0, 0, n], (L / 2 + hw, hw), [1, 0, 0])
        add_plane([0, W / 2, z], [0, 0, n], (W / 2 - hw, hw), [0, 1, 0])
        add_plane([L, W / 2, z], [0, 0, n], (W / 2 - hw, hw), [0, 1, 0])
    # door frames (vertical edges) and pilaster faces along each straight
    segs = [((0, 0), (1, 0), L), ((L, 0), (0, 1), W), ((L, W), (-1, 0), L), ((0, W), (0, -1), W)]
    for (sx, sy), (dx, dy), seg_len in segs:
        a = np.array([dx, dy, 0.0])
        side = np.array([-dy, dx, 0.0])
        s = 2.0 + rng.uniform(0, 1.0)
        k = 0
        while s < seg_len - 2.0:
            base = np.array([sx, sy, 0.0]) + s * a
            wall = 1 if k % 2 == 0 else -1
            p = base + wall * hw * side
            if k % 3 == 2:
                # pilaster face, normal along the corridor
                add_plane(p - wall * 0.15 * side + np.array([0, 0, zc]), a, (0.15, hz - 0.05), side)
            else:
                edges.append(EdgeSpec(p + np.array([0, 0, zc]) + off, [0, 0, 1], 2 * hz - 0.1))
            s += rng.uniform(2.0, 3.5)
            k += 1
    # trajectory: straights plus quarter-circle turns
    r = turn_radius
    poses = []
    yaw = 0.0
    for (sx, sy), (dx, dy), seg_len in segs:
        a = np.array([dx, dy, 0.0])
        start = np.array([sx, sy, 0.0]) + r * a
        n_lin = int(round((seg_len - 2 * r) / step))
        for i in range(n_lin):
            poses.append((start + (seg_len - 2 * r) * i / n_lin * a, yaw))
        corner = np.array([sx, sy, 0.0]) + seg_len * a
        centre = corner - r * a + r * np.array([-dy, dx, 0.0])
        n_turn = int(round(90.0 / turn_step_deg))
        for i in range(n_turn):
            th = (np.pi / 2) * i / n_turn
            radial = -np.array([-dy, dx, 0.0])
            pos = centre + r * (np.cos(th) * radial + np.sin(th) * a)
            poses.append((pos, yaw + th))
        yaw += np.pi / 2
    poses.append(poses[0])
    traj = []
    for j, (pos, yw) in enumerate(poses):
        wob = 0.0 if j in (0, len(poses) - 1) else 1.0
        z = wob * 0.05 * np.sin(0.3 * j)
        rv = np.array([wob * 0.02 * np.sin(0.21 * j), wob * 0.02 * np.cos(0.17 * j) - 0.02 * wob, yw])
        traj.append(Pose.from_rotvec(rv, pos + off + np.array([0, 0, z])))
    # make the return pose exactly the start pose
    traj[-1] = traj[0]
    return SceneSpec(planes, edges, traj, points_per_feature, None, sigma_point=sigma_point,
                     seed=seed, max_range=max_range)


def label_items(scene: SyntheticScene, cell_size: float = 1.0, min_points: int = 10):
    """Cost items from the generator's own labels, one per (feature, cell).

    Cells are assigned from the true world position, so the grouping is
    exact and independent of any later change of world frame.
    """
    from .features import FeatureKind
    from .solver import CostItem

    groups: dict = {}
    for j, (scan, T) in enumerate(zip(scene.scans, scene.truth)):
        for kind, pts, labels in ((FeatureKind.PLANE, scan.plane_points, scene.plane_labels[j]),
                                  (FeatureKind.EDGE, scan.edge_points, scene.edge_labels[j])):
            if len(pts) == 0:
                continue
            cells = np.floor(T.apply(pts) / cell_size).astype(int)
            for i in range(len(pts)):
                key = (kind.value, int(labels[i]), *cells[i].tolist())
                g = groups.setdefault(key, ([], []))
                g[0].append(j)
                g[1].append(pts[i])
    items = []
    for key in sorted(groups):
        ids, pts = groups[key]
        if len(ids) >= min_points and len(set(ids)) >= 2:
            items.append(CostItem(FeatureKind(key[0]), np.array(ids), np.array(pts)))
    return items
