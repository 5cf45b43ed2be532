"""Finite-difference self-check of the analytic eigenvalue derivatives.

Two oracles run on random instances:

* point space: d lambda_k / d p against central differences of the
  eigenvalues, and the point Hessian against central differences of a
  reference Jacobian;
* pose space: the assembled window gradient and Hessian against central
  differences of the total cost, all perturbed pose sets being evaluated
  in one replicated batch.

Spectra whose relevant eigenvalues are closer than ``GAP_TOL`` (relative
to the largest) are counted as skipped, not failed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .assembly import ItemBatch
from .features import (
    GAP_TOL,
    DegenerateSpectrum,
    FeatureKind,
    cluster_from_points,
    lambda_point_hessian,
    lambda_point_jacobian,
    spectrum_ok,
)
from .geometry import Pose

JACOBIAN_TOL = 1e-5
HESSIAN_TOL = 1e-3
_TINY = 1e-300


@dataclass
class DerivativeReport:
    seed: int
    trials: int
    jacobian_checks: int = 0
    hessian_checks: int = 0
    skipped: int = 0
    max_jacobian_error: float = 0.0
    max_hessian_error: float = 0.0
    pose_checks: int = 0
    pose_skipped: int = 0
    max_pose_jacobian_error: float = 0.0
    max_pose_hessian_error: float = 0.0
    jacobian_tol: float = JACOBIAN_TOL
    hessian_tol: float = HESSIAN_TOL

    @property
    def passed(self) -> bool:
        jac = max(self.max_jacobian_error, self.max_pose_jacobian_error)
        hess = max(self.max_hessian_error, self.max_pose_hessian_error)
        return bool(jac <= self.jacobian_tol and hess <= self.hessian_tol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def rel_error(analytic, reference, floor: float = 0.0) -> float:
    """Max abs difference over the largest reference entry.

    ``floor`` keeps the denominator away from zero when the reference is
    pure roundoff, e.g. the smallest eigenvalue of three points, which is
    identically zero.
    """
    a = np.asarray(analytic, dtype=float)
    r = np.asarray(reference, dtype=float)
    return float(np.max(np.abs(a - r)) / max(float(np.max(np.abs(r))), floor, _TINY))


_FLOOR = 1e-6  # relative to the natural magnitude bound of each quantity


# ---------------------------------------------------------------------------
# random instances


def random_rotation(rng) -> np.ndarray:
    return Rotation.from_rotvec(rng.normal(size=3) * rng.uniform(0, np.pi) / np.sqrt(3)).as_matrix()


def random_cluster_points(rng, n: int) -> np.ndarray:
    """Anisotropic Gaussian blob with a random orientation and offset."""
    scales = np.exp(rng.uniform(-3.0, 1.0, size=3))
    return (rng.normal(size=(n, 3)) * scales) @ random_rotation(rng).T + rng.normal(scale=2.0, size=3)


def degenerate_cluster_points(rng, n: int) -> np.ndarray:
    """Points whose two smallest covariance eigenvalues coincide."""
    n = max(n, 4)
    while True:
        Q = rng.normal(size=(n, 3))
        Q -= Q.mean(axis=0)
        C = Q.T @ Q / n
        w, V = np.linalg.eigh(C)
        if w[0] > 1e-6:
            break
    white = Q @ V / np.sqrt(w)  # unit covariance
    a, b = np.exp(rng.uniform(0.0, 1.0)), np.exp(rng.uniform(-3.0, -1.0))
    return white * np.sqrt([b, b, a]) @ random_rotation(rng).T + rng.normal(size=3)


# ---------------------------------------------------------------------------
# point-space oracle


def _spectra_desc(P: np.ndarray):
    """Eigenvalues (descending) and eigenvectors of a stack of point sets ``(B, N, 3)``."""
    d = P - P.mean(axis=1, keepdims=True)
    C = np.einsum("bia,bic->bac", d, d) / P.shape[1]
    w, V = np.linalg.eigh(C)
    return w[:, ::-1], V[:, :, ::-1]


def _reference_jacobian(P: np.ndarray, k: int) -> np.ndarray:
    """``(B, N, 3)`` gradient of lambda_k for each point set in ``(B, N, 3)``."""
    _, V = _spectra_desc(P)
    u = V[:, :, k]
    d = P - P.mean(axis=1, keepdims=True)
    return (2.0 / P.shape[1]) * np.einsum("bi,ba->bia", np.einsum("bia,ba->bi", d, u), u)


def _richardson(diff, h):
    """Central difference with its h^2 error term cancelled (steps h and 2h)."""
    return (4.0 * diff(h) - diff(2.0 * h)) / 3.0


def _perturbed(P: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    n = P.size
    E = np.eye(n).reshape(n, *P.shape) * h
    return P[None] + E, P[None] - E


def point_check(P: np.ndarray, k: int, jacobian=lambda_point_jacobian, hessian=lambda_point_hessian,
                gap_tol: float = GAP_TOL):
    """Relative errors ``(jacobian, hessian)`` for lambda_k, or ``None`` when skipped."""
    N = len(P)
    cluster = cluster_from_points(P)
    lam, _ = _spectra_desc(P[None])
    lam = lam[0]
    if not spectrum_ok(lam, (k,), gap_tol):
        return None
    d = np.linalg.norm(P - P.mean(axis=0), axis=1)
    j_floor, h_floor = _FLOOR * 2.0 / N * d.max(), _FLOOR * 2.0 / N
    try:
        H = hessian(cluster, k)
    except DegenerateSpectrum:
        return None
    J = jacobian(cluster, k)
    if N == 3 and k == 2:
        # three points are always coplanar: lambda_3 is identically zero,
        # so its exact derivatives are zero and no differencing is needed
        return rel_error(J, np.zeros_like(J), j_floor), rel_error(H, np.zeros_like(H), h_floor)
    scale = np.sqrt(max(lam[0], _TINY))
    gap = min(abs(lam[k] - lam[m]) for m in range(3) if m != k) / max(lam[0], _TINY)
    # steps shrink with the eigen gap, which bounds the curvature of lambda_k
    h = 1e-2 * scale * min(1.0, gap)

    def d_lambda(step):
        plus, minus = _perturbed(P, step)
        return ((_spectra_desc(plus)[0][:, k] - _spectra_desc(minus)[0][:, k]) / (2 * step)).reshape(N, 3)

    def d_jacobian(step):
        plus, minus = _perturbed(P, step)
        return ((_reference_jacobian(plus, k) - _reference_jacobian(minus, k)) / (2 * step)).reshape(3 * N, 3 * N).T

    ej = rel_error(J, _richardson(d_lambda, h), j_floor)
    fd_h = _richardson(d_jacobian, h)
    eh = rel_error(H, 0.5 * (fd_h + fd_h.T), h_floor)
    return ej, eh


# ---------------------------------------------------------------------------
# pose-space oracle


def random_window(rng, n_poses: int | None = None, n_items: int | None = None):
    """Random poses and cost items that are plane- or edge-like, with well separated spectra."""
    M = int(rng.integers(2, 6)) if n_poses is None else n_poses
    poses = [Pose(random_rotation(rng), rng.normal(scale=1.0, size=3)) for _ in range(M)]
    items = []
    for _ in range(int(rng.integers(1, 4)) if n_items is None else n_items):
        kind = FeatureKind.PLANE if rng.random() < 0.5 else FeatureKind.EDGE
        # a three-point plane costs exactly zero in every configuration
        n = int(rng.integers(4 if kind is FeatureKind.PLANE else 3, 51))
        if kind is FeatureKind.PLANE:
            scales = [rng.uniform(0.8, 1.5), rng.uniform(0.3, 0.6), rng.uniform(0.02, 0.1)]
        else:
            scales = [rng.uniform(0.8, 1.5), rng.uniform(0.05, 0.15), rng.uniform(0.01, 0.04)]
        world = (rng.normal(size=(n, 3)) * scales) @ random_rotation(rng).T + rng.normal(scale=2.0, size=3)
        ids = rng.integers(0, M, size=n)
        local = np.array([poses[j].inverse().apply(p) for j, p in zip(ids, world)])
        fixed = None
        if rng.random() < 0.3:
            extra = (rng.normal(size=(int(rng.integers(1, 20)), 3)) * scales) @ random_rotation(rng).T
            fixed = cluster_from_points(extra + world.mean(axis=0)).stats_only()
        items.append((kind, ids, local, fixed))
    return poses, items


def _perturbed_costs(batch: ItemBatch, poses, offsets: np.ndarray) -> np.ndarray:
    """Total cost at ``poses boxplus offsets[r]`` for every row ``r``."""
    K, M = len(offsets), batch.n_poses
    R0 = np.array([p.rotation for p in poses])
    t0 = np.array([p.translation for p in poses])
    d = offsets.reshape(K, M, 6)
    dR = Rotation.from_rotvec(d[:, :, :3].reshape(-1, 3)).as_matrix().reshape(K, M, 3, 3)
    R = np.matmul(R0[None], dR).reshape(K * M, 3, 3)
    t = (t0[None] + d[:, :, 3:]).reshape(K * M, 3)
    tiled = batch.tile(K)
    return tiled.item_costs(R, t).reshape(K, batch.n_items).sum(axis=1)


def fd_pose_derivatives(batch: ItemBatch, poses, h_grad: float = 1e-6, h_hess: float = 1e-4):
    """Central-difference gradient and Hessian of the batch cost over ``poses boxplus d``."""
    n = 6 * batch.n_poses
    E = np.eye(n)
    grad_off = np.vstack([h_grad * E, -h_grad * E])
    a, b = np.triu_indices(n)
    hess_off = np.vstack([
        h_hess * (E[a] + E[b]), h_hess * (E[a] - E[b]),
        h_hess * (-E[a] + E[b]), -h_hess * (E[a] + E[b]),
    ])
    f = _perturbed_costs(batch, poses, np.vstack([grad_off, hess_off]))
    g = (f[:n] - f[n:2 * n]) / (2 * h_grad)
    q = f[2 * n:].reshape(4, -1)
    upper = (q[0] - q[1] - q[2] + q[3]) / (4 * h_hess ** 2)
    H = np.zeros((n, n))
    H[a, b] = upper
    H[b, a] = upper
    return g, H


def pose_check(batch: ItemBatch, poses, gap_tol: float = GAP_TOL):
    """Relative errors ``(gradient, hessian)`` of the assembled model, or ``None`` when skipped."""
    model = batch.evaluate(poses, gap_tol=gap_tol)
    if model.skipped:
        return None
    g, H = fd_pose_derivatives(batch, poses)
    # magnitude bounds: each point moves by at most (1 + |p|) per unit perturbation
    world = batch.world_points(poses)
    lever = 1.0 + np.linalg.norm(world, axis=1)
    w = 2.0 / batch.count[batch.item_idx]
    j_bound = float(np.sum(w * lever * np.linalg.norm(world - world.mean(axis=0), axis=1)))
    h_bound = float(np.sum(w * lever ** 2))
    return rel_error(model.J, g, _FLOOR * j_bound), rel_error(model.H, H, _FLOOR * h_bound)


# ---------------------------------------------------------------------------


def check_derivatives(seed: int = 0, trials: int = 1000, *, pose: bool = True, degenerate_every: int = 10,
                      jacobian=lambda_point_jacobian, hessian=lambda_point_hessian) -> DerivativeReport:
    """Run both oracles over ``trials`` random instances.

    ``jacobian`` and ``hessian`` replace the point-space implementations
    under test, which is how mutated versions are checked.  Every
    ``degenerate_every``-th cluster is built with two equal eigenvalues to
    exercise the skip path.
    """
    rng = np.random.default_rng(seed)
    rep = DerivativeReport(seed, trials)
    for trial in range(trials):
        n = int(rng.integers(3, 51))
        forced = degenerate_every and trial % degenerate_every == degenerate_every - 1
        P = degenerate_cluster_points(rng, n) if forced else random_cluster_points(rng, n)
        for k in range(3):
            res = point_check(P, k, jacobian, hessian)
            if res is None:
                rep.skipped += 1
                continue
            rep.jacobian_checks += 1
            rep.hessian_checks += 1
            rep.max_jacobian_error = max(rep.max_jacobian_error, res[0])
            rep.max_hessian_error = max(rep.max_hessian_error, res[1])
        if pose:
            poses, items = random_window(rng)
            res = pose_check(ItemBatch.build(items, len(poses)), poses)
            if res is None:
                rep.pose_skipped += 1
                continue
            rep.pose_checks += 1
            rep.max_pose_jacobian_error = max(rep.max_pose_jacobian_error, res[0])
            rep.max_pose_hessian_error = max(rep.max_pose_hessian_error, res[1])
    return rep


__all__ = [
    "DerivativeReport",
    "check_derivatives",
    "point_check",
    "pose_check",
    "fd_pose_derivatives",
    "random_window",
    "random_cluster_points",
    "degenerate_cluster_points",
    "rel_error",
]
