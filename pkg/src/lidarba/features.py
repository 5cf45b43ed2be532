"""Point statistics, eigenvalue feature costs and their derivatives.

A plane fitted to points ``p_i`` has mean squared residual ``lambda_3(A)``
at its optimum and an edge has ``lambda_2(A) + lambda_3(A)``, where ``A``
is the point covariance.  Both costs therefore depend on the scan poses
only, and this module supplies their gradients and Hessians with respect
to the points and to right-perturbations of the poses.

Eigen indices are 0-based in code: ``lam[0] >= lam[1] >= lam[2]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import Pose

GAP_TOL = 1e-6
JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 50


class DegenerateSpectrum(ValueError):
    """Eigenvalues needed by a derivative are (numerically) repeated."""


class DegenerateFeature(ValueError):
    """The feature direction is not unique for this cluster."""


class FeatureKind(enum.Enum):
    PLANE = "plane"
    EDGE = "edge"

    @property
    def eigen_indices(self) -> tuple[int, ...]:
        """Eigenvalues whose sum is the feature cost."""
        return (2,) if self is FeatureKind.PLANE else (1, 2)


@dataclass(frozen=True)
class EigenDecomp:
    lam: np.ndarray  # descending
    U: np.ndarray  # columns are eigenvectors


@dataclass(frozen=True)
class FeatureGeometry:
    kind: FeatureKind
    q: np.ndarray
    n: np.ndarray

    def distance(self, p) -> np.ndarray:
        """Point-to-plane or point-to-line distance for ``(3,)`` or ``(n, 3)``."""
        d = np.asarray(p, dtype=float) - self.q
        along = d @ self.n
        if self.kind is FeatureKind.PLANE:
            return np.abs(along)
        perp = d - np.multiply.outer(along, self.n)
        return np.linalg.norm(perp, axis=-1)


@dataclass(frozen=True)
class PointCluster:
    """Sufficient statistics ``(N, sum p, sum p p^T)`` of a point set.

    ``scan_ids``/``local``/``world`` optionally keep the individual points
    that still depend on a pose; they may cover only part of ``N`` when the
    cluster also carries marginalized points.
    """

    count: int
    sum: np.ndarray
    outer: np.ndarray
    scan_ids: np.ndarray | None = None
    local: np.ndarray | None = None
    world: np.ndarray | None = None

    @property
    def has_points(self) -> bool:
        return self.world is not None

    def mean(self) -> np.ndarray:
        return self.sum / self.count

    def cov(self) -> np.ndarray:
        m = self.mean()
        if self.world is not None and len(self.world) == self.count:
            d = self.world - m
            A = d.T @ d / self.count
        else:
            A = self.outer / self.count - np.outer(m, m)
        return 0.5 * (A + A.T)

    def stats_only(self) -> "PointCluster":
        return PointCluster(self.count, self.sum, self.outer)

    def __add__(self, other: "PointCluster") -> "PointCluster":
        return merge_clusters(self, other)


def cluster_from_points(points, scan_ids=None, local=None) -> PointCluster:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty cluster")
    if not np.all(np.isfinite(P)):
        raise ValueError("non-finite point")
    ids = None if scan_ids is None else np.asarray(scan_ids, dtype=int).reshape(len(P))
    loc = None if local is None else np.asarray(local, dtype=float).reshape(len(P), 3)
    return PointCluster(len(P), P.sum(axis=0), P.T @ P, ids, loc, P)


def merge_clusters(a: PointCluster, b: PointCluster) -> PointCluster:
    """Union of two clusters; per-point data survives only if both carry it."""
    kw = {}
    if a.has_points and b.has_points:
        kw["world"] = np.vstack([a.world, b.world])
        if a.scan_ids is not None and b.scan_ids is not None:
            kw["scan_ids"] = np.concatenate([a.scan_ids, b.scan_ids])
        if a.local is not None and b.local is not None:
            kw["local"] = np.vstack([a.local, b.local])
    return PointCluster(a.count + b.count, a.sum + b.sum, a.outer + b.outer, **kw)


# ---------------------------------------------------------------------------
# eigen-decomposition


def _jacobi_rotate(A, V, p, q):
    apq = A[:, p, q]
    app = A[:, p, p]
    aqq = A[:, q, q]
    nz = apq != 0.0
    safe_apq = np.where(nz, apq, 1.0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        theta = (aqq - app) / (2.0 * safe_apq)
        big = ~(np.abs(theta) < 1e150)
        root = np.sqrt(np.where(big, 1.0, theta * theta + 1.0))
        t = np.where(big, 0.5 / np.where(big, theta, 1.0), 1.0 / (np.abs(theta) + root))
    t = np.where(big, t, np.where(theta < 0.0, -t, t))
    t = np.where(nz & np.isfinite(t), t, 0.0)
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    P = np.zeros_like(A)
    P[:, 0, 0] = P[:, 1, 1] = P[:, 2, 2] = 1.0
    P[:, p, p] = c
    P[:, q, q] = c
    P[:, p, q] = s
    P[:, q, p] = -s
    A = np.swapaxes(P, 1, 2) @ A @ P
    A[:, p, q] = A[:, q, p] = 0.0
    return A, V @ P


def eig_sym3_batch(A) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi on a stack of symmetric 3x3 matrices.

    Returns ``lam`` of shape ``(n, 3)`` (descending) and ``U`` of shape
    ``(n, 3, 3)`` whose columns are right-handed unit eigenvectors; the first
    two columns have their largest-magnitude component positive.
    """
    A = np.array(A, dtype=float).reshape(-1, 3, 3)
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite matrix")
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    n = len(A)
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.max(np.abs(A), axis=(1, 2))
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.abs(A[:, 0, 1]) + np.abs(A[:, 0, 2]) + np.abs(A[:, 1, 2])
        if np.all(off <= JACOBI_TOL * scale):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            A, V = _jacobi_rotate(A, V, p, q)
    lam = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    U = np.take_along_axis(V, order[:, None, :], axis=2)
    rows = np.arange(n)
    for k in (0, 1):
        col = U[:, :, k]
        sign = np.sign(col[rows, np.argmax(np.abs(col), axis=1)])
        U[:, :, k] = col * np.where(sign == 0, 1.0, sign)[:, None]
    U[:, :, 2] = np.cross(U[:, :, 0], U[:, :, 1])
    return lam, U


def eig_sym3(A) -> EigenDecomp:
    lam, U = eig_sym3_batch(A)
    return EigenDecomp(lam[0], U[0])


def spectrum_ok(lam, kind_or_indices, gap_tol: float = GAP_TOL) -> bool:
    """True when every selected eigenvalue is separated from the others.

    Pairs inside the selected set are not checked: their couplings cancel
    in the summed model.
    """
    ks = kind_or_indices.eigen_indices if isinstance(kind_or_indices, FeatureKind) else tuple(kind_or_indices)
    floor = gap_tol * max(float(lam[0]), 1e-12)
    return all(abs(lam[k] - lam[m]) > floor for k in ks for m in range(3) if m not in ks)


# ---------------------------------------------------------------------------
# costs and closed-form features


def feature_cost(cluster: PointCluster, kind: FeatureKind) -> float:
    lam = eig_sym3(cluster.cov()).lam
    return float(sum(lam[k] for k in kind.eigen_indices))


def optimal_feature(cluster: PointCluster, kind: FeatureKind, gap_tol: float = GAP_TOL) -> FeatureGeometry:
    ed = eig_sym3(cluster.cov())
    lam = ed.lam
    floor = gap_tol * max(float(lam[0]), 1e-12)
    if kind is FeatureKind.PLANE:
        if lam[1] - lam[2] <= floor:
            raise DegenerateFeature("degenerate feature: plane normal not unique")
        n = ed.U[:, 2]
    else:
        if lam[0] - lam[1] <= floor:
            raise DegenerateFeature("degenerate feature: edge direction not unique")
        n = ed.U[:, 0]
    return FeatureGeometry(kind, cluster.mean(), n / np.linalg.norm(n))


# ---------------------------------------------------------------------------
# derivatives with respect to the points


def _require_points(cluster: PointCluster) -> np.ndarray:
    if cluster.world is None or len(cluster.world) != cluster.count:
        raise ValueError("cluster needs all per-point coordinates")
    return cluster.world


def lambda_point_jacobian(cluster: PointCluster, k: int, eig: EigenDecomp | None = None) -> np.ndarray:
    """``(N, 3)`` array; row ``i`` is d lambda_k / d p_i."""
    P = _require_points(cluster)
    ed = eig or eig_sym3(cluster.cov())
    u = ed.U[:, k]
    d = P - cluster.mean()
    return (2.0 / cluster.count) * np.outer(d @ u, u)


def lambda_point_hessian(cluster: PointCluster, k: int, gap_tol: float = GAP_TOL,
                         eig: EigenDecomp | None = None) -> np.ndarray:
    """Dense ``(3N, 3N)`` Hessian of lambda_k with respect to all points."""
    P = _require_points(cluster)
    N = cluster.count
    ed = eig or eig_sym3(cluster.cov())
    lam, U = ed.lam, ed.U
    if not spectrum_ok(lam, (k,), gap_tol):
        raise DegenerateSpectrum("degenerate spectrum")
    uk = U[:, k]
    d = P - cluster.mean()
    # F_j rows m: d_j^T (u_m u_k^T + u_k u_m^T) / (N (lam_k - lam_m)), zero for m == k
    F = np.zeros((N, 3, 3))
    for m in range(3):
        if m == k:
            continue
        um = U[:, m]
        sym = np.outer(um, uk) + np.outer(uk, um)
        F[:, m, :] = (d @ sym) / (N * (lam[k] - lam[m]))
    UF = np.einsum("ab,jbc->jac", U, F)  # du_k/dp_j
    proj = d @ uk  # u_k^T d_i
    coupling = np.einsum("a,ib,jbc->ijac", uk, d, UF) + np.einsum("jac,i->ijac", UF, proj)
    c = np.full((N, N), -1.0 / N)
    c[np.diag_indices(N)] += 1.0
    blocks = (2.0 / N) * (np.einsum("ij,ac->ijac", c, np.outer(uk, uk)) + coupling)
    return blocks.transpose(0, 2, 1, 3).reshape(3 * N, 3 * N)


# ---------------------------------------------------------------------------
# second-order model in pose space


@dataclass(frozen=True)
class SecondOrderModel:
    cost: float
    J: np.ndarray  # (6M,)
    H: np.ndarray  # (6M, 6M)


def pose_model(cluster: PointCluster, poses: list[Pose], kind: FeatureKind,
               fixed: PointCluster | None = None, gap_tol: float = GAP_TOL) -> SecondOrderModel:
    """Cost, gradient and Hessian of one feature over right-perturbed poses.

    ``cluster`` carries the pose-dependent points (``scan_ids`` index into
    ``poses``, ``local`` in each scan's frame); ``fixed`` adds constant
    statistics.  World coordinates are recomputed from ``poses``.
    """
    from .assembly import ItemBatch

    batch = ItemBatch.build([(kind, cluster.scan_ids, cluster.local, fixed)], len(poses))
    model = batch.evaluate(poses, gap_tol=gap_tol, derivatives=True)
    if model.skipped:
        raise DegenerateSpectrum("degenerate spectrum")
    return SecondOrderModel(model.cost, model.J, model.H)
