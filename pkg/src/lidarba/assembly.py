"""Vectorized evaluation of many eigenvalue cost items over one pose window.

Every item contributes ``sum_k lambda_k`` over its selected eigenvalues.
The point-space Hessian of such a sum splits into a block-diagonal part
and a handful of rank-one terms, so the pose-space Hessian ``D^T H D`` is
accumulated without ever forming ``H``. All per-point quantities are at
most quadratic in the scan-local coordinates, so each (item, scan) pair is
reduced once to its centred moments and evaluation cost scales with the
number of pairs rather than points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .features import GAP_TOL, FeatureKind, PointCluster, eig_sym3_batch
from .geometry import Pose, skew_batch


class NoConstraints(ValueError):
    """A window has no usable cost items."""


_PAIRS = [(k, m) for k in range(3) for m in range(3) if k != m]


@dataclass
class BatchModel:
    cost: float
    item_costs: np.ndarray
    skipped: int
    J: np.ndarray | None = None
    H: np.ndarray | None = None


def _group_matrix(groups: np.ndarray, n_groups: int) -> sp.csr_matrix:
    n = len(groups)
    return sp.csr_matrix((np.ones(n), (groups, np.arange(n))), shape=(n_groups, n))


class ItemBatch:
    """Concatenated points of all cost items, grouped for fast reductions."""

    def __init__(self, kinds, item_idx, scan_idx, local, fixed_count, fixed_sum, fixed_outer, n_poses):
        self.kinds = list(kinds)
        self.n_items = len(self.kinds)
        self.n_poses = n_poses
        order = np.lexsort((scan_idx, item_idx))
        self.item_idx = item_idx[order]
        self.scan_idx = scan_idx[order]
        self.local = local[order]
        self.fixed_count = fixed_count
        self.fixed_sum = fixed_sum
        self.fixed_outer = fixed_outer
        self.count = fixed_count + np.bincount(item_idx, minlength=self.n_items)
        self.sel = np.array([[k in kind.eigen_indices for k in range(3)] for kind in self.kinds], dtype=bool).reshape(-1, 3)
        # contiguous (item, scan) segments of the sorted points
        pair_key = self.item_idx * n_poses + self.scan_idx
        starts = np.flatnonzero(np.r_[True, pair_key[1:] != pair_key[:-1]]) if len(pair_key) else np.zeros(0, dtype=int)
        self.pair_item = self.item_idx[starts]
        self.pair_scan = self.scan_idx[starts]
        self._P_item = _group_matrix(self.pair_item, self.n_items)
        self._P_scan = _group_matrix(self.pair_scan, n_poses)
        # per-pair local moments, centred: everything below is at most quadratic in p_f
        if len(starts):
            self.pair_n = np.diff(np.r_[starts, len(pair_key)]).astype(float)
            self.pair_c = np.add.reduceat(self.local, starts, axis=0) / self.pair_n[:, None]
            e = self.local - np.repeat(self.pair_c, self.pair_n.astype(int), axis=0)
            self.pair_S = np.add.reduceat((e[:, :, None] * e[:, None, :]).reshape(-1, 9), starts, axis=0).reshape(-1, 3, 3)
        else:
            self.pair_n = np.zeros(0)
            self.pair_c = np.zeros((0, 3))
            self.pair_S = np.zeros((0, 3, 3))
        # eigen pairs (k, m) coupling a selected k with an unselected m; two per item
        pk, pm = [], []
        for kind in self.kinds:
            ks = kind.eigen_indices
            pr = [(k, m) for k in ks for m in range(3) if m not in ks]
            pk.append([k for k, _ in pr])
            pm.append([m for _, m in pr])
        self.pair_k = np.array(pk, dtype=int).reshape(self.n_items, -1)
        self.pair_m = np.array(pm, dtype=int).reshape(self.n_items, -1)

    def _to_items(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self._P_item @ X.reshape(len(X), -1))

    def _to_scans(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self._P_scan @ X.reshape(len(X), -1))

    def _scatter(self, pair_vals: np.ndarray) -> np.ndarray:
        """``(pairs, r, 6)`` -> ``(items * r, 6M)`` rows."""
        r = pair_vals.shape[1]
        out = np.zeros((self.n_items, self.n_poses, r, 6))
        out[self.pair_item, self.pair_scan] = pair_vals
        return out.transpose(0, 2, 1, 3).reshape(self.n_items * r, 6 * self.n_poses)

    @classmethod
    def build(cls, items, n_poses: int) -> "ItemBatch":
        """``items``: iterable of ``(kind, scan_ids, local_points, fixed_cluster_or_None)``."""
        kinds, item_idx, scan_idx, local = [], [], [], []
        fc, fs, fo = [], [], []
        for i, (kind, ids, pts, fixed) in enumerate(items):
            ids = np.zeros(0, dtype=int) if ids is None else np.asarray(ids, dtype=int).reshape(-1)
            pts = np.zeros((0, 3)) if pts is None else np.asarray(pts, dtype=float).reshape(-1, 3)
            if len(ids) != len(pts):
                raise ValueError("scan ids and points differ in length")
            if len(ids) and (ids.min() < 0 or ids.max() >= n_poses):
                raise ValueError(f"unknown scan id in item {i}")
            kinds.append(FeatureKind(kind))
            item_idx.append(np.full(len(ids), i, dtype=int))
            scan_idx.append(ids)
            local.append(pts)
            if fixed is None:
                fc.append(0)
                fs.append(np.zeros(3))
                fo.append(np.zeros((3, 3)))
            else:
                fc.append(fixed.count)
                fs.append(fixed.sum)
                fo.append(fixed.outer)
        if not kinds:
            raise NoConstraints("no constraints")
        return cls(
            kinds,
            np.concatenate(item_idx),
            np.concatenate(scan_idx),
            np.vstack(local),
            np.array(fc, dtype=int),
            np.array(fs).reshape(-1, 3),
            np.array(fo).reshape(-1, 3, 3),
            n_poses,
        )

    def tile(self, copies: int) -> "ItemBatch":
        """``copies`` independent replicas; replica ``r`` reads poses ``r*M .. r*M+M-1``.

        Only the pose-independent moments are replicated, so evaluating many
        perturbed pose sets costs one vectorized pass.
        """
        K, I, M = int(copies), self.n_items, self.n_poses
        out = object.__new__(ItemBatch)
        out.kinds = self.kinds * K
        out.n_items, out.n_poses = I * K, M * K
        n_pts = len(self.item_idx)
        out.item_idx = (self.item_idx[None, :] + I * np.arange(K)[:, None]).reshape(-1)
        out.scan_idx = (self.scan_idx[None, :] + M * np.arange(K)[:, None]).reshape(-1)
        out.local = np.tile(self.local, (K, 1)).reshape(K * n_pts, 3)
        out.fixed_count = np.tile(self.fixed_count, K)
        out.fixed_sum = np.tile(self.fixed_sum, (K, 1))
        out.fixed_outer = np.tile(self.fixed_outer, (K, 1, 1))
        out.count = np.tile(self.count, K)
        out.sel = np.tile(self.sel, (K, 1))
        n_pairs = len(self.pair_item)
        out.pair_item = (self.pair_item[None, :] + I * np.arange(K)[:, None]).reshape(-1)
        out.pair_scan = (self.pair_scan[None, :] + M * np.arange(K)[:, None]).reshape(-1)
        out._P_item = _group_matrix(out.pair_item, out.n_items)
        out._P_scan = _group_matrix(out.pair_scan, out.n_poses)
        out.pair_n = np.tile(self.pair_n, K)
        out.pair_c = np.tile(self.pair_c, (K, 1)).reshape(K * n_pairs, 3)
        out.pair_S = np.tile(self.pair_S, (K, 1, 1)).reshape(K * n_pairs, 3, 3)
        out.pair_k = np.tile(self.pair_k, (K, 1))
        out.pair_m = np.tile(self.pair_m, (K, 1))
        return out

    def item_costs(self, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Per-item cost for stacked rotations ``(M, 3, 3)`` and translations ``(M, 3)``."""
        _, lam, _ = self._spectra(R, t)
        return np.sum(lam * self.sel, axis=1)

    def world_points(self, poses: list[Pose]) -> np.ndarray:
        R = np.array([p.rotation for p in poses])
        t = np.array([p.translation for p in poses])
        return np.matmul(R[self.scan_idx], self.local[:, :, None])[:, :, 0] + t[self.scan_idx]

    def clusters(self, poses: list[Pose]) -> list[PointCluster]:
        world = self.world_points(poses)
        out = []
        for i in range(self.n_items):
            m = self.item_idx == i
            out.append(PointCluster(
                int(self.count[i]),
                world[m].sum(axis=0) + self.fixed_sum[i],
                world[m].T @ world[m] + self.fixed_outer[i],
                self.scan_idx[m], self.local[m], world[m],
            ))
        return out

    def _spectra(self, R, t):
        N = self.count.astype(float)
        Rp = R[self.pair_scan]
        w = np.matmul(Rp, self.pair_c[:, :, None])[:, :, 0] + t[self.pair_scan]  # pair centroids
        mean = (self._to_items(self.pair_n[:, None] * w) + self.fixed_sum) / N[:, None]
        delta = w - mean[self.pair_item]
        # centred scatter; marginalized stats are re-centred algebraically
        pc = np.matmul(np.matmul(Rp, self.pair_S), np.swapaxes(Rp, 1, 2))
        pc += self.pair_n[:, None, None] * delta[:, :, None] * delta[:, None, :]
        c = self._to_items(pc).reshape(-1, 3, 3)
        fs = self.fixed_sum[:, :, None] * mean[:, None, :]
        c += self.fixed_outer - fs - np.swapaxes(fs, 1, 2) + self.fixed_count[:, None, None] * mean[:, :, None] * mean[:, None, :]
        lam, U = eig_sym3_batch(c / N[:, None, None])
        return delta, lam, U

    @staticmethod
    def _stack(poses):
        return np.array([p.rotation for p in poses]), np.array([p.translation for p in poses])

    def _valid(self, lam, gap_tol):
        floor = gap_tol * np.maximum(lam[:, 0], 1e-12)
        ok = np.ones(self.n_items, dtype=bool)
        for k, m in _PAIRS:
            need = self.sel[:, k] & ~self.sel[:, m]
            ok &= ~need | (np.abs(lam[:, k] - lam[:, m]) > floor)
        return ok

    def cost(self, poses: list[Pose]) -> float:
        _, lam, _ = self._spectra(*self._stack(poses))
        return float(np.sum(lam * self.sel))

    def evaluate(self, poses: list[Pose], gap_tol: float = GAP_TOL, derivatives: bool = True,
                 curvature: bool = True) -> BatchModel:
        """Total cost and, optionally, its gradient and Hessian in pose space.

        With ``curvature=False`` the Hessian is the chain-rule product
        ``D^T H D`` alone; the default adds the rotation curvature of each
        point weighted by its gradient, which makes ``H`` the exact Hessian
        of ``cost(T boxplus dT)`` at ``dT = 0``.
        """
        if len(poses) != self.n_poses:
            raise ValueError("pose count mismatch")
        R, t = self._stack(poses)
        delta, lam, U = self._spectra(R, t)
        item_costs = np.sum(lam * self.sel, axis=1)
        valid = self._valid(lam, gap_tol)
        model = BatchModel(float(item_costs.sum()), item_costs, int(np.count_nonzero(~valid)))
        if not derivatives:
            return model

        # Per (item, scan) pair with n points p_f = c + e_i (sum e_i = 0, sum e e^T = S):
        #   a_ik = alpha_k + v_k . e_i        v_k = R^T u_k, alpha_k = u_k . delta
        #   y_ik = ybar_k + [e_i x v_k; 0]    ybar_k = [c x v_k; u_k]  (y_ik = D_i^T u_k)
        M = self.n_poses
        N = self.count.astype(float)
        P = len(self.pair_item)
        pi = self.pair_item
        n, c, S = self.pair_n, self.pair_c, self.pair_S
        Up = U[pi]
        V = np.matmul(np.swapaxes(R[self.pair_scan], 1, 2), Up)  # columns v_k
        Vr = np.swapaxes(V, 1, 2)  # rows v_k
        alpha = np.matmul(delta[:, None, :], Up)[:, 0, :]
        ybar = np.empty((P, 3, 6))
        ybar[:, :, :3] = np.cross(c[:, None, :], Vr)
        ybar[:, :, 3:] = np.swapaxes(Up, 1, 2)
        SV = np.swapaxes(np.matmul(S, V), 1, 2)  # rows S v_k

        def T(k, l):
            """sum_i a_ik y_il over the pair, with k, l per-pair index arrays."""
            r = np.arange(P)
            out = (n * alpha[r, k])[:, None] * ybar[r, l]
            out[:, :3] += np.cross(SV[r, k], Vr[r, l])
            return out

        use = valid[:, None] & self.sel  # (items, 3)
        coef = 2.0 / N
        cp = (coef[:, None] * use)[pi]  # (P, 3)

        jp = sum(cp[:, k, None] * T(np.full(P, k), np.full(P, k)) for k in range(3))
        J = self._to_scans(jp).reshape(M * 6)

        dp = np.matmul(np.swapaxes(ybar * (n[:, None] * cp)[:, :, None], 1, 2), ybar)
        for k in range(3):
            K = skew_batch(Vr[:, k])
            dp[:, :3, :3] += cp[:, k, None, None] * np.matmul(np.matmul(K, S), np.swapaxes(K, 1, 2))
        if curvature:
            # second-order term of R exp(phi^) p_f, weighted by the point gradient r_i = rbar + Q e_i
            rbar = np.matmul(V, (cp * alpha)[:, :, None])[:, :, 0]
            Q = np.matmul(V * cp[:, None, :], Vr)
            X = n[:, None, None] * rbar[:, :, None] * c[:, None, :] + np.matmul(Q, S)
            tr = np.trace(X, axis1=1, axis2=2)
            dp[:, :3, :3] += 0.5 * (X + np.swapaxes(X, 1, 2)) - tr[:, None, None] * np.eye(3)
        diag = self._to_scans(dp).reshape(M, 6, 6)
        H = np.zeros((6 * M, 6 * M))
        for s in range(M):
            H[6 * s:6 * s + 6, 6 * s:6 * s + 6] = diag[s]

        # rank-one terms, one row per (item, eigen index) or (item, eigen pair)
        g_rows = self._scatter(n[:, None, None] * ybar)
        g_w = (-coef[:, None] / N[:, None] * use).reshape(-1)

        pk, pm = self.pair_k[pi], self.pair_m[pi]  # (P, r)
        z = np.stack([T(pm[:, j], pk[:, j]) + T(pk[:, j], pm[:, j]) for j in range(pk.shape[1])], axis=1)
        h_rows = self._scatter(z)
        rr = np.arange(self.n_items)[:, None]
        gap = lam[rr, self.pair_k] - lam[rr, self.pair_m]
        pair_w = np.where(valid[:, None], coef[:, None] / (N[:, None] * np.where(valid[:, None], gap, 1.0)), 0.0)

        rows = np.vstack([g_rows, h_rows])
        w = np.concatenate([g_w, pair_w.reshape(-1)])
        keep = w != 0.0
        rows, w = rows[keep], w[keep]
        H += rows.T @ (w[:, None] * rows)
        H = 0.5 * (H + H.T)
        model.J = J
        model.H = H
        return model
