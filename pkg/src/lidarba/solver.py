"""Sliding-window Levenberg-Marquardt over scan poses."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .assembly import ItemBatch, NoConstraints
from .features import GAP_TOL, FeatureKind, PointCluster
from .geometry import Pose, boxplus


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass
class CostItem:
    """One feature: pose-dependent points plus optional marginalized stats.

    ``scan_ids`` index into the problem's pose list.
    """

    kind: FeatureKind
    scan_ids: np.ndarray
    local: np.ndarray
    fixed: PointCluster | None = None


@dataclass
class BAProblem:
    poses: list[Pose]
    items: list[CostItem]
    fixed_pose_indices: set[int] = field(default_factory=lambda: {0})

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("a window needs at least two poses")
        if not self.fixed_pose_indices:
            raise ValueError("at least one pose must be held fixed")
        for i in self.fixed_pose_indices:
            if not 0 <= i < len(self.poses):
                raise ValueError(f"fixed pose index {i} out of range")

    def batch(self) -> ItemBatch:
        return ItemBatch.build(((it.kind, it.scan_ids, it.local, it.fixed) for it in self.items), len(self.poses))

    def free_mask(self) -> np.ndarray:
        mask = np.ones(6 * len(self.poses), dtype=bool)
        for i in self.fixed_pose_indices:
            mask[6 * i:6 * i + 6] = False
        return mask


@dataclass
class LMConfig:
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 1.0 / 3.0
    max_iters: int = 20
    cost_tol: float = 1e-9
    step_tol: float = 1e-10
    gap_tol: float = GAP_TOL
    max_mu_escalations: int = 30

    def __post_init__(self):
        if self.mu0 <= 0:
            raise ValueError("mu0 must be positive")
        if not self.mu_up > 1.0 > self.mu_down > 0.0:
            raise ValueError("need mu_up > 1 > mu_down > 0")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    accepted: int = 0
    rejected: int = 0
    cost_trace: list[float] = field(default_factory=list)
    skipped_items: int = 0
    n_items: int = 0
    wall_time: float = 0.0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _gauge(J, H, free):
    J = np.where(free, J, 0.0)
    H = H * free[:, None] * free[None, :]
    H[~free, ~free] = 1.0
    return J, H


def assemble(problem: BAProblem, batch: ItemBatch | None = None, gap_tol: float = GAP_TOL):
    """Total cost, gradient and Hessian over the window, gauge applied.

    Returns ``(cost, J, H, skipped)``.
    """
    batch = batch or problem.batch()
    model = batch.evaluate(problem.poses, gap_tol=gap_tol)
    if model.skipped >= batch.n_items or len(batch.item_idx) == 0:
        raise NoConstraints("no constraints")
    J, H = _gauge(model.J, model.H, problem.free_mask())
    return model.cost, J, H, model.skipped


def _damped_solve(H, J, mu, max_escalations=30, mu_up=10.0):
    n = len(J)
    for _ in range(max_escalations + 1):
        try:
            c = scipy.linalg.cho_factor(H + mu * np.eye(n), lower=True, check_finite=False)
            delta = -scipy.linalg.cho_solve(c, J, check_finite=False)
            if np.all(np.isfinite(delta)):
                return delta, mu
        except np.linalg.LinAlgError:
            pass
        mu = max(mu * mu_up, 1e-12)
    raise SingularSystem("singular system")


def lm_step(H, J, mu: float) -> np.ndarray:
    """Solve ``(H + mu I) dT = -J``, raising ``mu`` if H + mu I is not positive definite."""
    return _damped_solve(np.asarray(H, dtype=float), np.asarray(J, dtype=float).reshape(-1), mu)[0]


def _apply(poses, delta):
    return [boxplus(p, delta[6 * j:6 * j + 6]) for j, p in enumerate(poses)]


def optimize(problem: BAProblem, cfg: LMConfig | None = None) -> tuple[list[Pose], SolveReport]:
    cfg = cfg or LMConfig()
    t0 = time.perf_counter()
    batch = problem.batch()
    free = problem.free_mask()
    poses = list(problem.poses)
    report = SolveReport(n_items=batch.n_items)
    cost = batch.cost(poses)
    report.initial_cost = report.final_cost = cost
    report.cost_trace.append(cost)
    mu = cfg.mu0
    model = None
    for _ in range(cfg.max_iters):
        report.iterations += 1
        if model is None:
            m = batch.evaluate(poses, gap_tol=cfg.gap_tol)
            report.skipped_items += m.skipped
            if m.skipped >= batch.n_items or len(batch.item_idx) == 0:
                raise NoConstraints("no constraints")
            model = _gauge(m.J, m.H, free)
        J, H = model
        delta, mu = _damped_solve(H, J, mu, cfg.max_mu_escalations, cfg.mu_up)
        delta[~free] = 0.0
        if np.linalg.norm(delta) < cfg.step_tol:
            report.stop_reason = "step_tol"
            break
        trial = _apply(poses, delta)
        new_cost = batch.cost(trial)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            poses, cost = trial, new_cost
            report.accepted += 1
            report.cost_trace.append(cost)
            mu *= cfg.mu_down
            model = None
            if rel < cfg.cost_tol:
                report.stop_reason = "cost_tol"
                break
        else:
            report.rejected += 1
            mu *= cfg.mu_up
    else:
        report.stop_reason = "max_iters"
    report.final_cost = cost
    report.wall_time = time.perf_counter() - t0
    return poses, report
