import numpy as np
import pytest

from lidarba.features import FeatureKind
from lidarba.geometry import Pose, boxplus, relative_pose_errors
from lidarba.pipeline import (
    PipelineConfig,
    PipelineState,
    marginalize_oldest,
    push_scan,
    refine,
    register_scan,
    run,
    window_items,
)
from lidarba.scan import LabeledScan
from lidarba.synth import generate_scene, room_scene
from lidarba.voxel_map import VoxelMapConfig


@pytest.fixture(scope="module")
def room():
    return generate_scene(room_scene(seed=0))


def pushed_state(scene, poses, n, **cfg):
    state = PipelineState(PipelineConfig(**cfg))
    for scan, T in zip(scene.scans[:n], poses[:n]):
        push_scan(state, scan, T)
    return state


def max_errors(est, truth):
    dt, dr = relative_pose_errors(est, truth)
    return float(dt.max()), float(np.rad2deg(dr.max()))


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(window_size=1)
    with pytest.raises(ValueError):
        PipelineConfig(window_size=5, refine_every=6)
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})
    cfg = PipelineConfig.from_dict({"window_size": 10, "voxel": {"root_size": 2.0}, "lm": {"max_iters": 5}})
    assert cfg.voxel.max_depth == 4 and cfg.lm.max_iters == 5
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_scan_validation():
    with pytest.raises(ValueError, match="no features"):
        LabeledScan(0, 0.0, np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        LabeledScan(0, 0.0, [[np.nan, 0, 0]], np.zeros((0, 3)))


# ---------------------------------------------------------------- registration


def test_register_bootstrap(room):
    state = PipelineState()
    guess = Pose.from_rotvec([0, 0, 0.3], [1, 2, 3])
    res = register_scan(state, room.scans[0], guess)
    assert res.bootstrap
    assert res.pose is guess


def test_register_fixpoint(room):
    state = pushed_state(room, room.truth, 10)
    res = register_scan(state, room.scans[10], room.truth[10])
    assert not res.degenerate and res.rank == 6
    assert np.linalg.norm(res.pose.translation - room.truth[10].translation) < 1e-9
    np.testing.assert_allclose(res.pose.rotation, room.truth[10].rotation, atol=1e-9)


def test_register_recovers_wall_offset(room):
    state = pushed_state(room, room.truth, 10)
    T = room.truth[10]
    guess = Pose(T.rotation, T.translation + [0.1, 0, 0])
    res = register_scan(state, room.scans[10], guess)
    assert np.linalg.norm(res.pose.translation - T.translation) < 1e-6
    np.testing.assert_allclose(res.pose.rotation, T.rotation, atol=1e-6)


def test_register_single_plane_is_degenerate():
    rng = np.random.default_rng(0)

    def floor_scan(sid, n=400):
        pts = np.c_[rng.uniform(-3, 3, size=(n, 2)), np.full(n, 0.4)]
        return LabeledScan(sid, 0.0, pts, np.zeros((0, 3)))

    state = PipelineState()
    push_scan(state, floor_scan(0), Pose.identity())
    guess = Pose(np.eye(3), [0.2, -0.1, 0.05])
    res = register_scan(state, floor_scan(1), guess)
    assert res.degenerate
    assert res.rank == 3
    # z is constrained by the floor; x and y stay at the guess
    assert abs(res.pose.translation[2]) < 1e-9
    np.testing.assert_allclose(res.pose.translation[:2], guess.translation[:2], atol=1e-9)
    np.testing.assert_allclose(res.pose.rotation[2], [0, 0, 1], atol=1e-9)


def test_register_too_few_matches():
    state = PipelineState()
    pts = np.c_[np.random.default_rng(1).uniform(0, 0.9, size=(30, 2)), np.full(30, 0.5)]
    push_scan(state, LabeledScan(0, 0.0, pts, np.zeros((0, 3))), Pose.identity())
    far = LabeledScan(1, 0.1, pts + [50, 0, 0], np.zeros((0, 3)))
    guess = Pose.identity()
    res = register_scan(state, far, guess)
    assert res.degenerate and res.n_matches < 10
    assert res.pose is guess


# ---------------------------------------------------------------- push / marginalize


def test_push_bootstrap(room):
    state = pushed_state(room, room.truth, 1)
    assert len(state.window) == 1
    assert state.plane_map.roots and state.edge_map.roots


def test_push_duplicate_id(room):
    state = pushed_state(room, room.truth, 1)
    with pytest.raises(ValueError, match="duplicate"):
        push_scan(state, room.scans[0], room.truth[0])


def test_window_arithmetic_and_conservation():
    scene = generate_scene(room_scene(n_scans=25, seed=1, sigma_rot=0.0, sigma_t=0.0))
    state = PipelineState(PipelineConfig(window_size=20))
    for scan, T in zip(scene.scans, scene.truth):
        push_scan(state, scan, T)
        ids = [s for s, _ in state.full_trajectory()]
        assert ids == list(range(scan.scan_id + 1))  # trajectory and window partition the scans
    assert len(state.window) == 20
    assert [s for s, _ in state.trajectory] == [0, 1, 2, 3, 4]
    assert state.plane_map.total_points() == sum(len(s.plane_points) for s in scene.scans)
    assert state.edge_map.total_points() == sum(len(s.edge_points) for s in scene.scans)


def test_marginalize_exactly_one_when_full(room):
    state = pushed_state(room, room.truth, 5, window_size=5, refine_every=5)
    assert state.trajectory == []
    push_scan(state, room.scans[5], room.truth[5])
    assert [s for s, _ in state.trajectory] == [0]
    assert 0 not in state.plane_map.scans and 0 not in state.edge_map.scans


def test_finalized_poses_never_change(room):
    state = pushed_state(room, room.initial, 6, window_size=5, refine_every=5)
    frozen = [(s, T.matrix().copy()) for s, T in state.trajectory]
    refine(state)
    for scan, T in zip(room.scans[6:9], room.initial[6:9]):
        push_scan(state, scan, T)
    refine(state)
    for (s, M), (s2, T) in zip(frozen, state.trajectory):
        assert s == s2 and np.array_equal(M, T.matrix())


def test_marginalize_oldest_returns_id(room):
    state = pushed_state(room, room.truth, 3)
    assert marginalize_oldest(state) == 0
    assert len(state.window) == 2


# ---------------------------------------------------------------- refine


def test_refine_at_truth_is_noop(room):
    # with noiseless points a strict test keeps every leaf on a single wall,
    # so the true poses are an exact minimum
    strict = VoxelMapConfig(plane_test=1e-8, edge_test=1e-8)
    state = pushed_state(room, room.truth, 10, voxel=strict)
    rep = refine(state)
    assert rep is not None
    assert rep.final_cost == pytest.approx(rep.initial_cost, abs=1e-12)
    for e, T in zip(state.window, room.truth):
        assert np.max(np.abs(e.pose.matrix() - T.matrix())) < 1e-9


def test_refine_reduces_injected_noise(room):
    # odometry-sized errors on every pose but the first
    rng = np.random.default_rng(0)
    noisy = [room.truth[0]] + [boxplus(T, np.r_[rng.normal(scale=np.deg2rad(0.2), size=3),
                                               rng.normal(scale=0.01, size=3)]) for T in room.truth[1:]]
    state = pushed_state(room, noisy, 20)
    before = max_errors(noisy, room.truth)
    rep = refine(state)
    after = max_errors([e.pose for e in state.window], room.truth)
    assert rep.final_cost <= rep.initial_cost
    assert all(b <= a for a, b in zip(rep.cost_trace, rep.cost_trace[1:]))
    assert after[0] * 10 <= before[0]
    assert after[1] * 10 <= before[1]
    # second refine with no new scans changes little
    poses = [e.pose for e in state.window]
    rep2 = refine(state)
    assert rep2.final_cost <= rep.final_cost + 1e-12
    again = [e.pose for e in state.window]
    assert max(np.linalg.norm(a.translation - b.translation) for a, b in zip(poses, again)) < 1e-3


def test_refine_needs_two_scans(room):
    state = pushed_state(room, room.truth, 1)
    assert refine(state) is None


def test_window_items_reference_window(room):
    state = pushed_state(room, room.truth, 6)
    items = window_items(state)
    assert items
    for it in items:
        assert it.scan_ids.min() >= 0 and it.scan_ids.max() < 6
        assert it.kind in (FeatureKind.PLANE, FeatureKind.EDGE)


# ---------------------------------------------------------------- run


def test_run_empty_stream():
    traj, stats = run([])
    assert traj == [] and stats.to_dict()["n_scans"] == 0


def test_run_noiseless_room_from_zero_motion_guess():
    scene = generate_scene(room_scene(seed=0, sigma_rot=0.0, sigma_t=0.0))
    traj, stats = run(scene.scans)
    assert [s for s, _ in traj] == list(range(20))
    dt, dr = max_errors([T for _, T in traj], scene.truth)
    assert dt < 5e-3
    assert stats.to_dict()["n_refines"] == 4
    assert len(stats.odometry_ms) == 20
    assert all(v > 0 for v in stats.window_voxels)


def test_run_without_refinement_is_pure_odometry():
    scene = generate_scene(room_scene(n_scans=8, seed=2, sigma_rot=0.0, sigma_t=0.0))
    traj, stats = run(scene.scans, PipelineConfig(refine_every=None))
    assert stats.refine_ms == []
    assert len(traj) == 8


def test_run_is_deterministic():
    scene = generate_scene(room_scene(n_scans=8, seed=3, sigma_rot=0.0, sigma_t=0.0))
    a, _ = run(scene.scans)
    b, _ = run(scene.scans)
    for (sa, Ta), (sb, Tb) in zip(a, b):
        assert sa == sb and np.array_equal(Ta.matrix(), Tb.matrix())


def test_refine_monotone_inside_run():
    scene = generate_scene(room_scene(n_scans=10, seed=4, sigma_rot=0.0, sigma_t=0.0))
    state = PipelineState()
    costs = []
    for scan in scene.scans:
        reg = register_scan(state, scan)
        # odometry noise the refinement has to remove
        push_scan(state, scan, boxplus(reg.pose, np.r_[0.0, 0.0, 0.01, 0.02, 0.0, 0.0]) if scan.scan_id else reg.pose)
        if len(state.window) % 5 == 0:
            rep = refine(state)
            costs.append(rep.cost_trace)
    for trace in costs:
        assert all(b <= a for a, b in zip(trace, trace[1:]))
