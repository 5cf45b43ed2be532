import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidarba.features import (
    DegenerateFeature,
    DegenerateSpectrum,
    FeatureKind,
    PointCluster,
    cluster_from_points,
    eig_sym3,
    eig_sym3_batch,
    feature_cost,
    lambda_point_hessian,
    lambda_point_jacobian,
    merge_clusters,
    optimal_feature,
    pose_model,
    spectrum_ok,
)
from lidarba.geometry import Pose, boxplus

PLANE, EDGE = FeatureKind.PLANE, FeatureKind.EDGE
TRIANGLE = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])

points = arrays(np.float64, st.tuples(st.integers(3, 30), st.just(3)),
                elements=st.floats(-5, 5, allow_nan=False, allow_infinity=False))


def anisotropic(rng, n, scales=(3.0, 1.0, 0.3)):
    from scipy.spatial.transform import Rotation

    R = Rotation.random(random_state=rng).as_matrix()
    return rng.normal(size=(n, 3)) * scales @ R.T + rng.normal(size=3)


def brute_cov(P):
    m = P.mean(axis=0)
    A = np.zeros((3, 3))
    for p in P:
        A += np.outer(p - m, p - m)
    return A / len(P)


# ---------------------------------------------------------------- clusters


def test_triangle_cluster():
    c = cluster_from_points(TRIANGLE)
    np.testing.assert_allclose(c.mean(), [1 / 3, 1 / 3, 0], atol=1e-15)
    A = np.array([[2 / 9, -1 / 9, 0], [-1 / 9, 2 / 9, 0], [0, 0, 0]])
    np.testing.assert_allclose(c.cov(), A, atol=1e-15)
    np.testing.assert_allclose(brute_cov(TRIANGLE), A, atol=1e-15)


def test_single_point_cluster():
    c = cluster_from_points([[5, 5, 5]])
    assert np.array_equal(c.mean(), [5, 5, 5])
    assert np.array_equal(c.cov(), np.zeros((3, 3)))


def test_empty_cluster_rejected():
    with pytest.raises(ValueError, match="empty cluster"):
        cluster_from_points(np.zeros((0, 3)))


@given(points, arrays(np.float64, 3, elements=st.floats(-50, 50, allow_nan=False)))
def test_translation_shifts_mean_only(P, d):
    a, b = cluster_from_points(P), cluster_from_points(P + d)
    np.testing.assert_allclose(b.mean(), a.mean() + d, atol=1e-9)
    np.testing.assert_allclose(b.cov(), a.cov(), atol=1e-9)


def test_stats_only_cov_matches_batch():
    P = anisotropic(np.random.default_rng(0), 40)
    np.testing.assert_allclose(cluster_from_points(P).stats_only().cov(), brute_cov(P), atol=1e-12)


# ---------------------------------------------------------------- merge


def _same_stats(a: PointCluster, b: PointCluster, tol=1e-12):
    assert a.count == b.count
    np.testing.assert_allclose(a.sum, b.sum, rtol=tol, atol=tol)
    np.testing.assert_allclose(a.outer, b.outer, rtol=tol, atol=tol)


@given(points, st.integers(1, 29))
def test_merge_equals_batch(P, cut):
    cut = min(cut, len(P) - 1)
    m = merge_clusters(cluster_from_points(P[:cut]), cluster_from_points(P[cut:]))
    _same_stats(m, cluster_from_points(P))
    np.testing.assert_allclose(m.cov(), cluster_from_points(P).cov(), atol=1e-12)


def test_merge_coincident_points():
    p = [[1.5, -2.0, 0.25]]
    m = cluster_from_points(p) + cluster_from_points(p)
    assert m.count == 2
    np.testing.assert_allclose(m.stats_only().cov(), 0, atol=1e-15)


@given(points, points, points)
@settings(max_examples=50)
def test_merge_associative(a, b, c):
    A, B, C = (cluster_from_points(x) for x in (a, b, c))
    _same_stats(merge_clusters(merge_clusters(A, B), C), merge_clusters(A, merge_clusters(B, C)))


def test_merge_drops_points_from_stats_only_side():
    a = cluster_from_points(TRIANGLE)
    m = merge_clusters(a, a.stats_only())
    assert m.count == 6 and not m.has_points


# ---------------------------------------------------------------- eig


def test_eig_diagonal():
    ed = eig_sym3(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(ed.lam, [3, 2, 1], atol=1e-15)
    np.testing.assert_allclose(np.abs(ed.U), np.eye(3), atol=1e-15)


def test_eig_triangle():
    ed = eig_sym3(cluster_from_points(TRIANGLE).cov())
    np.testing.assert_allclose(ed.lam, [1 / 3, 1 / 9, 0], atol=1e-15)


def test_eig_rejects_non_finite():
    with pytest.raises(ValueError):
        eig_sym3(np.full((3, 3), np.nan))


@given(arrays(np.float64, (3, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_eig_reconstruction(M):
    A = 0.5 * (M + M.T)
    ed = eig_sym3(A)
    assert np.all(np.diff(ed.lam) <= 0)
    np.testing.assert_allclose(ed.U.T @ ed.U, np.eye(3), atol=1e-12)
    assert np.linalg.det(ed.U) > 0
    err = np.linalg.norm(ed.U @ np.diag(ed.lam) @ ed.U.T - A)
    assert err < 1e-9 * max(1.0, np.linalg.norm(A))


def test_eig_batch_matches_numpy():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(200, 3, 3))
    A = M + np.swapaxes(M, 1, 2)
    lam, U = eig_sym3_batch(A)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(A)[:, ::-1], atol=1e-12)


def test_eig_sign_convention():
    rng = np.random.default_rng(2)
    for _ in range(50):
        M = rng.normal(size=(3, 3))
        U = eig_sym3(M + M.T).U
        for k in (0, 1):
            assert U[np.argmax(np.abs(U[:, k])), k] > 0


# ---------------------------------------------------------------- costs


def test_coplanar_plane_cost_zero():
    assert feature_cost(cluster_from_points(TRIANGLE), PLANE) == pytest.approx(0, abs=1e-15)


def test_collinear_costs_zero():
    c = cluster_from_points([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert feature_cost(c, EDGE) == pytest.approx(0, abs=1e-15)
    assert feature_cost(c, PLANE) == pytest.approx(0, abs=1e-15)


def _random_units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def plane_msd(P, n, q):
    return np.mean(((P - q) @ n) ** 2)


def line_msd(P, n, q):
    d = P - q
    return np.mean(np.sum(d * d, axis=1) - (d @ n) ** 2)


def test_plane_cost_random_search_lower_bound():
    rng = np.random.default_rng(4)
    P = anisotropic(rng, 25)
    c = cluster_from_points(P)
    cost = feature_cost(c, PLANE)
    n = _random_units(rng, 100_000)
    q = P.mean(axis=0) + rng.normal(scale=0.5, size=(100_000, 3))
    vals = np.mean(((P[None, :, :] - q[:, None, :]) * n[:, None, :]).sum(axis=2) ** 2, axis=1)
    assert np.all(vals >= cost - 1e-12)
    f = optimal_feature(c, PLANE)
    assert plane_msd(P, f.n, f.q) == pytest.approx(cost, abs=1e-12)


def test_edge_cost_random_search_lower_bound():
    rng = np.random.default_rng(5)
    P = anisotropic(rng, 25)
    c = cluster_from_points(P)
    cost = feature_cost(c, EDGE)
    n = _random_units(rng, 100_000)
    q = P.mean(axis=0) + rng.normal(scale=0.5, size=(100_000, 3))
    d = P[None, :, :] - q[:, None, :]
    vals = np.mean(np.sum(d * d, axis=2) - np.sum(d * n[:, None, :], axis=2) ** 2, axis=1)
    assert np.all(vals >= cost - 1e-12)
    f = optimal_feature(c, EDGE)
    assert line_msd(P, f.n, f.q) == pytest.approx(cost, abs=1e-12)


def test_optimal_plane_of_triangle():
    f = optimal_feature(cluster_from_points(TRIANGLE), PLANE)
    np.testing.assert_allclose(np.abs(f.n), [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(f.q, [1 / 3, 1 / 3, 0], atol=1e-15)


def test_optimal_edge_of_axis_points():
    f = optimal_feature(cluster_from_points([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), EDGE)
    np.testing.assert_allclose(np.abs(f.n), [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(f.q, [1, 0, 0], atol=1e-15)


def test_optimal_feature_degenerate():
    ring = [[np.cos(a), np.sin(a), 0.0] for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    with pytest.raises(DegenerateFeature):
        optimal_feature(cluster_from_points(ring), EDGE)
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    with pytest.raises(DegenerateFeature):
        optimal_feature(cluster_from_points(cube), PLANE)


def test_feature_distance():
    f = optimal_feature(cluster_from_points(TRIANGLE), PLANE)
    assert f.distance([0.2, 0.1, 0.02]) == pytest.approx(0.02, abs=1e-15)
    e = optimal_feature(cluster_from_points([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), EDGE)
    assert e.distance([5.0, 0, 0]) == pytest.approx(0, abs=1e-15)
    assert e.distance([5.0, 3, 4]) == pytest.approx(5, abs=1e-14)


@given(points)
def test_trace_identity(P):
    c = cluster_from_points(P)
    lam = eig_sym3(c.cov()).lam
    direct = np.mean(np.sum((P - P.mean(axis=0)) ** 2, axis=1))
    assert abs(lam.sum() - direct) <= 1e-10 * max(1.0, direct)


@given(points, arrays(np.float64, 3, elements=st.floats(-3, 3, allow_nan=False)),
       arrays(np.float64, 3, elements=st.floats(-20, 20, allow_nan=False)))
def test_rigid_invariance(P, phi, t):
    T = Pose.from_rotvec(phi, t)
    a = eig_sym3(cluster_from_points(P).cov()).lam
    b = eig_sym3(cluster_from_points(T.apply(P)).cov()).lam
    assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, a[0])


@given(points)
def test_costs_bounded_by_spectrum(P):
    c = cluster_from_points(P)
    lam = eig_sym3(c.cov()).lam
    assert 0 <= feature_cost(c, PLANE) + 1e-12 <= feature_cost(c, EDGE) + 2e-12
    assert feature_cost(c, EDGE) <= lam.sum() + 1e-12


# ---------------------------------------------------------------- point derivatives


def _lam(P, k):
    return np.linalg.eigvalsh(brute_cov(P))[::-1][k]


def test_jacobian_zero_row_at_mean():
    P = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0], [0, 0, 0.5], [0, 0, -0.5], [0, 0, 0]])
    for k in range(3):
        J = lambda_point_jacobian(cluster_from_points(P), k)
        assert np.array_equal(J[-1], np.zeros(3))


@given(points)
def test_jacobian_rows_sum_to_zero(P):
    c = cluster_from_points(P)
    for k in range(3):
        J = lambda_point_jacobian(c, k)
        assert np.max(np.abs(J.sum(axis=0))) <= 1e-12 * max(1.0, np.max(np.abs(P)))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(20):
        P = anisotropic(rng, 10)
        c = cluster_from_points(P)
        for k in range(3):
            J = lambda_point_jacobian(c, k)
            fd = np.zeros_like(P)
            for i in range(len(P)):
                for a in range(3):
                    Pp, Pm = P.copy(), P.copy()
                    Pp[i, a] += h
                    Pm[i, a] -= h
                    fd[i, a] = (_lam(Pp, k) - _lam(Pm, k)) / (2 * h)
            assert np.max(np.abs(J - fd)) / np.max(np.abs(fd)) < 1e-5


def test_jacobian_requires_points():
    with pytest.raises(ValueError):
        lambda_point_jacobian(cluster_from_points(TRIANGLE).stats_only(), 0)


def test_hessian_symmetric():
    rng = np.random.default_rng(7)
    for _ in range(20):
        c = cluster_from_points(anisotropic(rng, int(rng.integers(4, 20))))
        for k in range(3):
            H = lambda_point_hessian(c, k)
            N = c.count
            B = H.reshape(N, 3, N, 3)
            # block (i, j) equals block (j, i) transposed
            np.testing.assert_allclose(B, np.transpose(B, (2, 3, 0, 1)), atol=1e-9)
            np.testing.assert_allclose(H, H.T, atol=1e-9)


def test_hessian_matches_jacobian_differences():
    rng = np.random.default_rng(8)
    h = 1e-5
    for _ in range(20):
        P = anisotropic(rng, 6)
        c = cluster_from_points(P)
        for k in range(3):
            H = lambda_point_hessian(c, k)
            fd = np.zeros_like(H)
            for col in range(P.size):
                Pp, Pm = P.copy().reshape(-1), P.copy().reshape(-1)
                Pp[col] += h
                Pm[col] -= h
                Jp = lambda_point_jacobian(cluster_from_points(Pp.reshape(-1, 3)), k).reshape(-1)
                Jm = lambda_point_jacobian(cluster_from_points(Pm.reshape(-1, 3)), k).reshape(-1)
                fd[:, col] = (Jp - Jm) / (2 * h)
            assert np.max(np.abs(H - fd)) / np.max(np.abs(fd)) < 1e-4


def test_hessian_degenerate_spectrum_raises():
    P = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 3], [0, 0, -3]])
    c = cluster_from_points(P)  # lambda_2 == lambda_3
    assert not spectrum_ok(eig_sym3(c.cov()).lam, (2,))
    with pytest.raises(DegenerateSpectrum):
        lambda_point_hessian(c, 2)
    lambda_point_hessian(c, 0)  # the isolated eigenvalue is still fine


def test_taylor_remainder_is_third_order():
    rng = np.random.default_rng(9)
    for _ in range(10):
        P = anisotropic(rng, 8)
        c = cluster_from_points(P)
        dp = rng.normal(size=P.shape)
        dp /= np.linalg.norm(dp)
        for k in range(3):
            lam0 = _lam(P, k)
            J = lambda_point_jacobian(c, k).reshape(-1)
            H = lambda_point_hessian(c, k)

            def remainder(s):
                d = s * dp.reshape(-1)
                return abs(_lam(P + s * dp, k) - (lam0 + J @ d + 0.5 * d @ H @ d))

            r = [remainder(0.02 / 2 ** i) for i in range(3)]
            assert r[0] / r[1] >= 2.7
            assert r[1] / r[2] >= 2.7


# ---------------------------------------------------------------- pose model


def test_pose_model_single_scan_translation_block():
    rng = np.random.default_rng(10)
    P = anisotropic(rng, 15)
    T = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    world = T.apply(P)
    for kind in (PLANE, EDGE):
        m = pose_model(cluster_from_points(world, np.zeros(15, dtype=int), P), [T], kind)
        Jp = sum(lambda_point_jacobian(cluster_from_points(world), k) for k in kind.eigen_indices)
        np.testing.assert_allclose(m.J[3:6], Jp.sum(axis=0), atol=1e-12)
        # a single rigid scan: the feature moves with it, so the cost is unchanged
        np.testing.assert_allclose(m.J, 0, atol=1e-12)


def test_pose_model_coplanar_two_scans_is_minimum():
    rng = np.random.default_rng(11)
    world = np.c_[rng.uniform(-1, 1, size=(30, 2)), np.zeros(30)]
    poses = [Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3)) for _ in range(2)]
    ids = np.repeat([0, 1], 15)
    local = np.vstack([poses[0].inverse().apply(world[:15]), poses[1].inverse().apply(world[15:])])
    m = pose_model(cluster_from_points(world, ids, local), poses, PLANE)
    assert m.cost == pytest.approx(0, abs=1e-12)
    assert np.max(np.abs(m.J)) < 1e-10


def _window_cost(local, ids, poses, kind):
    world = np.array([poses[s].apply(p) for s, p in zip(ids, local)])
    return feature_cost(cluster_from_points(world), kind)


def test_pose_model_matches_finite_differences():
    rng = np.random.default_rng(12)
    M = 3
    for trial in range(6):
        kind = (PLANE, EDGE)[trial % 2]
        poses = [Pose.from_rotvec(rng.normal(scale=0.3, size=3), rng.normal(size=3)) for _ in range(M)]
        ids = rng.integers(0, M, size=24)
        ids[:M] = np.arange(M)
        local = anisotropic(rng, 24, (1.0, 0.4, 0.05))
        world = np.array([poses[s].apply(p) for s, p in zip(ids, local)])
        m = pose_model(cluster_from_points(world, ids, local), poses, kind)
        assert m.cost == pytest.approx(_window_cost(local, ids, poses, kind), abs=1e-12)

        def f(delta):
            return _window_cost(local, ids, [boxplus(p, delta[6 * j:6 * j + 6]) for j, p in enumerate(poses)], kind)

        n = 6 * M
        E = np.eye(n)
        h = 1e-6
        g = np.array([(f(h * E[i]) - f(-h * E[i])) / (2 * h) for i in range(n)])
        assert np.max(np.abs(m.J - g)) / np.max(np.abs(g)) < 1e-5
        h = 1e-4
        H = np.zeros((n, n))
        for a in range(n):
            for b in range(a, n):
                v = (f(h * (E[a] + E[b])) - f(h * (E[a] - E[b])) - f(h * (E[b] - E[a])) + f(-h * (E[a] + E[b])))
                H[a, b] = H[b, a] = v / (4 * h * h)
        assert np.max(np.abs(m.H - H)) / np.max(np.abs(H)) < 1e-3
        np.testing.assert_allclose(m.H, m.H.T, atol=1e-12)


def test_pose_model_fixed_stats_are_constant():
    rng = np.random.default_rng(13)
    poses = [Pose.identity(), Pose.from_rotvec([0.01, 0, 0], [0, 0, 0.01])]
    local = anisotropic(rng, 20, (1.0, 1.0, 0.01))
    ids = np.repeat([0, 1], 10)
    fixed = cluster_from_points(anisotropic(rng, 20, (1.0, 1.0, 0.01))).stats_only()
    world = np.array([poses[s].apply(p) for s, p in zip(ids, local)])
    m = pose_model(cluster_from_points(world, ids, local), poses, PLANE, fixed=fixed)
    both = merge_clusters(cluster_from_points(world), fixed)
    assert m.cost == pytest.approx(feature_cost(both, PLANE), abs=1e-12)
