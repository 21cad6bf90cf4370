import numpy as np
import pytest

from gensplat import geometry as geo
from gensplat.errors import (
    BehindCameraError,
    DegenerateBaselineError,
    NonpositiveDepthError,
    NoPairsError,
)
from gensplat.geometry import Camera, CorrespondenceSet


def random_camera(rng, width=64, height=48):
    # random rotation via QR of a Gaussian matrix
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Camera(
        fx=float(rng.uniform(30, 80)),
        fy=float(rng.uniform(30, 80)),
        cx=width / 2 + float(rng.uniform(-2, 2)),
        cy=height / 2 + float(rng.uniform(-2, 2)),
        R=q.T,
        t=rng.uniform(-1, 1, 3),
        width=width,
        height=height,
    )


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(fx=-1, fy=1, cx=0, cy=0, R=np.eye(3), t=np.zeros(3), width=4, height=4)
    bad_R = np.eye(3)
    bad_R[0, 0] = 1.5
    with pytest.raises(ValueError):
        Camera(fx=1, fy=1, cx=0, cy=0, R=bad_R, t=np.zeros(3), width=4, height=4)


def test_camera_json_roundtrip():
    rng = np.random.default_rng(0)
    cam = random_camera(rng)
    cam2 = Camera.from_json(cam.to_json())
    np.testing.assert_array_equal(cam.R, cam2.R)
    np.testing.assert_array_equal(cam.t, cam2.t)
    assert (cam.fx, cam.fy, cam.cx, cam.cy) == (cam2.fx, cam2.fy, cam2.cx, cam2.cy)


def test_project_identity_camera():
    cam = geo.identity_camera()
    px, z = geo.project_point(cam, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(px, [0.0, 0.0])
    assert z == 1.0
    px, z = geo.project_point(cam, np.array([2.0, 0.0, 2.0]))
    np.testing.assert_allclose(px, [cam.fx * 1.0 + cam.cx, cam.cy])
    assert z == 2.0


def test_project_behind_camera():
    cam = geo.identity_camera()
    with pytest.raises(BehindCameraError):
        geo.project_point(cam, np.array([0.0, 0.0, -1.0]))


def test_unproject_identity():
    cam = geo.identity_camera()
    p = geo.unproject_pixel(cam, np.array([0.0, 0.0]), 1.0)
    np.testing.assert_allclose(p, [0.0, 0.0, 1.0])
    with pytest.raises(NonpositiveDepthError):
        geo.unproject_pixel(cam, np.array([0.0, 0.0]), 0.0)


def test_project_unproject_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(20):
        cam = random_camera(rng)
        # points in front of the camera
        depths = rng.uniform(0.2, 20.0, 50)
        pixels = rng.uniform(0, [cam.width, cam.height], (50, 2))
        pts = geo.unproject_pixels(cam, pixels, depths)
        for i in range(50):
            px, z = geo.project_point(cam, pts[i])
            assert abs(z - depths[i]) < 1e-9
            assert np.abs(px - pixels[i]).max() < 1e-9
            back = geo.unproject_pixel(cam, px, z)
            assert np.abs(back - pts[i]).max() < 1e-9


def test_plucker_invariants():
    rng = np.random.default_rng(3)
    cam = random_camera(rng, width=16, height=12)
    pm = geo.plucker_map(cam)
    d, m = pm[..., :3], pm[..., 3:]
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-9)
    assert np.abs((d * m).sum(axis=-1)).max() < 1e-9


def test_plucker_identity_center_ray():
    # principal point at the center of pixel (1,1) of a 3x3 image
    cam = Camera(fx=1, fy=1, cx=1.5, cy=1.5, R=np.eye(3), t=np.zeros(3), width=3, height=3)
    pm = geo.plucker_map(cam)
    np.testing.assert_allclose(pm[1, 1, :3], [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(pm[1, 1, 3:], [0, 0, 0], atol=1e-12)


def test_plucker_rigid_motion_transform():
    # moving the world by G maps rays by the induced line transform
    rng = np.random.default_rng(11)
    cam = random_camera(rng, width=8, height=6)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    u = rng.uniform(-2, 2, 3)
    # camera seeing the world moved by (q, u): R' = R q^T, t' = t - R q^T u
    cam2 = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  R=cam.R @ q.T, t=cam.t - cam.R @ q.T @ u,
                  width=cam.width, height=cam.height)
    pm1, pm2 = geo.plucker_map(cam), geo.plucker_map(cam2)
    d1, m1 = pm1[..., :3], pm1[..., 3:]
    d_exp = d1 @ q.T
    m_exp = m1 @ q.T + np.cross(np.broadcast_to(u, d_exp.shape), d_exp)
    np.testing.assert_allclose(pm2[..., :3], d_exp, atol=1e-9)
    np.testing.assert_allclose(pm2[..., 3:], m_exp, atol=1e-9)


def test_fundamental_matrix_epipolar_constraint():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cam_a = random_camera(rng)
        cam_b = random_camera(rng)
        F = geo.fundamental_matrix(cam_a, cam_b)
        # rank 2
        s = np.linalg.svd(F, compute_uv=False)
        assert s[2] < 1e-8 * s[0]
        # shared 3D points satisfy the constraint
        for _ in range(5):
            p = geo.unproject_pixel(cam_a, rng.uniform(5, 40, 2), float(rng.uniform(1, 10)))
            try:
                xa, _ = geo.project_point(cam_a, p)
                xb, _ = geo.project_point(cam_b, p)
            except BehindCameraError:
                continue
            val = abs(np.array([xb[0], xb[1], 1.0]) @ F @ np.array([xa[0], xa[1], 1.0]))
            assert val < 1e-7


def test_fundamental_matrix_pure_translation():
    cam_a = geo.identity_camera(width=10, height=10)
    cam_b = Camera(fx=1, fy=1, cx=0, cy=0, R=np.eye(3), t=np.array([-1.0, 0, 0]),
                   width=10, height=10)
    F = geo.fundamental_matrix(cam_a, cam_b)
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)])
        xa, _ = geo.project_point(cam_a, p)
        xb, _ = geo.project_point(cam_b, p)
        assert abs(np.array([*xb, 1.0]) @ F @ np.array([*xa, 1.0])) < 1e-9


def test_fundamental_matrix_degenerate_and_swap():
    rng = np.random.default_rng(9)
    cam = random_camera(rng)
    with pytest.raises(DegenerateBaselineError):
        geo.fundamental_matrix(cam, cam)
    cam_b = random_camera(rng)
    F_ab = geo.fundamental_matrix(cam, cam_b)
    F_ba = geo.fundamental_matrix(cam_b, cam)
    # transposed up to scale/sign
    ratio = F_ba / F_ab.T
    ratio = ratio[np.abs(F_ab.T) > 1e-6]
    np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-6)


def nearby_camera(cam, rng, angle=0.15, shift=0.3):
    # small rotation about a random axis plus a small translation
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-angle, angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    dR = np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  R=dR @ cam.R, t=cam.t + rng.uniform(-shift, shift, 3),
                  width=cam.width, height=cam.height)


def test_epipolar_samples_on_line():
    rng = np.random.default_rng(13)
    checked = 0
    for _ in range(100):
        cam_a = random_camera(rng)
        cam_b = nearby_camera(cam_a, rng)
        F = geo.fundamental_matrix(cam_a, cam_b)
        pixel = rng.uniform(5, [cam_a.width - 5, cam_a.height - 5])
        pts = geo.epipolar_samples(cam_a, cam_b, pixel, n=32)
        if len(pts) == 0:
            continue
        assert len(pts) == 32
        line = F @ np.array([*pixel, 1.0])
        for x in pts:
            assert geo.point_line_distance(line, x) < 1e-6
            assert -1e-9 <= x[0] <= cam_b.width + 1e-9
            assert -1e-9 <= x[1] <= cam_b.height + 1e-9
        checked += 1
    assert checked > 30  # most random pairs overlap


def test_epipolar_samples_empty_when_line_misses():
    # neighbor looking the opposite way: line misses its image entirely
    cam_a = geo.identity_camera(width=8, height=8, fx=4, fy=4, cx=4, cy=4)
    flip = np.diag([1.0, -1.0, -1.0])  # 180 deg about x
    cam_b = Camera(fx=4, fy=4, cx=4, cy=4, R=flip, t=np.array([0.0, 0.0, -5.0]),
                   width=8, height=8)
    pts = geo.epipolar_samples(cam_a, cam_b, np.array([4.0, 4.0]), n=8)
    assert pts.shape == (0, 2)


def test_symmetric_epipolar_distance_properties():
    rng = np.random.default_rng(21)
    cam_a = random_camera(rng)
    cam_b = random_camera(rng)
    F = geo.fundamental_matrix(cam_a, cam_b)
    p = geo.unproject_pixel(cam_a, np.array([30.0, 20.0]), 4.0)
    xa, _ = geo.project_point(cam_a, p)
    xb, _ = geo.project_point(cam_b, p)
    assert geo.symmetric_epipolar_distance(F, xa, xb) < 1e-9
    # displacing x_b perpendicular to its line adds exactly delta to the first term
    line = F @ np.array([*xa, 1.0])
    normal = np.array([line[0], line[1]]) / np.hypot(line[0], line[1])
    delta = 0.37
    d = geo.symmetric_epipolar_distance(F, xa, xb + delta * normal)
    d_first = geo.point_line_distance(line, xb + delta * normal)
    assert abs(d_first - delta) < 1e-9
    assert d >= delta - 1e-9
    # symmetry under swapping arguments and transposing F
    d1 = geo.symmetric_epipolar_distance(F, xa, xb + delta * normal)
    d2 = geo.symmetric_epipolar_distance(F.T, xb + delta * normal, xa)
    assert abs(d1 - d2) < 1e-12


def test_sed_vectorized_matches_scalar():
    rng = np.random.default_rng(4)
    cam_a = random_camera(rng)
    cam_b = random_camera(rng)
    F = geo.fundamental_matrix(cam_a, cam_b)
    xs_a = rng.uniform(0, 40, (20, 2))
    xs_b = rng.uniform(0, 40, (20, 2))
    vec = geo.symmetric_epipolar_distances(F, xs_a, xs_b)
    for i in range(20):
        assert abs(vec[i] - geo.symmetric_epipolar_distance(F, xs_a[i], xs_b[i])) < 1e-12


def test_tsed_basic():
    rng = np.random.default_rng(17)
    cam_a = random_camera(rng)
    cam_b = nearby_camera(cam_a, rng)
    F = geo.fundamental_matrix(cam_a, cam_b)
    # exact correspondences from shared points
    pts = [geo.unproject_pixel(cam_a, rng.uniform(10, 30, 2), float(rng.uniform(2, 6)))
           for _ in range(40)]
    xs_a, xs_b = [], []
    for p in pts:
        try:
            xa, _ = geo.project_point(cam_a, p)
            xb, _ = geo.project_point(cam_b, p)
        except BehindCameraError:
            continue
        xs_a.append(xa)
        xs_b.append(xb)
    corr = CorrespondenceSet(np.array(xs_a), np.array(xs_b), np.ones(len(xs_a)))
    assert geo.tsed([(corr, F)], threshold=2.0, min_matches=10) == 1.0
    # empty set counts as inconsistent
    assert geo.tsed([(CorrespondenceSet(), F)], threshold=2.0) == 0.0
    assert geo.tsed([(corr, F), (CorrespondenceSet(), F)], threshold=2.0) == 0.5
    with pytest.raises(NoPairsError):
        geo.tsed([], threshold=2.0)


def test_tsed_monotone_under_bad_pair():
    rng = np.random.default_rng(19)
    cam_a = random_camera(rng)
    cam_b = random_camera(rng)
    F = geo.fundamental_matrix(cam_a, cam_b)
    good = CorrespondenceSet(rng.uniform(0, 40, (15, 2)), rng.uniform(0, 40, (15, 2)),
                             np.ones(15))
    pairs = [(good, F)]
    base = geo.tsed(pairs, threshold=1e9)  # everything consistent at huge threshold
    assert base == 1.0
    # a pair with median SED above threshold never increases the score
    bad = CorrespondenceSet(rng.uniform(0, 40, (15, 2)), rng.uniform(0, 40, (15, 2)) + 500,
                            np.ones(15))
    assert geo.tsed(pairs + [(bad, F)], threshold=1.0) <= geo.tsed(pairs, threshold=1.0)


def test_match_blocks_identity():
    rng = np.random.default_rng(23)
    img = rng.random((48, 48))
    corr = geo.match_blocks(img, img, grid_step=8, window=3, search_radius=4)
    assert len(corr) > 0
    np.testing.assert_array_equal(corr.xy_a, corr.xy_b)
    np.testing.assert_allclose(corr.score, 1.0, atol=1e-12)


def test_match_blocks_shift():
    rng = np.random.default_rng(29)
    img = rng.random((48, 48))
    shifted = np.roll(img, 3, axis=1)  # content moves +3 in x
    corr = geo.match_blocks(img, shifted, grid_step=4, window=3, search_radius=5)
    assert len(corr) >= 10
    offsets = corr.xy_b - corr.xy_a
    med = np.median(offsets, axis=0)
    np.testing.assert_allclose(med, [3.0, 0.0], atol=1e-9)


def test_match_blocks_uncorrelated_noise():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.random((40, 40))
        b = rng.random((40, 40))
        hits += len(geo.match_blocks(a, b, grid_step=6, window=4, search_radius=4))
    assert hits <= 5  # near-empty across 10 seeds


def test_correspondence_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(31)
    corr = CorrespondenceSet(rng.random((7, 2)) * 30, rng.random((7, 2)) * 30, rng.random(7))
    path = tmp_path / "corr.csv"
    corr.to_csv(path)
    back = CorrespondenceSet.from_csv(path)
    np.testing.assert_array_equal(corr.xy_a, back.xy_a)
    np.testing.assert_array_equal(corr.xy_b, back.xy_b)
    np.testing.assert_array_equal(corr.score, back.score)


def test_trajectory_json_roundtrip(tmp_path):
    rng = np.random.default_rng(37)
    cams = [random_camera(rng) for _ in range(4)]
    path = tmp_path / "traj.json"
    geo.save_trajectory(cams, path)
    back = geo.load_trajectory(path)
    assert len(back) == 4
    for c1, c2 in zip(cams, back):
        np.testing.assert_array_equal(c1.R, c2.R)
        np.testing.assert_array_equal(c1.t, c2.t)
