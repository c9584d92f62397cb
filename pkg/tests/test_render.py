import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmvr.camera import (
    CameraIntrinsics,
    ViewPose,
    pose_backward,
    pose_to_matrix,
    project,
    project_backward,
    to_camera,
)
from dfmvr.errors import BehindCameraError, InvalidArgumentError
from dfmvr.morphable_model import N_CLASSES, K_EXP, K_ID, K_TEX, evaluate_shape, evaluate_texture
from dfmvr.render import rasterize, rasterize_backward, rasterize_mesh

from conftest import central_diff, rel_err

angle = st.floats(-0.6, 0.6, allow_nan=False)


def codes_for(n, cls=1):
    c = np.zeros((n, N_CLASSES))
    c[:, cls] = 1
    return c


@settings(max_examples=100, deadline=None)
@given(angle, angle, angle)
def test_rotation_is_proper(p, y, r):
    R, _ = pose_to_matrix(ViewPose(p, y, r))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_rotation_order():
    # yaw alone turns +z toward +x
    R, _ = pose_to_matrix(ViewPose(yaw=np.pi / 2))
    assert np.allclose(R @ [0, 0, 1], [1, 0, 0], atol=1e-12)
    R, _ = pose_to_matrix(ViewPose(pitch=0.3, yaw=0.2, roll=0.1))
    c, s = np.cos, np.sin
    Rx = np.array([[1, 0, 0], [0, c(.3), -s(.3)], [0, s(.3), c(.3)]])
    Ry = np.array([[c(.2), 0, s(.2)], [0, 1, 0], [-s(.2), 0, c(.2)]])
    Rz = np.array([[c(.1), -s(.1), 0], [s(.1), c(.1), 0], [0, 0, 1]])
    assert np.allclose(R, Rz @ Ry @ Rx)


def test_projection_formula():
    cam = CameraIntrinsics(focal=500, cx=60, cy=40, width=120, height=80)
    uv = project(np.array([[10.0, 20.0, 100.0]]), cam)
    assert np.allclose(uv, [[60 + 50, 40 - 100]])


def test_behind_camera():
    cam = CameraIntrinsics.default(32)
    with pytest.raises(BehindCameraError) as e:
        project(np.array([[0, 0, 5.0], [0, 0, 0.5], [0, 0, -1.0]]), cam)
    assert e.value.vertex == 1


def test_camera_validation():
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(focal=-1)
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(cx=500)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projection_and_pose_gradients(seed):
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics.default(64)
    pose = ViewPose(*rng.uniform(-0.5, 0.5, 3), *rng.uniform(-20, 20, 2), rng.uniform(300, 600))
    pts = rng.uniform(-50, 50, (4, 3))
    w = rng.normal(size=(4, 2))

    def f_pts(p):
        return float((project(to_camera(p, pose), cam) * w).sum())

    def f_pose(v):
        return float((project(to_camera(pts, ViewPose.from_vector(v)), cam) * w).sum())

    d_cam = project_backward(to_camera(pts, pose), cam, w)
    d_pts, d_pose = pose_backward(pts, pose, d_cam)
    assert rel_err(d_pts, central_diff(f_pts, pts.copy(), 1e-5)) < 1e-6
    assert rel_err(d_pose, central_diff(f_pose, pose.as_vector(), 1e-6)) < 1e-6


def pixel_centers(cam):
    r, c = np.mgrid[0:cam.height, 0:cam.width]
    return np.stack([c + 0.5, r + 0.5], -1).reshape(-1, 2)


def inside_oracle(tri_uv, q):
    # barycentrics by solving the 2x2 system per point
    a, b, c = tri_uv
    M = np.array([b - a, c - a]).T
    lam = np.linalg.solve(M, (q - a).T).T
    l0 = 1 - lam.sum(1)
    return (lam[:, 0] >= -1e-9) & (lam[:, 1] >= -1e-9) & (l0 >= -1e-9), np.column_stack([l0, lam])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_single_triangle_coverage_matches_half_plane_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics.default(32)
    pts = np.column_stack([rng.uniform(-12, 12, (3, 2)), rng.uniform(90, 110, 3)])
    uv = project(pts, cam)
    e1, e2 = uv[1] - uv[0], uv[2] - uv[0]
    area = abs(e1[0] * e2[1] - e1[1] * e2[0])
    if area < 1.0:
        return
    frame = rasterize_mesh(pts, np.array([[0, 1, 2]]), np.ones((3, 3)), codes_for(3),
                           ViewPose(), cam)
    q = pixel_centers(cam)
    inside, bary = inside_oracle(uv, q)
    got = frame.coverage.reshape(-1)
    # pixels exactly on an edge may go either way
    margin = np.min(np.abs(bary), axis=1) < 1e-7
    assert np.array_equal(got[~margin], inside[~margin])
    cov = got & ~margin
    assert np.allclose(frame.bary.reshape(-1, 3)[cov], bary[cov], atol=1e-9)


def test_zbuffer_keeps_nearest():
    cam = CameraIntrinsics.default(32)
    tri = np.array([[-20, -20, 0], [20, -20, 0], [0, 20, 0.0]])
    near = tri + [0, 0, 100]
    far = tri + [0, 0, 120]
    for order in ((near, far), (far, near)):
        pts = np.vstack(order)
        colors = np.vstack([np.full((3, 3), 0.2), np.full((3, 3), 0.8)])
        if order[0] is far:
            colors = colors[::-1]
        frame = rasterize_mesh(pts, np.array([[0, 1, 2], [3, 4, 5]]), colors,
                               codes_for(6), ViewPose(), cam)
        covered = frame.coverage
        # the near triangle is a superset on screen, so it wins everywhere it covers
        assert np.allclose(frame.color[covered], 0.2)
        assert np.allclose(frame.depth[covered][frame.depth[covered] > 0] > 0, True)
        assert frame.depth[covered].max() < 120


def test_partitions_of_unity(toy):
    cam = CameraIntrinsics.default(64)
    shape = evaluate_shape(toy, np.zeros(K_ID), np.zeros(K_EXP))
    frame = rasterize(toy, shape, evaluate_texture(toy, np.zeros(K_TEX)),
                      ViewPose(0, 0.3, 0, 0, 0, 1000), cam)
    cov = frame.coverage
    assert cov.sum() > 500
    assert np.allclose(frame.bary[cov].sum(-1), 1.0)
    assert np.allclose(frame.class_probs[cov].sum(-1), 1.0)
    assert np.all(frame.class_probs[~cov][..., 0] == 1)  # uncovered pixels are background
    assert np.all(frame.color[~cov] == 0)
    assert np.all(frame.tri_id[~cov] == -1)


def test_degenerate_triangle_skipped():
    cam = CameraIntrinsics.default(32)
    pts = np.array([[-10, -10, 100], [10, -10, 100], [0, 10, 100], [0, 0, 100.0]])
    tris = np.array([[0, 1, 2], [3, 3, 1]])
    frame = rasterize_mesh(pts, tris, np.ones((4, 3)), codes_for(4), ViewPose(), cam)
    assert frame.n_degenerate == 1
    assert np.all(frame.tri_id[frame.coverage] == 0)


def probe(seed, size=24):
    """Two overlapping random triangles and a random pixel weighting."""
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics.default(size)
    pts = np.column_stack([rng.uniform(-15, 15, (6, 2)), rng.uniform(95, 115, 6)])
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    colors = rng.uniform(0, 1, (6, 3))
    codes = rng.dirichlet(np.ones(N_CLASSES), 6)
    pose = ViewPose(*rng.uniform(-0.05, 0.05, 3), 0, 0, 0)
    W = rng.normal(size=(size, size, 3))
    Wc = rng.normal(size=(size, size, N_CLASSES))
    return cam, pts, tris, colors, codes, pose, W, Wc


@pytest.mark.parametrize("seed", range(12))
def test_rasterizer_gradients_fixed_visibility(seed):
    cam, pts, tris, colors, codes, pose, W, Wc = probe(seed)
    base = rasterize_mesh(pts, tris, colors, codes, pose, cam)

    def render(p=pts, c=colors, ps=pose):
        return rasterize_mesh(p, tris, c, codes, ps, cam)

    def loss(fr):
        return float((fr.color * W).sum() + (fr.class_probs * Wc).sum())

    g = rasterize_backward(base, W, Wc)
    h = 1e-5

    def stable(fr):
        return np.array_equal(fr.tri_id, base.tri_id)

    checked = 0

    for arr_name, arr, grad in (("points", pts, g.points), ("colors", colors, g.colors)):
        for i in range(arr.shape[0]):
            for j in range(3):
                a, b = arr.copy(), arr.copy()
                a[i, j] += h
                b[i, j] -= h
                fa = render(p=a) if arr_name == "points" else render(c=a)
                fb = render(p=b) if arr_name == "points" else render(c=b)
                if not (stable(fa) and stable(fb)):
                    continue
                num = (loss(fa) - loss(fb)) / (2 * h)
                checked += 1
                assert abs(num - grad[i, j]) <= 1e-3 * max(1.0, abs(num)), (arr_name, i, j)
    v = pose.as_vector()
    for k in range(6):
        a, b = v.copy(), v.copy()
        a[k] += h
        b[k] -= h
        fa, fb = render(ps=ViewPose.from_vector(a)), render(ps=ViewPose.from_vector(b))
        if stable(fa) and stable(fb):
            num = (loss(fa) - loss(fb)) / (2 * h)
            checked += 1
            assert abs(num - g.pose[k]) <= 1e-3 * max(1.0, abs(num)), k
    assert checked >= 30


def test_render_backward_only_touches_visible_vertices(toy):
    cam = CameraIntrinsics.default(48)
    shape = evaluate_shape(toy, np.zeros(K_ID), np.zeros(K_EXP))
    frame = rasterize(toy, shape, evaluate_texture(toy, np.zeros(K_TEX)),
                      ViewPose(0, 0, 0, 0, 0, 1000), cam)
    g = rasterize_backward(frame, np.ones_like(frame.color))
    seen = np.unique(toy.triangles[frame.tri_id[frame.coverage]])
    untouched = np.setdiff1d(np.arange(toy.n_vertices), seen)
    assert np.all(g.colors[untouched] == 0) and np.all(g.points[untouched] == 0)
