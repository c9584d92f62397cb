import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dfmvr.errors import EmptyCropError, InvalidMeshError
from dfmvr.metrics import (
    RAMP_COLORS,
    Mesh,
    crop_front_face,
    error_colors,
    error_map,
    evaluate_meshes,
    icp_register,
    nearest_neighbors,
    point_to_plane_distances,
    point_to_plane_rmse,
)
from dfmvr.morphable_model import K_EXP, K_ID, evaluate_shape
from dfmvr.similarity import SimilarityTransform

seeds = st.integers(0, 2**31 - 1)


def grid_mesh(n=12, spacing=10.0, bump=0.0, seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:n, 0:n] * spacing
    z = bump * rng.normal(size=x.shape)
    v = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    f = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return Mesh(v, f)


def brute_normals(mesh):
    n = np.zeros_like(mesh.vertices)
    for tri in mesh.triangles:
        p = mesh.vertices[tri]
        fn = np.cross(p[1] - p[0], p[2] - p[0])
        for k in tri:
            n[k] += fn
    out = np.zeros_like(n)
    for i, vec in enumerate(n):
        norm = np.sqrt(vec @ vec)
        if norm > 0:
            out[i] = vec / norm
    return out


def brute_rmse(pred, gt):
    normals = brute_normals(gt)
    total = 0.0
    for p in pred.vertices:
        best, best_j = np.inf, -1
        for j, q in enumerate(gt.vertices):
            if normals[j] @ normals[j] < 0.25:
                continue
            d = np.sum((p - q) ** 2)
            if d < best:
                best, best_j = d, j
        total += float(normals[best_j] @ (p - gt.vertices[best_j])) ** 2
    return np.sqrt(total / len(pred.vertices))


@pytest.mark.parametrize("seed", range(6))
def test_rmse_matches_all_pairs_oracle(seed):
    gt = grid_mesh(n=10 + seed, bump=2.0, seed=seed)
    rng = np.random.default_rng(100 + seed)
    pred = Mesh(gt.vertices + rng.normal(0, 1.5, gt.vertices.shape), gt.triangles)
    assert len(gt) <= 500
    assert abs(point_to_plane_rmse(pred, gt) - brute_rmse(pred, gt)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(5, 700))
def test_nearest_neighbors_match_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(max(n // 2, 1), 3))
    idx, dist = nearest_neighbors(a, b)
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    assert np.allclose(dist, d.min(1), atol=1e-12)
    assert np.allclose(d[np.arange(n), idx], d.min(1), atol=1e-12)


def test_plane_offset_is_exact():
    gt = grid_mesh()
    pred = Mesh(gt.vertices + [0, 0, 0.5], gt.triangles)
    assert point_to_plane_rmse(pred, gt) == pytest.approx(0.5, abs=1e-12)
    # tangential sliding is not penalized
    slide = Mesh(gt.vertices + [3.0, 0, 0], gt.triangles)
    assert point_to_plane_rmse(slide, gt) == pytest.approx(0.0, abs=1e-12)


def test_vertex_normals():
    m = grid_mesh(n=4)
    n = m.vertex_normals()
    assert np.allclose(n, [0, 0, 1])
    lonely = Mesh(np.vstack([m.vertices, [[99, 99, 99]]]), m.triangles)
    assert np.all(lonely.vertex_normals()[-1] == 0)
    with pytest.raises(InvalidMeshError):
        point_to_plane_distances(m, Mesh(m.vertices))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_icp_residual_non_increasing(seed):
    rng = np.random.default_rng(seed)
    gt = grid_mesh(n=9, bump=3.0, seed=seed % 1000)
    R = Rotation.from_rotvec(rng.normal(0, 0.15, 3)).as_matrix()
    T = SimilarityTransform(float(rng.uniform(0.8, 1.25)), R, rng.normal(0, 5, 3))
    src = Mesh(T.apply(gt.vertices) + rng.normal(0, 0.5, gt.vertices.shape), gt.triangles)
    res = icp_register(src, gt, max_iters=60)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 0)
    assert res.residual == h[-1]


def test_icp_recovers_known_transform(toy):
    shape = evaluate_shape(toy, np.zeros(K_ID), np.zeros(K_EXP))
    gt = Mesh(shape, toy.triangles)
    T = SimilarityTransform(1.05, Rotation.from_rotvec([0.03, -0.05, 0.02]).as_matrix(),
                            np.array([2.0, -1.0, 3.0]))
    ev = evaluate_meshes(gt.transformed(T), gt)
    assert ev.rmse < 1e-6 and ev.icp_residual < 1e-6


def test_identical_meshes_score_zero(toy):
    gt = Mesh(toy.mean_shape.reshape(-1, 3), toy.triangles)
    assert evaluate_meshes(gt, gt).rmse < 1e-9


def test_noise_monte_carlo():
    # normal-direction gaussian noise of sigma gives rmse close to sigma
    gt = grid_mesh(n=40, spacing=2.0)
    rng = np.random.default_rng(7)
    sigma = 0.3
    pred = Mesh(gt.vertices + np.column_stack([np.zeros((1600, 2)), rng.normal(0, sigma, 1600)]))
    r = point_to_plane_rmse(pred, gt)
    assert abs(r - sigma) < 4 * sigma / np.sqrt(2 * 1600)


def test_crop_reindexes(toy):
    mesh = Mesh(toy.mean_shape.reshape(-1, 3), toy.triangles)
    c = toy.crop_center
    crop = crop_front_face(mesh, c, 60.0)
    keep = np.linalg.norm(mesh.vertices - mesh.vertices[c], axis=1) <= 60
    assert len(crop) == keep.sum()
    assert crop.triangles.max() < len(crop)
    assert np.all(np.linalg.norm(crop.vertices - mesh.vertices[c], axis=1) <= 60)
    # every kept triangle corresponds to an original triangle with all vertices inside
    assert len(crop.triangles) == int(np.all(keep[toy.triangles], axis=1).sum())


def test_empty_crop(toy):
    mesh = Mesh(toy.mean_shape.reshape(-1, 3), toy.triangles)
    far = Mesh(mesh.vertices + [500.0, 0, 0], mesh.triangles)
    with pytest.raises(EmptyCropError):
        evaluate_meshes(far, mesh, register=False)


def test_error_ramp():
    assert np.allclose(error_colors([0, 1, 2, 3, 10], 3.0),
                       [RAMP_COLORS[0], RAMP_COLORS[1], RAMP_COLORS[2], RAMP_COLORS[3], RAMP_COLORS[3]])
    assert np.allclose(error_colors([0.5], 3.0), [[0, 0.5, 0.5]])
    gt = grid_mesh()
    err, colored = error_map(Mesh(gt.vertices + [0, 0, 1.0], gt.triangles), gt, 2.0)
    assert np.allclose(err, 1.0) and np.allclose(colored.colors, [0.5, 1, 0])
