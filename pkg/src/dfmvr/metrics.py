"""Mesh evaluation: similarity ICP, front-face cropping, point-to-plane RMSE, error maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCropError, InvalidArgumentError, InvalidMeshError
from .similarity import SimilarityTransform, solve_similarity

BRUTE_FORCE_BELOW = 500


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidArgumentError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def __len__(self):
        return len(self.vertices)

    def vertex_normals(self) -> np.ndarray:
        """Stored normals, else area-weighted averages of incident face normals.

        Vertices without a non-degenerate incident triangle get a zero normal.
        """
        if self.normals is not None:
            return np.asarray(self.normals, dtype=np.float64)
        v, f = self.vertices, self.triangles
        n = np.zeros_like(v)
        if f.size:
            fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # |fn| = 2 * area
            for k in range(3):
                np.add.at(n, f[:, k], fn)
        norm = np.linalg.norm(n, axis=1)
        ok = norm > 1e-300
        n[ok] /= norm[ok, None]
        n[~ok] = 0.0
        return n

    def transformed(self, T: SimilarityTransform) -> "Mesh":
        normals = None if self.normals is None else np.asarray(self.normals) @ T.R.T
        return Mesh(T.apply(self.vertices), self.triangles, normals, self.colors)


def nearest_neighbors(points, targets):
    """Index of and distance to the nearest target for every point."""
    points = np.asarray(points, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(targets) < BRUTE_FORCE_BELOW and len(points) < BRUTE_FORCE_BELOW:
        d2 = ((points[:, None, :] - targets[None, :, :]) ** 2).sum(-1)
        idx = np.argmin(d2, axis=1)
        return idx, np.sqrt(d2[np.arange(len(points)), idx])
    dist, idx = cKDTree(targets).query(points)
    return idx, dist


@dataclass
class ICPResult:
    transform: SimilarityTransform
    residual: float
    converged: bool
    iterations: int
    history: list


def icp_register(source: Mesh, target: Mesh, max_iters: int = 100, tol: float = 1e-6,
                 init: SimilarityTransform | None = None) -> ICPResult:
    """Similarity ICP mapping ``source`` onto ``target``.

    ``history`` holds the RMS nearest-neighbour distance before the first
    solve and after every update; it never increases.
    """
    if len(source) == 0 or len(target) == 0:
        raise InvalidArgumentError("ICP needs non-empty meshes")
    src = source.vertices
    tgt = target.vertices
    tree = cKDTree(tgt)
    T = init or SimilarityTransform.identity()
    dist, idx = tree.query(T.apply(src))
    residual = float(np.sqrt(np.mean(dist**2)))
    history = [residual]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        T_new = solve_similarity(src, tgt[idx])
        dist_new, idx_new = tree.query(T_new.apply(src))
        res_new = float(np.sqrt(np.mean(dist_new**2)))
        if res_new > residual:  # round-off only; keep the better iterate
            converged = True
            break
        improvement = residual - res_new
        T, idx, residual = T_new, idx_new, res_new
        history.append(residual)
        if improvement < tol:
            converged = True
            break
    return ICPResult(T, residual, converged, it, history)


def prealign(source: Mesh, target: Mesh) -> SimilarityTransform:
    """Centroid and RMS-scale match, no rotation."""
    ms, mt = source.vertices.mean(0), target.vertices.mean(0)
    ss = np.sqrt(((source.vertices - ms) ** 2).sum(1).mean())
    st = np.sqrt(((target.vertices - mt) ** 2).sum(1).mean())
    s = st / ss
    return SimilarityTransform(s, np.eye(3), mt / s - ms)


def crop_front_face(mesh: Mesh, center_vertex: int, radius: float) -> Mesh:
    if not 0 <= center_vertex < len(mesh):
        raise InvalidArgumentError("center vertex out of range")
    if not radius > 0:
        raise InvalidArgumentError("crop radius must be positive")
    d = np.linalg.norm(mesh.vertices - mesh.vertices[center_vertex], axis=1)
    keep = d <= radius
    if not keep.any():
        raise EmptyCropError("crop keeps no vertex")
    remap = -np.ones(len(mesh), dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    f = mesh.triangles
    f = remap[f[np.all(keep[f], axis=1)]] if f.size else f
    normals = None if mesh.normals is None else np.asarray(mesh.normals)[keep]
    colors = None if mesh.colors is None else np.asarray(mesh.colors)[keep]
    return Mesh(mesh.vertices[keep], f, normals, colors)


def point_to_plane_distances(pred: Mesh, gt: Mesh) -> np.ndarray:
    """|n_c . (p - c)| for every pred vertex p and its nearest gt vertex c.

    Only gt vertices with a computable normal take part in the search.
    """
    normals = gt.vertex_normals()
    valid = np.linalg.norm(normals, axis=1) > 0.5
    if not valid.any():
        raise InvalidMeshError("ground-truth mesh has no computable normals")
    pts, nrm = gt.vertices[valid], normals[valid]
    idx, _ = nearest_neighbors(pred.vertices, pts)
    return np.abs(np.einsum("ij,ij->i", nrm[idx], pred.vertices - pts[idx]))


def point_to_plane_rmse(pred: Mesh, gt: Mesh) -> float:
    d = point_to_plane_distances(pred, gt)
    return float(np.sqrt(np.mean(d**2)))


# blue -> green -> yellow -> red at 0, 1/3, 2/3, 1 of the scale
RAMP_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
RAMP_COLORS = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def error_colors(errors, scale_max: float) -> np.ndarray:
    x = np.clip(np.asarray(errors, dtype=np.float64) / scale_max, 0.0, 1.0)
    return np.stack([np.interp(x, RAMP_STOPS, RAMP_COLORS[:, c]) for c in range(3)], axis=1)


def error_map(pred: Mesh, gt: Mesh, scale_max: float):
    """Per-vertex point-to-plane errors and ``pred`` colored by the error ramp."""
    if not scale_max > 0:
        raise InvalidArgumentError("scale_max must be positive")
    err = point_to_plane_distances(pred, gt)
    return err, Mesh(pred.vertices, pred.triangles, pred.normals, error_colors(err, scale_max))


@dataclass
class Evaluation:
    rmse: float
    icp_residual: float
    icp_converged: bool
    transform: SimilarityTransform
    registered: Mesh


def evaluate_meshes(pred: Mesh, gt: Mesh, center_vertex: int | None = None,
                    crop_radius: float = 95.0, register: bool = True,
                    max_iters: int = 100, tol: float = 1e-6) -> Evaluation:
    """Register ``pred`` to ``gt`` and score the cropped front face.

    The crop is centred on ``center_vertex`` of ``gt`` (default: the vertex
    nearest the camera, i.e. smallest z, the nose tip in the toy frame); the
    registered prediction is cropped around the same point.
    """
    if center_vertex is None:
        center_vertex = int(np.argmin(gt.vertices[:, 2]))
    gt_crop = crop_front_face(gt, center_vertex, crop_radius)
    if register:
        init = prealign(pred, gt)
        icp = icp_register(pred, gt, max_iters=max_iters, tol=tol, init=init)
        T, residual, converged = icp.transform, icp.residual, icp.converged
    else:
        T, residual, converged = SimilarityTransform.identity(), 0.0, True
    reg = pred.transformed(T)
    c = gt.vertices[center_vertex]
    keep = np.linalg.norm(reg.vertices - c, axis=1) <= crop_radius
    if not keep.any():
        raise EmptyCropError("registered prediction has no vertex inside the crop")
    pred_crop = Mesh(reg.vertices[keep])
    return Evaluation(point_to_plane_rmse(pred_crop, gt_crop), residual, converged, T, reg)
