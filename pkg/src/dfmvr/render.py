"""Z-buffered triangle rasterizer with attribution-based analytic gradients.

Pixel (row r, col c) samples the image point (c + 0.5, r + 0.5).  Colors and
region probabilities are screen-space barycentric blends of vertex values.
Gradients hold each pixel's front-most triangle fixed; coverage changes and
occlusion boundaries contribute nothing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    CameraIntrinsics,
    ViewPose,
    pose_backward,
    project,
    project_backward,
    to_camera,
)
from .errors import InvalidArgumentError
from .morphable_model import N_CLASSES, MorphableModel

DEGENERATE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    color: np.ndarray  # H x W x 3
    coverage: np.ndarray  # H x W bool
    class_probs: np.ndarray  # H x W x 10
    tri_id: np.ndarray  # H x W, -1 where uncovered
    bary: np.ndarray  # H x W x 3, zero where uncovered
    depth: np.ndarray  # H x W, 0 where uncovered
    n_degenerate: int = 0
    # retained for the backward pass
    triangles: np.ndarray = field(default=None, repr=False)
    points: np.ndarray = field(default=None, repr=False)
    cam_points: np.ndarray = field(default=None, repr=False)
    uv: np.ndarray = field(default=None, repr=False)
    colors: np.ndarray = field(default=None, repr=False)
    codes: np.ndarray = field(default=None, repr=False)
    pose: ViewPose = None
    cam: CameraIntrinsics = None

    @property
    def labels(self) -> np.ndarray:
        """Hard label image: argmax of the class probabilities."""
        return np.argmax(self.class_probs, axis=-1).astype(np.uint8)


@dataclass
class RenderGradients:
    points: np.ndarray  # V x 3, model space
    colors: np.ndarray  # V x 3
    pose: np.ndarray  # (pitch, yaw, roll, tx, ty, tz)
    codes: np.ndarray  # V x 10


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def rasterize_mesh(points, triangles, colors, codes, pose: ViewPose, cam: CameraIntrinsics):
    """Render arbitrary per-vertex attributes; :func:`rasterize` wraps this for a model."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if colors.shape[0] != points.shape[0] or codes.shape[0] != points.shape[0]:
        raise InvalidArgumentError("per-vertex attribute counts do not match the vertices")
    H, W = cam.height, cam.width
    cam_pts = to_camera(points, pose)
    used = np.unique(triangles)
    uv = np.zeros((points.shape[0], 2))
    if used.size:
        uv[used] = project(cam_pts[used], cam)

    color = np.zeros((H, W, 3))
    class_probs = np.zeros((H, W, N_CLASSES))
    class_probs[..., 0] = 1.0
    tri_id = -np.ones((H, W), dtype=np.int64)
    bary = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    frame_kw = dict(triangles=triangles, points=points, cam_points=cam_pts, uv=uv,
                    colors=colors, codes=codes, pose=pose, cam=cam)

    n_degenerate = 0
    if triangles.shape[0]:
        p = uv[triangles]  # F x 3 x 2
        area2 = _cross(p[:, 1, 0] - p[:, 0, 0], p[:, 1, 1] - p[:, 0, 1],
                       p[:, 2, 0] - p[:, 0, 0], p[:, 2, 1] - p[:, 0, 1])
        degenerate = 0.5 * np.abs(area2) < DEGENERATE_AREA
        n_degenerate = int(degenerate.sum())
        lo = np.ceil(p.min(axis=1) - 0.5).astype(np.int64)
        hi = np.floor(p.max(axis=1) - 0.5).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [W - 1, H - 1])
        span = np.maximum(hi - lo + 1, 0)
        counts = span[:, 0] * span[:, 1]
        counts[degenerate] = 0
        total = int(counts.sum())
        if total:
            tri = np.repeat(np.arange(len(triangles)), counts)
            starts = np.cumsum(counts) - counts
            off = np.arange(total) - np.repeat(starts, counts)
            wspan = span[tri, 0]
            px = lo[tri, 0] + off % wspan
            py = lo[tri, 1] + off // wspan
            qx, qy = px + 0.5, py + 0.5
            tp = p[tri]
            e = np.stack([
                _cross(tp[:, 1, 0] - qx, tp[:, 1, 1] - qy, tp[:, 2, 0] - qx, tp[:, 2, 1] - qy),
                _cross(tp[:, 2, 0] - qx, tp[:, 2, 1] - qy, tp[:, 0, 0] - qx, tp[:, 0, 1] - qy),
                _cross(tp[:, 0, 0] - qx, tp[:, 0, 1] - qy, tp[:, 1, 0] - qx, tp[:, 1, 1] - qy),
            ], axis=1)
            sgn = np.sign(area2[tri])[:, None]
            inside = np.all(e * sgn >= 0, axis=1)
            tri, px, py, e = tri[inside], px[inside], py[inside], e[inside]
            b = e / area2[tri][:, None]
            z = np.einsum("nk,nk->n", b, cam_pts[triangles[tri], 2])
            pix = py * W + px
            order = np.lexsort((tri, z, pix))
            first = np.ones(order.size, dtype=bool)
            first[1:] = pix[order][1:] != pix[order][:-1]
            win = order[first]
            pix, tri, b, z = pix[win], tri[win], b[win], z[win]
            r, c = np.divmod(pix, W)
            verts = triangles[tri]
            tri_id[r, c] = tri
            bary[r, c] = b
            depth[r, c] = z
            color[r, c] = np.einsum("nk,nkc->nc", b, colors[verts])
            class_probs[r, c] = np.einsum("nk,nkc->nc", b, codes[verts])

    return RenderedFrame(color, tri_id >= 0, class_probs, tri_id, bary, depth,
                         n_degenerate, **frame_kw)


def rasterize(model: MorphableModel, shape, colors, pose: ViewPose,
              cam: CameraIntrinsics) -> RenderedFrame:
    shape = np.asarray(shape, dtype=np.float64).reshape(-1, 3)
    if shape.shape[0] != model.n_vertices:
        raise InvalidArgumentError("shape does not match the model vertex count")
    return rasterize_mesh(shape, model.triangles, colors, model.region_codes(), pose, cam)


def _bary_jacobian(p, q):
    """d b_k / d p_j for pixel centers ``q`` (N x 2) in triangles ``p`` (N x 3 x 2).

    Returns N x 3 (k) x 3 (j) x 2.
    """
    n = p.shape[0]
    d = p - q[:, None, :]  # vertex offsets from the pixel center
    dE = np.zeros((n, 3, 3, 2))
    for k in range(3):
        j1, j2 = (k + 1) % 3, (k + 2) % 3
        # E_k = cross(d_j1, d_j2)
        dE[:, k, j1, 0] = d[:, j2, 1]
        dE[:, k, j1, 1] = -d[:, j2, 0]
        dE[:, k, j2, 0] = -d[:, j1, 1]
        dE[:, k, j2, 1] = d[:, j1, 0]
    E = np.stack([_cross(d[:, (k + 1) % 3, 0], d[:, (k + 1) % 3, 1],
                         d[:, (k + 2) % 3, 0], d[:, (k + 2) % 3, 1]) for k in range(3)], axis=1)
    A = E.sum(axis=1)
    dA = dE.sum(axis=1)  # N x 3 x 2
    return (dE * A[:, None, None, None] - E[:, :, None, None] * dA[:, None]) / A[:, None, None, None] ** 2


def rasterize_backward(frame: RenderedFrame, d_color, d_class=None) -> RenderGradients:
    """Gradients of a scalar through the frame's color and class outputs."""
    nv = frame.points.shape[0]
    d_color = np.asarray(d_color, dtype=np.float64)
    r, c = np.nonzero(frame.coverage)
    tri = frame.tri_id[r, c]
    verts = frame.triangles[tri]
    b = frame.bary[r, c]
    gc = d_color[r, c]
    d_b = np.einsum("nc,nkc->nk", gc, frame.colors[verts])
    d_colors = np.zeros((nv, 3))
    np.add.at(d_colors, verts.ravel(), (b[:, :, None] * gc[:, None, :]).reshape(-1, 3))
    d_codes = np.zeros((nv, N_CLASSES))
    if d_class is not None:
        gk = np.asarray(d_class, dtype=np.float64)[r, c]
        d_b += np.einsum("nc,nkc->nk", gk, frame.codes[verts])
        np.add.at(d_codes, verts.ravel(), (b[:, :, None] * gk[:, None, :]).reshape(-1, N_CLASSES))

    q = np.stack([c + 0.5, r + 0.5], axis=1)
    J = _bary_jacobian(frame.uv[verts], q)
    d_p = np.einsum("nk,nkjd->njd", d_b, J)
    d_uv = np.zeros((nv, 2))
    np.add.at(d_uv, verts.ravel(), d_p.reshape(-1, 2))
    d_cam = np.zeros((nv, 3))
    front = frame.cam_points[:, 2] > frame.cam.near  # vertices outside any triangle may sit behind
    d_cam[front] = project_backward(frame.cam_points[front], frame.cam, d_uv[front])
    d_points, d_pose = pose_backward(frame.points, frame.pose, d_cam)
    return RenderGradients(d_points, d_colors, d_pose, d_codes)
