"""Linear 3D morphable model: data container, evaluation and a synthetic toy model.

Shapes are stored flattened as ``[x0, y0, z0, x1, y1, z1, ...]`` (length 3V),
matching the usual 3DMM layout.  The toy model frame has +x to the image
right, +y up and the face looking down -z, toward a camera at the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import InvalidArgumentError

N_CLASSES = 10
K_ID, K_EXP, K_TEX = 80, 80, 64
N_LM2D, N_LM3D, N_ALIGN = 68, 101, 7

CLASS_NAMES = (
    "background",
    "face_skin",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "mouth",
    "upper_lip",
    "lower_lip",
)

# conventional 68-point numbering: nose 27-35, inner mouth 60-67
NOSE_LANDMARKS = tuple(range(27, 36))
INNER_MOUTH_LANDMARKS = tuple(range(60, 68))
# outer eye corners, inner eye corners, nose tip, mouth corners
ALIGN_FROM_68 = (36, 39, 42, 45, 30, 48, 54)


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray
    mean_texture: np.ndarray
    basis_id: np.ndarray
    basis_exp: np.ndarray
    basis_tex: np.ndarray
    triangles: np.ndarray
    region_labels: np.ndarray
    landmarks_68: np.ndarray
    landmarks_101: np.ndarray
    align_7: np.ndarray
    crop_center: int

    def __post_init__(self):
        n = self.n_vertices
        if self.mean_shape.shape != (3 * n,) or self.mean_texture.shape != (3 * n,):
            raise InvalidArgumentError("mean arrays must have length 3V")
        for name, basis, k in (
            ("basis_id", self.basis_id, K_ID),
            ("basis_exp", self.basis_exp, K_EXP),
            ("basis_tex", self.basis_tex, K_TEX),
        ):
            if basis.shape != (3 * n, k):
                raise InvalidArgumentError(f"{name} must be 3V x {k}, got {basis.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InvalidArgumentError("triangles must be F x 3")
        for name, idx, count in (
            ("landmarks_68", self.landmarks_68, N_LM2D),
            ("landmarks_101", self.landmarks_101, N_LM3D),
            ("align_7", self.align_7, N_ALIGN),
        ):
            if idx.shape != (count,):
                raise InvalidArgumentError(f"{name} must hold {count} indices")
        for idx in (self.triangles, self.landmarks_68, self.landmarks_101, self.align_7):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise InvalidArgumentError("vertex index out of range")
        if not 0 <= self.crop_center < n:
            raise InvalidArgumentError("crop_center out of range")
        if not set(self.align_7.tolist()) <= set(self.landmarks_101.tolist()):
            raise InvalidArgumentError("align_7 must be a subset of landmarks_101")
        if self.region_labels.shape != (n,) or self.region_labels.max(initial=0) >= N_CLASSES:
            raise InvalidArgumentError("region_labels must hold V class ids in [0, 9]")
        if self.mean_texture.min(initial=0) < 0 or self.mean_texture.max(initial=0) > 1:
            raise InvalidArgumentError("mean_texture must lie in [0, 1]")

    @property
    def n_vertices(self) -> int:
        return self.region_labels.shape[0]

    @property
    def align_positions(self) -> np.ndarray:
        """Positions of the alignment vertices inside ``landmarks_101``."""
        lm = self.landmarks_101.tolist()
        return np.array([lm.index(v) for v in self.align_7.tolist()], dtype=np.int64)

    def region_codes(self) -> np.ndarray:
        """One-hot region code per vertex, V x 10."""
        return np.eye(N_CLASSES)[self.region_labels]

    def bbox_diagonal(self) -> float:
        pts = self.mean_shape.reshape(-1, 3)
        return float(np.linalg.norm(pts.max(0) - pts.min(0)))


@dataclass
class FaceParams:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    poses: list = field(default_factory=list)

    @classmethod
    def zeros(cls, poses) -> "FaceParams":
        return cls(np.zeros(K_ID), np.zeros(K_EXP), np.zeros(K_TEX), list(poses))

    def copy(self) -> "FaceParams":
        return FaceParams(self.alpha.copy(), self.beta.copy(), self.gamma.copy(), list(self.poses))

    def check(self, model: MorphableModel, n_views: int | None = None):
        if self.alpha.shape != (model.basis_id.shape[1],):
            raise InvalidArgumentError("alpha length does not match basis_id")
        if self.beta.shape != (model.basis_exp.shape[1],):
            raise InvalidArgumentError("beta length does not match basis_exp")
        if self.gamma.shape != (model.basis_tex.shape[1],):
            raise InvalidArgumentError("gamma length does not match basis_tex")
        if n_views is not None and len(self.poses) != n_views:
            raise InvalidArgumentError(f"expected {n_views} poses, got {len(self.poses)}")


def evaluate_shape(model: MorphableModel, alpha, beta) -> np.ndarray:
    """Vertex positions (V x 3) for identity ``alpha`` and expression ``beta``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (model.basis_id.shape[1],) or beta.shape != (model.basis_exp.shape[1],):
        raise InvalidArgumentError(
            f"coefficient shapes {alpha.shape}, {beta.shape} do not match the model"
        )
    s = model.mean_shape + model.basis_id @ alpha + model.basis_exp @ beta
    return s.reshape(-1, 3)


def evaluate_texture(model: MorphableModel, gamma) -> np.ndarray:
    """Per-vertex RGB (V x 3), clamped to [0, 1]."""
    return np.clip(texture_unclamped(model, gamma), 0.0, 1.0)


def texture_unclamped(model: MorphableModel, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (model.basis_tex.shape[1],):
        raise InvalidArgumentError(f"gamma shape {gamma.shape} does not match the model")
    return (model.mean_texture + model.basis_tex @ gamma).reshape(-1, 3)


# ---------------------------------------------------------------------------
# synthetic toy model

_SEMI_AXES = (75.0, 95.0, 55.0)
_RIM = 0.93


def _ellipse(s, t, cs, ct, rs, rt):
    return ((s - cs) / rs) ** 2 + ((t - ct) / rt) ** 2 <= 1.0


def _paint_regions(s, t):
    r2 = s**2 + t**2
    lab = np.ones(s.shape, dtype=np.uint8)
    lab[_ellipse(s, t, 0.0, -0.03, 0.15, 0.30)] = 6
    lab[_ellipse(s, t, 0.38, 0.44, 0.22, 0.07)] = 2
    lab[_ellipse(s, t, -0.38, 0.44, 0.22, 0.07)] = 3
    lab[_ellipse(s, t, 0.38, 0.22, 0.16, 0.08)] = 4
    lab[_ellipse(s, t, -0.38, 0.22, 0.16, 0.08)] = 5
    lips = _ellipse(s, t, 0.0, -0.56, 0.32, 0.14)
    lab[lips & (t >= -0.56)] = 8
    lab[lips & (t < -0.56)] = 9
    lab[_ellipse(s, t, 0.0, -0.56, 0.22, 0.05)] = 7
    lab[r2 > _RIM**2] = 0
    return lab


_REGION_CENTERS = {
    0: (0.0, 0.97),
    1: (0.55, -0.1),
    2: (0.38, 0.44),
    3: (-0.38, 0.44),
    4: (0.38, 0.22),
    5: (-0.38, 0.22),
    6: (0.0, -0.05),
    7: (0.0, -0.56),
    8: (0.0, -0.47),
    9: (0.0, -0.65),
}


def _landmark_targets():
    """(s, t) targets for the 68 landmarks in conventional order, then 33 extras."""
    pts = []
    th = np.deg2rad(np.linspace(190, 350, 17))
    pts += list(zip(0.85 * np.cos(th), 0.85 * np.sin(th)))
    pts += [(x, 0.44 + 0.03 * (1 - ((x + 0.38) / 0.2) ** 2)) for x in np.linspace(-0.58, -0.18, 5)]
    pts += [(x, 0.44 + 0.03 * (1 - ((x - 0.38) / 0.2) ** 2)) for x in np.linspace(0.18, 0.58, 5)]
    pts += [(0.0, t) for t in np.linspace(0.22, -0.12, 4)]
    pts += [(x, -0.24) for x in np.linspace(-0.13, 0.13, 5)]
    for cs in (-0.38, 0.38):
        a = np.deg2rad([180, 120, 60, 0, -60, -120])
        pts += list(zip(cs + 0.16 * np.cos(a), 0.22 + 0.08 * np.sin(a)))
    a = np.deg2rad(np.arange(180, -180, -30))
    pts += list(zip(0.32 * np.cos(a), -0.56 + 0.14 * np.sin(a)))
    a = np.deg2rad(np.arange(180, -180, -45))
    pts += list(zip(0.22 * np.cos(a), -0.56 + 0.05 * np.sin(a)))
    # extras: forehead arc, cheeks, chin, temples
    th = np.deg2rad(np.linspace(30, 150, 11))
    pts += list(zip(0.7 * np.cos(th), 0.7 * np.sin(th)))
    for side in (-1, 1):
        pts += [(side * 0.6, t) for t in np.linspace(0.05, -0.45, 6)]
        pts += [(side * 0.2, 0.05), (side * 0.25, -0.25)]
    pts += [(0.0, -0.78), (-0.15, -0.82), (0.15, -0.82), (0.0, 0.58), (0.0, 0.35),
            (-0.12, -0.05)]
    assert len(pts) == N_LM3D, len(pts)
    return np.array(pts)


def _height(s, t):
    a, b, c = _SEMI_AXES
    r2 = s**2 + t**2
    z = -c * np.sqrt(1.0 - 0.75 * r2)
    z -= 11.0 * np.exp(-((s / 0.09) ** 2) - ((t - 0.05) / 0.22) ** 2)
    z -= 17.0 * np.exp(-((s / 0.12) ** 2) - ((t + 0.16) / 0.09) ** 2)
    for cs in (-0.38, 0.38):
        z += 5.0 * np.exp(-(((s - cs) / 0.15) ** 2) - ((t - 0.22) / 0.09) ** 2)
        z -= 3.0 * np.exp(-(((s - cs) / 0.22) ** 2) - ((t - 0.44) / 0.05) ** 2)
    z -= 5.0 * np.exp(-((s / 0.3) ** 2) - ((t + 0.56) / 0.12) ** 2)
    z -= 6.0 * np.exp(-((s / 0.25) ** 2) - ((t + 0.85) / 0.12) ** 2)
    return z


def _smoothing_operator(triangles, n):
    """Lazy neighbour-averaging operator 0.5 * (I + D^-1 A) on the mesh graph."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.unique(np.concatenate([e, e[:, ::-1]]), axis=0)
    adj = sparse.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (0.5 * sparse.identity(n) + 0.5 * sparse.diags(1.0 / deg) @ adj).tocsr()


def _similarity_directions(pts):
    """Orthonormal basis (3V x 7) of infinitesimal translations, rotations and scaling."""
    c = pts - pts.mean(0)
    n = len(pts)
    dirs = [np.tile(np.eye(3)[i], n) for i in range(3)]
    for axis in np.eye(3):
        dirs.append(np.cross(axis, c).reshape(-1))
    dirs.append(c.reshape(-1))
    q, _ = np.linalg.qr(np.stack(dirs, axis=1))
    return q


def _orthonormal_smooth(rng, op, n, k, iters, exclude=None):
    raw = rng.standard_normal((n, 3 * k))
    for _ in range(iters):
        raw = op @ raw
    # column j of the result is field j flattened vertex-major
    cols = raw.reshape(n, k, 3).transpose(0, 2, 1).reshape(3 * n, k)
    if exclude is not None:
        cols -= exclude @ (exclude.T @ cols)
    q, _ = np.linalg.qr(cols)
    return q


def _round_f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_toy_model(seed: int = 0, V_target: int = 1000) -> MorphableModel:
    """Deterministic synthetic face model standing in for a licensed 3DMM.

    The surface is an ellipsoid cap with a protruding nose, painted with the
    ten region classes.  Identity and expression bases are smoothed random
    fields, stripped of rigid and scaling motion (as a basis learned from
    Procrustes-aligned scans would be) and orthonormalized jointly; each column is scaled so that a
    coefficient of 3 displaces no vertex by more than 15% of the bounding-box
    diagonal.  Float data is rounded to float32 precision so the model survives
    a DFM1 round trip bit-exactly.
    """
    if V_target < 200:
        raise InvalidArgumentError(f"V_target must be >= 200, got {V_target}")
    rng = np.random.default_rng(seed)
    a, b, _ = _SEMI_AXES

    n = 2 * int(round(np.sqrt(V_target / (np.pi / 4)) / 2)) + 1  # odd: a column on s = 0
    g = np.linspace(-1.0, 1.0, n)
    S, T = np.meshgrid(g, g[::-1])  # row 0 is the top of the face
    keep = S**2 + T**2 <= 1.0
    vid = -np.ones((n, n), dtype=np.int64)
    vid[keep] = np.arange(keep.sum())
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            q = (vid[i, j], vid[i, j + 1], vid[i + 1, j + 1], vid[i + 1, j])
            ok = [v >= 0 for v in q]
            if all(ok):
                tris += [(q[0], q[3], q[1]), (q[1], q[3], q[2])]
            elif sum(ok) == 3:
                tris.append(tuple(v for v in (q[0], q[3], q[2], q[1]) if v >= 0))
    tris = np.array(tris, dtype=np.int64)
    used = np.unique(tris)
    remap = -np.ones(keep.sum(), dtype=np.int64)
    remap[used] = np.arange(used.size)
    tris = remap[tris]
    s = S[keep][used]
    t = T[keep][used]
    nv = s.size

    pts = np.stack([a * s, b * t, _height(s, t)], axis=1)
    labels = _paint_regions(s, t)
    for cls, (cs, ct) in _REGION_CENTERS.items():
        if not np.any(labels == cls):
            labels[np.argmin((s - cs) ** 2 + (t - ct) ** 2)] = cls

    base = np.empty((nv, 3))
    base[:] = (0.80, 0.62, 0.52)
    palette = {0: (0.45, 0.35, 0.30), 2: (0.22, 0.16, 0.12), 3: (0.22, 0.16, 0.12),
               4: (0.90, 0.90, 0.92), 5: (0.90, 0.90, 0.92), 6: (0.84, 0.60, 0.50),
               7: (0.30, 0.08, 0.10), 8: (0.74, 0.34, 0.38), 9: (0.70, 0.30, 0.34)}
    for cls, rgb in palette.items():
        base[labels == cls] = rgb
    for cs in (-0.38, 0.38):
        iris = _ellipse(s, t, cs, 0.22, 0.06, 0.06)
        base[iris] = (0.25, 0.30, 0.45)
    pattern = 0.06 * np.sin(7.0 * s + 1.3) * np.cos(6.0 * t) + 0.04 * np.cos(11.0 * t - 4.0 * s)
    base = np.clip(base + pattern[:, None] * np.array([1.0, 0.8, 0.7]), 0.02, 0.98)

    op = _smoothing_operator(tris, nv)
    diag = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    q = _orthonormal_smooth(rng, op, nv, K_ID + K_EXP, iters=25,
                             exclude=_similarity_directions(pts))
    decay = 1.0 / (1.0 + np.arange(K_ID + K_EXP) / 8.0)
    maxdisp = np.linalg.norm(q.reshape(nv, 3, -1), axis=1).max(0)
    shape_basis = q * (0.15 * diag * decay / (3.0 * maxdisp))
    qt = _orthonormal_smooth(rng, op, nv, K_TEX, iters=15)
    tdecay = 1.0 / (1.0 + np.arange(K_TEX) / 8.0)
    tmax = np.abs(qt).max(0)
    tex_basis = qt * (0.2 * tdecay / (3.0 * tmax))

    tgt = _landmark_targets()
    d2 = (s[None, :] - tgt[:, 0:1]) ** 2 + (t[None, :] - tgt[:, 1:2]) ** 2
    lm101 = np.argmin(d2, axis=1)
    lm68 = lm101[:N_LM2D].copy()
    align = lm68[list(ALIGN_FROM_68)].copy()
    crop_center = int(np.argmin(pts[:, 2]))

    return MorphableModel(
        mean_shape=_round_f32(pts.reshape(-1)),
        mean_texture=_round_f32(base.reshape(-1)),
        basis_id=_round_f32(shape_basis[:, :K_ID]),
        basis_exp=_round_f32(shape_basis[:, K_ID:]),
        basis_tex=_round_f32(tex_basis),
        triangles=tris,
        region_labels=labels,
        landmarks_68=lm68,
        landmarks_101=lm101,
        align_7=align,
        crop_center=crop_center,
    )
