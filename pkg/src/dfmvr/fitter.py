"""Analysis-by-synthesis fitting of morphable-model parameters to multi-view observations.

All coefficients and every view pose are packed into one flat vector and
optimised with Adam on the full weighted objective.  Translations are
optimised in units of ``FitConfig.translation_unit`` millimetres so that a
single step size suits angles, coefficients and positions.
"""
from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, ViewPose, pose_backward, project, project_backward, to_camera
from .errors import (
    BadInitializationError,
    BehindCameraError,
    EmptyOverlapError,
    FitAbortedError,
    InvalidArgumentError,
)
from .losses import (
    LossWeights,
    landmark2d_loss,
    landmark3d_loss,
    mask_loss,
    photo_loss,
    regularization_loss,
    total_loss,
)
from .masks import weight_map_for
from .morphable_model import FaceParams, MorphableModel, evaluate_shape, texture_unclamped
from .render import rasterize, rasterize_backward

log = logging.getLogger(__name__)

ALL_TERMS = ("photo", "mask", "lm2d", "lm3d", "reg")
LANDMARK_TERMS = ("lm2d", "lm3d")
TRACE_KEYS = {"photo": "L_p", "mask": "L_m", "lm2d": "L_2d", "lm3d": "L_3d", "reg": "L_reg"}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DFMVR_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Observation:
    images: list  # per view H x W x 3 in [0, 1]
    masks: list  # per view H x W class ids
    landmarks2d: list  # per view 68 x 2 pixels
    landmarks3d: np.ndarray | None = None  # 101 x 3, shared by the views

    def __post_init__(self):
        n = len(self.images)
        if not n or len(self.masks) != n or len(self.landmarks2d) != n:
            raise InvalidArgumentError("every view needs an image, a mask and 2D landmarks")
        shape = np.shape(self.images[0])
        for v in range(n):
            if np.shape(self.images[v]) != shape or np.shape(self.masks[v]) != shape[:2]:
                raise InvalidArgumentError(f"view {v}: inconsistent image or mask size")
            if np.shape(self.landmarks2d[v]) != (68, 2):
                raise InvalidArgumentError(f"view {v}: expected 68 2D landmarks")
        if self.landmarks3d is not None and np.shape(self.landmarks3d) != (101, 3):
            raise InvalidArgumentError("expected 101 3D landmarks")

    @property
    def n_views(self) -> int:
        return len(self.images)


@dataclass
class FitConfig:
    iterations: int = 400
    step_size: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    clip_norm: float = 10.0
    tol: float = 1e-2
    patience: int = 25
    seed: int = 0
    translation_unit: float = 100.0
    cosine_schedule: bool = True
    dilation_radius: int = 20
    use_3d: bool = True
    photo_excludes_background: bool = False
    pose_iterations: int = 200
    pose_step_size: float = 1e-2
    stage_order: tuple = ("pose", "full")

    def __post_init__(self):
        if self.iterations <= 0 or self.pose_iterations < 0:
            raise InvalidArgumentError("iterations must be positive")
        if not (self.step_size > 0 and self.pose_step_size > 0):
            raise InvalidArgumentError("step size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidArgumentError("moment decay rates must lie in (0, 1)")
        self.stage_order = tuple(self.stage_order)
        if sorted(self.stage_order) != ["full", "pose"]:
            raise InvalidArgumentError("stage_order must name the stages 'pose' and 'full'")


@dataclass
class FitResult:
    params: FaceParams
    trace: list
    converged: bool
    best_iteration: int
    stage_traces: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return min(row["L_all"] for row in self.trace)


# ---------------------------------------------------------------------------
# parameter packing


def pack(params: FaceParams, unit: float) -> np.ndarray:
    poses = [np.concatenate([p.angles, p.translation / unit]) for p in params.poses]
    return np.concatenate([params.alpha, params.beta, params.gamma, *poses])


def unpack(theta: np.ndarray, model: MorphableModel, n_views: int, unit: float) -> FaceParams:
    ka, kb, kg = (model.basis_id.shape[1], model.basis_exp.shape[1], model.basis_tex.shape[1])
    a, b, g = theta[:ka], theta[ka:ka + kb], theta[ka + kb:ka + kb + kg]
    off = ka + kb + kg
    poses = []
    for v in range(n_views):
        p = theta[off + 6 * v: off + 6 * v + 6]
        poses.append(ViewPose(*p[:3], *(p[3:] * unit)))
    return FaceParams(a.copy(), b.copy(), g.copy(), poses)


def pose_slice(model: MorphableModel) -> slice:
    return slice(model.basis_id.shape[1] + model.basis_exp.shape[1] + model.basis_tex.shape[1], None)


# ---------------------------------------------------------------------------
# objective


@dataclass
class Objective:
    """Precomputed per-observation data for repeated evaluation of the loss."""

    model: MorphableModel
    obs: Observation
    cam: CameraIntrinsics
    cfg: FitConfig
    terms: tuple = ALL_TERMS

    def __post_init__(self):
        self.weightmaps = [weight_map_for(m, self.cfg.dilation_radius) for m in self.obs.masks]
        self.photo_masks = self.obs.masks if self.cfg.photo_excludes_background else None
        self.use_3d = (self.cfg.use_3d and self.obs.landmarks3d is not None
                       and self.cfg.weights.w_3d > 0)
        _, self.coef = total_loss({}, self.cfg.weights, use_3d=self.use_3d)
        self.align = self.model.align_positions
        self.images = [np.asarray(im, dtype=np.float64) for im in self.obs.images]

    def _render_all(self, shape, colors, poses):
        def one(pose):
            return rasterize(self.model, shape, colors, pose, self.cam)

        workers = min(worker_count(), len(poses))
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                return list(ex.map(one, poses))
        return [one(p) for p in poses]

    def __call__(self, theta: np.ndarray, need_grad: bool = True):
        """Returns (components, L_all, gradient w.r.t. theta or None)."""
        model, cfg, unit = self.model, self.cfg, self.cfg.translation_unit
        params = unpack(theta, model, self.obs.n_views, unit)
        shape = evaluate_shape(model, params.alpha, params.beta)
        raw_tex = texture_unclamped(model, params.gamma)
        colors = np.clip(raw_tex, 0.0, 1.0)
        n_views = self.obs.n_views
        comp = {k: 0.0 for k in ALL_TERMS}
        d_shape = np.zeros_like(shape)
        d_colors = np.zeros_like(colors)
        d_pose = np.zeros((n_views, 6))
        d_reg = None

        def check(term, *arrays):
            if need_grad and not all(np.all(np.isfinite(a)) for a in arrays):
                raise FitAbortedError(term, -1)

        render_terms = [t for t in ("photo", "mask") if t in self.terms and self.coef[t] > 0]
        if render_terms:
            frames = self._render_all(shape, colors, params.poses)
            g_col = [np.zeros_like(f.color) for f in frames]
            g_cls = [None] * n_views
            if "photo" in render_terms:
                comp["photo"], g = photo_loss(self.images, frames, self.weightmaps,
                                              self.photo_masks)
                check("photo", *g)
                g_col = [self.coef["photo"] * x for x in g]
            if "mask" in render_terms:
                comp["mask"], g = mask_loss(self.obs.masks, [f.class_probs for f in frames])
                check("mask", *g)
                g_cls = [self.coef["mask"] * x for x in g]
            if need_grad:
                for v, f in enumerate(frames):
                    rg = rasterize_backward(f, g_col[v], g_cls[v])
                    d_shape += rg.points
                    d_colors += rg.colors
                    d_pose[v] += rg.pose

        if "lm2d" in self.terms and self.coef["lm2d"] > 0:
            lm = model.landmarks_68
            pts = shape[lm]
            cams = [to_camera(pts, p) for p in params.poses]
            pred = [project(c, self.cam) for c in cams]
            comp["lm2d"], g = landmark2d_loss(self.obs.landmarks2d, pred,
                                              cfg.weights.landmark_pointwise)
            check("lm2d", *g)
            if need_grad:
                for v in range(n_views):
                    d_cam = project_backward(cams[v], self.cam, self.coef["lm2d"] * g[v])
                    d_pts, dp = pose_backward(pts, params.poses[v], d_cam)
                    np.add.at(d_shape, lm, d_pts)
                    d_pose[v] += dp

        if "lm3d" in self.terms and self.use_3d:
            lm = model.landmarks_101
            comp["lm3d"], g, _ = landmark3d_loss(self.obs.landmarks3d, shape[lm], self.align)
            check("lm3d", g)
            if need_grad:
                np.add.at(d_shape, lm, self.coef["lm3d"] * g)

        if "reg" in self.terms:
            comp["reg"], d_reg = regularization_loss(params, cfg.weights)

        value = math.fsum(self.coef[k] * comp[k] for k in ALL_TERMS if k in self.terms)
        if not need_grad:
            return comp, value, None

        flat = d_shape.reshape(-1)
        live = (raw_tex >= 0.0) & (raw_tex <= 1.0)
        grad = np.concatenate([
            model.basis_id.T @ flat,
            model.basis_exp.T @ flat,
            model.basis_tex.T @ (d_colors * live).reshape(-1),
            (d_pose * np.array([1, 1, 1, unit, unit, unit])).reshape(-1),
        ])
        if d_reg is not None:
            ka, kb, kg = len(params.alpha), len(params.beta), len(params.gamma)
            grad[:ka] += self.coef["reg"] * d_reg["alpha"]
            grad[ka:ka + kb] += self.coef["reg"] * d_reg["beta"]
            grad[ka + kb:ka + kb + kg] += self.coef["reg"] * d_reg["gamma"]
        return comp, value, grad


# ---------------------------------------------------------------------------
# optimisation


def _adam(objective: Objective, theta0: np.ndarray, cfg: FitConfig, iterations: int,
          step_size: float, free: np.ndarray | None = None):
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace = []
    best_theta, best_val, best_it = theta.copy(), np.inf, -1
    converged = False
    for it in range(iterations):
        try:
            comp, val, grad = objective(theta)
        except (EmptyOverlapError, BehindCameraError) as exc:
            if it == 0:
                raise BadInitializationError(f"initial parameters are unusable: {exc}") from exc
            log.warning("stopping at iteration %d: %s", it, exc)
            break
        except FitAbortedError as exc:
            raise FitAbortedError(exc.term, it) from None
        row = {"iteration": it, **{TRACE_KEYS[k]: comp[k] for k in ALL_TERMS}, "L_all": val}
        trace.append(row)
        if val < best_val:
            best_theta, best_val, best_it = theta.copy(), val, it
        if free is not None:
            grad = grad * free
        norm = np.linalg.norm(grad)
        if norm > cfg.clip_norm:
            grad = grad * (cfg.clip_norm / norm)
        t = it + 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad**2
        lr = step_size
        if cfg.cosine_schedule:
            lr = step_size * 0.5 * (1 + np.cos(np.pi * it / iterations))
        theta = theta - lr * (m / (1 - cfg.beta1**t)) / (np.sqrt(v / (1 - cfg.beta2**t)) + 1e-8)
    else:
        # converged: the last `patience` iterations improved the best loss by < tol (relative)
        if len(trace) > cfg.patience:
            before = min(r["L_all"] for r in trace[:-cfg.patience])
            converged = before - best_val <= cfg.tol * max(abs(best_val), 1e-12)
    return best_theta, trace, converged, best_it


def fit(model: MorphableModel, obs: Observation, cam: CameraIntrinsics,
        cfg: FitConfig | None = None, init: FaceParams | None = None) -> FitResult:
    """Adam on every coefficient and view pose against the full weighted loss.

    Returns the iterate with the lowest recorded loss and the per-iteration
    trace of every loss term.
    """
    cfg = cfg or FitConfig()
    if init is None:
        raise InvalidArgumentError("fit needs initial parameters with one pose per view")
    init.check(model, obs.n_views)
    objective = Objective(model, obs, cam, cfg)
    theta, trace, converged, best = _adam(objective, pack(init, cfg.translation_unit), cfg,
                                          cfg.iterations, cfg.step_size)
    params = unpack(theta, model, obs.n_views, cfg.translation_unit)
    return FitResult(params, trace, converged, best, {"full": trace})


def fit_poses(model: MorphableModel, obs: Observation, cam: CameraIntrinsics,
              cfg: FitConfig, init: FaceParams) -> FitResult:
    """Landmark-only optimisation of the view poses; coefficients stay fixed."""
    init.check(model, obs.n_views)
    objective = Objective(model, obs, cam, cfg, terms=LANDMARK_TERMS)
    theta0 = pack(init, cfg.translation_unit)
    free = np.zeros_like(theta0)
    free[pose_slice(model)] = 1.0
    theta, trace, converged, best = _adam(objective, theta0, cfg, cfg.pose_iterations,
                                          cfg.pose_step_size, free=free)
    params = unpack(theta, model, obs.n_views, cfg.translation_unit)
    return FitResult(params, trace, converged, best, {"pose": trace})


def staged_fit(model: MorphableModel, obs: Observation, cam: CameraIntrinsics,
               cfg: FitConfig | None = None, init: FaceParams | None = None) -> FitResult:
    """Pose-only landmark alignment followed by the full fit.

    The returned trace is the full-objective stage; ``stage_traces`` keeps both.
    """
    cfg = cfg or FitConfig()
    if init is None:
        raise InvalidArgumentError("staged_fit needs initial parameters")
    if cfg.stage_order != ("pose", "full"):
        warnings.warn("stage order differs from ('pose', 'full'); running as configured",
                      stacklevel=2)
    params = init
    stages = {}
    result = None
    for stage in cfg.stage_order:
        if stage == "pose":
            if cfg.pose_iterations == 0:
                continue
            r = fit_poses(model, obs, cam, cfg, params)
        else:
            r = fit(model, obs, cam, cfg, params)
            result = r
        stages[stage] = r.trace
        params = r.params
    result.params = params
    result.stage_traces = stages
    return result
