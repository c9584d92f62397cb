"""Synthetic multi-view observation bundles rendered from known parameters."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .camera import CameraIntrinsics, ViewPose, project, to_camera
from .errors import InvalidArgumentError
from .fitter import Observation
from .morphable_model import (
    K_EXP,
    K_ID,
    K_TEX,
    FaceParams,
    MorphableModel,
    evaluate_shape,
    evaluate_texture,
    generate_toy_model,
)
from .render import RenderedFrame, rasterize

# nominal left / front / right capture rig
RIG_YAWS = (-0.45, 0.0, 0.45)
RIG_DISTANCE = 1000.0
COEF_STD = {"alpha": 0.6, "beta": 0.4, "gamma": 0.6}


def rig_poses(yaws=RIG_YAWS, distance: float = RIG_DISTANCE) -> list[ViewPose]:
    return [ViewPose(0.0, y, 0.0, 0.0, 0.0, distance) for y in yaws]


def random_params(rng: np.random.Generator, n_views: int = 3) -> FaceParams:
    """Coefficients around the mean face and poses jittered about the rig."""
    alpha = rng.normal(0.0, COEF_STD["alpha"], K_ID)
    beta = rng.normal(0.0, COEF_STD["beta"], K_EXP)
    gamma = rng.normal(0.0, COEF_STD["gamma"], K_TEX)
    poses = []
    for base in rig_poses()[:n_views]:
        ang = base.angles + rng.normal(0.0, np.deg2rad(3.0), 3)
        t = base.translation + rng.normal(0.0, [4.0, 4.0, 20.0])
        poses.append(ViewPose(*ang, *t))
    return FaceParams(alpha, beta, gamma, poses)


def render_views(model: MorphableModel, params: FaceParams,
                 cam: CameraIntrinsics) -> list[RenderedFrame]:
    shape = evaluate_shape(model, params.alpha, params.beta)
    colors = evaluate_texture(model, params.gamma)
    return [rasterize(model, shape, colors, p, cam) for p in params.poses]


def synthesize(model: MorphableModel, params: FaceParams, cam: CameraIntrinsics,
               with_3d: bool = True, quantize: bool = True) -> Observation:
    """Observation as a camera would see it: 8-bit images, hard masks, exact landmarks."""
    shape = evaluate_shape(model, params.alpha, params.beta)
    frames = render_views(model, params, cam)
    images = [io.to_uint8(f.color) / 255.0 if quantize else f.color for f in frames]
    lm2d = [project(to_camera(shape[model.landmarks_68], p), cam) for p in params.poses]
    lm3d = shape[model.landmarks_101].copy() if with_3d else None
    return Observation(images, [f.labels for f in frames], lm2d, lm3d)


@dataclass
class Bundle:
    model: MorphableModel
    obs: Observation
    cam: CameraIntrinsics
    gt: FaceParams
    init: FaceParams


def make_bundle(seed: int = 0, V: int = 1500, size: int = 128, n_views: int = 3) -> Bundle:
    ss = np.random.SeedSequence(seed)
    model_seed, param_seed = ss.spawn(2)
    model = generate_toy_model(int(model_seed.generate_state(1)[0]), V)
    cam = CameraIntrinsics.default(size)
    gt = random_params(np.random.default_rng(param_seed), n_views)
    obs = synthesize(model, gt, cam)
    init = FaceParams.zeros(rig_poses()[:n_views])
    return Bundle(model, obs, cam, gt, init)


def camera_dict(cam: CameraIntrinsics) -> dict:
    return {"focal": repr(cam.focal), "cx": repr(cam.cx), "cy": repr(cam.cy),
            "width": cam.width, "height": cam.height, "near": repr(cam.near)}


def camera_from_dict(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(float(d["focal"]), float(d["cx"]), float(d["cy"]),
                            int(d["width"]), int(d["height"]), float(d["near"]))


def write_bundle(out_dir, bundle: Bundle):
    """Directory layout read back by :func:`read_bundle`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_model(out / "model.dfm", bundle.model)
    io.write_keyvalue(out / "camera.txt", camera_dict(bundle.cam))
    for v in range(bundle.obs.n_views):
        io.write_ppm(out / f"view{v}.ppm", bundle.obs.images[v])
        io.write_pgm(out / f"mask{v}.pgm", bundle.obs.masks[v])
        io.write_points(out / f"landmarks2d_{v}.txt", bundle.obs.landmarks2d[v])
    if bundle.obs.landmarks3d is not None:
        io.write_points(out / "landmarks3d.txt", bundle.obs.landmarks3d)
    io.write_params(out / "gt_params.txt", bundle.gt)
    io.write_params(out / "init_params.txt", bundle.init)
    shape = evaluate_shape(bundle.model, bundle.gt.alpha, bundle.gt.beta)
    io.write_obj(out / "gt_mesh.obj", shape, bundle.model.triangles)


def read_observation(obs_dir, n_views: int | None = None, with_3d: bool = True) -> Observation:
    d = Path(obs_dir)
    if n_views is None:
        n_views = len(list(d.glob("view*.ppm")))
    if n_views == 0:
        raise InvalidArgumentError(f"{d}: no view images found")
    images, masks, lms = [], [], []
    for v in range(n_views):
        for kind, name in (("image", f"view{v}.ppm"), ("mask", f"mask{v}.pgm"),
                           ("2D landmark", f"landmarks2d_{v}.txt")):
            if not (d / name).is_file():
                raise InvalidArgumentError(f"view {v}: missing {kind} file {d / name}")
        images.append(io.read_ppm(d / f"view{v}.ppm"))
        masks.append(io.read_netpbm(d / f"mask{v}.pgm"))
        lms.append(io.read_points(d / f"landmarks2d_{v}.txt", 2))
    lm3d = None
    if with_3d and (d / "landmarks3d.txt").is_file():
        lm3d = io.read_points(d / "landmarks3d.txt", 3)
    return Observation(images, masks, lms, lm3d)
