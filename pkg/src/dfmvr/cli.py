"""Command-line entry points: gen-toy, fit, render, evaluate, errmap.

Fit settings come from defaults, then an optional ``key=value`` config file,
then command-line flags, each layer overriding the previous one.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .bundle import camera_from_dict, make_bundle, read_observation, rig_poses, write_bundle
from .camera import CameraIntrinsics
from .errors import InvalidArgumentError
from .fitter import FitConfig, staged_fit
from .losses import LossWeights
from .metrics import error_map, evaluate_meshes
from .morphable_model import FaceParams, evaluate_shape, evaluate_texture
from .render import rasterize

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
DEPTH_UNITS_PER_MM = 10  # 16-bit depth maps store tenths of a millimetre

_FIT_KEYS = {f.name: f for f in dataclasses.fields(FitConfig)
             if f.name not in ("weights", "stage_order")}
_WEIGHT_KEYS = {f.name: f for f in dataclasses.fields(LossWeights)
                if f.name != "landmark_pointwise"}
_CAMERA_KEYS = {f.name: f for f in dataclasses.fields(CameraIntrinsics)}


def _convert(f: dataclasses.Field, text: str):
    kind = type(f.default)
    if kind is bool:
        low = str(text).strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise InvalidArgumentError(f"{f.name}: expected a boolean, got {text!r}")
        return low in ("1", "true", "yes")
    try:
        return kind(text)
    except ValueError as exc:
        raise InvalidArgumentError(f"{f.name}: cannot parse {text!r}") from exc


@dataclass
class RunConfig:
    """Resolved overrides for one fit run; unknown keys are rejected."""

    fit: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    camera: dict = field(default_factory=dict)

    def update(self, values: dict, source: str):
        for key, text in values.items():
            if key in _FIT_KEYS:
                self.fit[key] = _convert(_FIT_KEYS[key], text)
            elif key in _WEIGHT_KEYS:
                self.weights[key] = _convert(_WEIGHT_KEYS[key], text)
            elif key in _CAMERA_KEYS:
                self.camera[key] = _convert(_CAMERA_KEYS[key], text)
            else:
                raise InvalidArgumentError(f"{source}: unknown key {key!r}")

    def fit_config(self) -> FitConfig:
        return FitConfig(weights=LossWeights(**self.weights), **self.fit)

    def camera_for(self, base: CameraIntrinsics) -> CameraIntrinsics:
        return dataclasses.replace(base, **self.camera)


def resolve_run_config(config_path=None, overrides=(), flags: dict | None = None) -> RunConfig:
    """Defaults < config file < ``--set key=value`` < dedicated flags."""
    rc = RunConfig()
    if config_path is not None:
        rc.update(io.read_keyvalue(config_path), str(config_path))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise InvalidArgumentError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    rc.update(pairs, "--set")
    rc.update({k: v for k, v in (flags or {}).items() if v is not None}, "flags")
    return rc


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InvalidArgumentError(f"{what} not found: {p}")
    return p


def _load_camera(obs_dir: Path | None, size: int | None = None) -> CameraIntrinsics:
    if obs_dir is not None and (obs_dir / "camera.txt").is_file():
        return camera_from_dict(io.read_keyvalue(obs_dir / "camera.txt"))
    return CameraIntrinsics.default(size or 128)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args) -> int:
    bundle = make_bundle(args.seed, args.vertices, args.size, args.views)
    write_bundle(args.out, bundle)
    print(f"wrote {bundle.obs.n_views}-view bundle to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    model = io.read_model(_need_file(args.model, "model"))
    obs_dir = Path(args.obs)
    if not obs_dir.is_dir():
        raise InvalidArgumentError(f"observation directory not found: {obs_dir}")
    if args.config is not None:
        _need_file(args.config, "config file")
    flags = {"iterations": args.iterations, "step_size": args.step_size, "seed": args.seed}
    if args.no_3d:
        flags["use_3d"] = "false"
    rc = resolve_run_config(args.config, args.set or (), flags)
    cfg = rc.fit_config()
    obs = read_observation(obs_dir, with_3d=cfg.use_3d)
    cam = rc.camera_for(_load_camera(obs_dir))
    if args.init is not None:
        init = io.read_params(_need_file(args.init, "initial parameters"))
    elif (obs_dir / "init_params.txt").is_file():
        init = io.read_params(obs_dir / "init_params.txt")
    else:
        init = FaceParams.zeros(rig_poses()[:obs.n_views])
    result = staged_fit(model, obs, cam, cfg, init)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = result.params
    io.write_params(out / "params.txt", p)
    io.write_obj(out / "fitted.obj", evaluate_shape(model, p.alpha, p.beta), model.triangles,
                 evaluate_texture(model, p.gamma))
    io.write_trace(out / "trace.csv", result.trace)
    first, best = result.trace[0]["L_all"], result.final_loss
    print(f"L_all initial={first:.6g} best={best:.6g} at iteration {result.best_iteration}")
    print(f"converged={int(result.converged)}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def render_params(model, params: FaceParams, view: int, cam: CameraIntrinsics):
    if not 0 <= view < len(params.poses):
        raise InvalidArgumentError(f"view index {view} outside 0..{len(params.poses) - 1}")
    shape = evaluate_shape(model, params.alpha, params.beta)
    colors = evaluate_texture(model, params.gamma)
    return rasterize(model, shape, colors, params.poses[view], cam)


def cmd_render(args) -> int:
    model = io.read_model(_need_file(args.model, "model"))
    params = io.read_params(_need_file(args.params, "parameter file"))
    if args.camera is not None:
        cam = camera_from_dict(io.read_keyvalue(_need_file(args.camera, "camera file")))
    else:
        cam = CameraIntrinsics.default(args.size)
    frame = render_params(model, params, args.view, cam)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_ppm(f"{prefix}.ppm", frame.color)
    io.write_pgm(f"{prefix}_coverage.pgm", frame.coverage.astype(np.uint16) * 65535, 65535)
    depth = np.where(frame.coverage, frame.depth, 0.0)
    depth = np.clip(np.round(depth * DEPTH_UNITS_PER_MM), 0, 65535).astype(np.uint16)
    io.write_pgm(f"{prefix}_depth.pgm", depth, 65535,
                 comment=f"depth units per mm: {DEPTH_UNITS_PER_MM}, 0 = empty")
    io.write_pgm(f"{prefix}_labels.pgm", frame.labels.astype(np.uint8))
    print(f"wrote {prefix}.ppm and coverage/depth/label maps")
    return EXIT_OK


def _evaluate(args):
    pred = io.read_mesh(_need_file(args.pred, "predicted mesh"))
    gt = io.read_mesh(_need_file(args.gt, "ground-truth mesh"))
    return evaluate_meshes(pred, gt, args.center_vertex, args.crop_radius,
                           register=not args.no_icp), gt


def _write_errmap(path, ev, gt, scale_max):
    _, colored = error_map(ev.registered, gt, scale_max)
    io.write_mesh(path, colored)


def cmd_evaluate(args) -> int:
    ev, gt = _evaluate(args)
    print(f"icp_residual={ev.icp_residual!r}")
    print(f"rmse_mm={ev.rmse!r}")
    if args.errmap is not None:
        _write_errmap(args.errmap, ev, gt, args.scale_max)
    return EXIT_OK


def cmd_errmap(args) -> int:
    ev, gt = _evaluate(args)
    _write_errmap(args.out, ev, gt, args.scale_max)
    print(f"rmse_mm={ev.rmse!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dfmvr", description="Multi-view 3DMM fitting toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="write a toy model and a synthetic multi-view bundle")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vertices", type=int, default=1500)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--views", type=int, default=3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_toy)

    f = sub.add_parser("fit", help="fit model parameters to an observation bundle")
    f.add_argument("--model", required=True)
    f.add_argument("--obs", required=True, help="bundle directory")
    f.add_argument("--out", required=True)
    f.add_argument("--init", help="initial parameter file (default: bundle init_params.txt)")
    f.add_argument("--config", help="key=value file with FitConfig/LossWeights/camera keys")
    f.add_argument("--set", action="append", metavar="KEY=VALUE")
    f.add_argument("--iterations", type=int)
    f.add_argument("--step-size", type=float)
    f.add_argument("--seed", type=int)
    f.add_argument("--no-3d", action="store_true", help="drop the 3D landmark term")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render one view of a parameter file")
    r.add_argument("--model", required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--camera", help="camera.txt (default: standard camera of --size)")
    r.add_argument("--size", type=int, default=128)
    r.add_argument("--out", required=True, help="output path prefix")
    r.set_defaults(func=cmd_render)

    for name, func, text in (("evaluate", cmd_evaluate, "register and score a mesh"),
                             ("errmap", cmd_errmap, "write an error-colored mesh")):
        e = sub.add_parser(name, help=text)
        e.add_argument("pred")
        e.add_argument("gt")
        e.add_argument("--crop-radius", type=float, default=95.0)
        e.add_argument("--center-vertex", type=int, help="gt crop centre (default: min z)")
        e.add_argument("--no-icp", action="store_true", help="score without registration")
        e.add_argument("--scale-max", type=float, default=5.0, help="error mapped to red (mm)")
        if name == "evaluate":
            e.add_argument("--errmap", help="also write the colored mesh here")
        else:
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
