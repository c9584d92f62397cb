import dataclasses
import warnings

import numpy as np
import pytest

from dfmvr.bundle import make_bundle, synthesize
from dfmvr.camera import ViewPose
from dfmvr.errors import BadInitializationError, InvalidArgumentError
from dfmvr.fitter import (
    FitConfig,
    Objective,
    Observation,
    fit,
    fit_poses,
    pack,
    staged_fit,
    unpack,
)
from dfmvr.losses import LossWeights, landmark3d_loss
from dfmvr.morphable_model import FaceParams, evaluate_shape


def quick(**kw):
    return FitConfig(**{"iterations": 30, "pose_iterations": 20, **kw})


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        FitConfig(iterations=0)
    with pytest.raises(InvalidArgumentError):
        FitConfig(step_size=0)
    with pytest.raises(InvalidArgumentError):
        FitConfig(beta1=1.0)
    with pytest.raises(InvalidArgumentError):
        FitConfig(stage_order=("pose", "pose"))


def test_observation_validation(small_bundle):
    obs = small_bundle.obs
    with pytest.raises(InvalidArgumentError):
        Observation(obs.images, obs.masks[:2], obs.landmarks2d)
    with pytest.raises(InvalidArgumentError):
        Observation(obs.images, obs.masks, [lm[:60] for lm in obs.landmarks2d])


def test_pack_round_trip(small_bundle):
    p = small_bundle.gt
    q = unpack(pack(p, 100.0), small_bundle.model, 3, 100.0)
    assert np.allclose(q.alpha, p.alpha) and np.allclose(q.gamma, p.gamma)
    assert all(np.allclose(a.as_vector(), b.as_vector()) for a, b in zip(p.poses, q.poses))


def test_fixed_point(small_bundle):
    b = small_bundle
    obs = synthesize(b.model, b.init, b.cam, quantize=False)
    real = Objective(b.model, b.obs, b.cam, FitConfig())(pack(b.init, 100.0), False)[1]
    res = fit(b.model, obs, b.cam, FitConfig(iterations=50), b.init)
    row = res.trace[0]
    assert row["L_p"] == 0 and row["L_2d"] == 0 and row["L_reg"] == 0 and row["L_3d"] < 1e-9
    # only the mask term is left: soft interpolated labels at region borders
    assert row["L_all"] < 0.05 * real
    moved = np.linalg.norm(pack(res.params, 1.0) - pack(b.init, 1.0))
    assert moved < 1e-3


def test_determinism(small_bundle):
    b = small_bundle
    r1 = staged_fit(b.model, b.obs, b.cam, quick(), b.init)
    r2 = staged_fit(b.model, b.obs, b.cam, quick(), b.init)
    assert r1.trace == r2.trace
    assert np.array_equal(pack(r1.params, 1.0), pack(r2.params, 1.0))


def test_best_iterate_is_returned(small_bundle):
    b = small_bundle
    r = fit(b.model, b.obs, b.cam, quick(step_size=0.2), b.init)
    best = min(row["L_all"] for row in r.trace)
    assert r.trace[r.best_iteration]["L_all"] == best == r.final_loss
    obj = Objective(b.model, b.obs, b.cam, quick())
    assert obj(pack(r.params, 100.0), False)[1] == best


def test_best_loss_monotone_in_budget(small_bundle):
    b = small_bundle
    finals = [fit(b.model, b.obs, b.cam, quick(iterations=n, cosine_schedule=False), b.init).final_loss
              for n in (5, 15, 30)]
    assert finals[0] >= finals[1] >= finals[2]


def test_w3d_zero_ignores_3d_landmarks(small_bundle):
    b = small_bundle
    cfg = quick(weights=LossWeights(w_3d=0.0))
    with_3d = fit(b.model, b.obs, b.cam, cfg, b.init)
    no_3d = fit(b.model, dataclasses.replace(b.obs, landmarks3d=None), b.cam, cfg, b.init)
    assert with_3d.trace == no_3d.trace
    assert all(row["L_3d"] == 0 for row in with_3d.trace)


def _probe_theta(obj, cfg, b):
    rng = np.random.default_rng(0)
    theta = pack(b.init, cfg.translation_unit)
    theta[:224] += rng.normal(0, 0.3, 224)
    return theta, rng.choice(len(theta), 10, replace=False)


def test_pipeline_gradient_matches_finite_differences():
    # every term that is differentiated end to end: photo, mask, 2D landmarks, reg
    b = make_bundle(seed=4, V=600, size=32)
    cfg = FitConfig(use_3d=False)
    obj = Objective(b.model, b.obs, b.cam, cfg)
    theta, coords = _probe_theta(obj, cfg, b)
    _, _, grad = obj(theta)
    h = 1e-6
    for k in coords:
        e = np.zeros_like(theta)
        e[k] = h
        num = (obj(theta + e, False)[1] - obj(theta - e, False)[1]) / (2 * h)
        assert abs(num - grad[k]) <= 1e-2 * max(abs(num), abs(grad[k]), 1e-3), k


def test_pipeline_3d_term_uses_frozen_alignment():
    # the 3D landmark gradient holds the similarity solve fixed, so it must
    # match finite differences of the loss with the transform frozen
    b = make_bundle(seed=4, V=600, size=32)
    cfg = FitConfig()
    obj = Objective(b.model, b.obs, b.cam, cfg, terms=("lm3d",))
    theta, coords = _probe_theta(obj, cfg, b)
    _, _, grad = obj(theta)
    m = b.model
    p0 = unpack(theta, m, 3, cfg.translation_unit)
    pred0 = evaluate_shape(m, p0.alpha, p0.beta)[m.landmarks_101]
    _, _, T = landmark3d_loss(b.obs.landmarks3d, pred0, m.align_positions)

    def frozen(th):
        p = unpack(th, m, 3, cfg.translation_unit)
        pred = evaluate_shape(m, p.alpha, p.beta)[m.landmarks_101]
        return cfg.weights.w_3d * np.linalg.norm(T.apply(pred) - b.obs.landmarks3d, axis=1).mean()

    h = 1e-6
    for k in coords:
        e = np.zeros_like(theta)
        e[k] = h
        num = (frozen(theta + e) - frozen(theta - e)) / (2 * h)
        assert abs(num - grad[k]) <= 1e-4 * max(abs(num), abs(grad[k]), 1e-6), k


def test_pose_stage_recovers_perturbed_poses():
    b = make_bundle(seed=6, V=1000, size=96)
    rng = np.random.default_rng(1)
    init = b.gt.copy()
    init.poses = [ViewPose(*(p.angles + rng.normal(0, np.deg2rad(4), 3)),
                           *(p.translation + rng.normal(0, [8, 8, 40])))
                  for p in b.gt.poses]
    r = fit_poses(b.model, b.obs, b.cam, FitConfig(pose_iterations=300), init)
    for got, want in zip(r.params.poses, b.gt.poses):
        assert np.max(np.abs(np.rad2deg(got.angles - want.angles))) < 0.5
        assert np.linalg.norm(got.translation - want.translation) < 0.01 * np.linalg.norm(want.translation)
    # coefficients stay frozen
    assert np.array_equal(r.params.alpha, init.alpha)


def test_swapped_stages_warn(small_bundle):
    b = small_bundle
    with pytest.warns(UserWarning, match="stage order"):
        r = staged_fit(b.model, b.obs, b.cam, quick(stage_order=("full", "pose")), b.init)
    assert set(r.stage_traces) == {"pose", "full"}


def test_default_order_is_silent(small_bundle):
    b = small_bundle
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        staged_fit(b.model, b.obs, b.cam, quick(), b.init)


def test_bad_initialization(small_bundle):
    b = small_bundle
    away = FaceParams.zeros([ViewPose(0, 0, 0, 5000, 0, 1000)] * 3)
    with pytest.raises(BadInitializationError):
        fit(b.model, b.obs, b.cam, quick(), away)
    behind = FaceParams.zeros([ViewPose(0, 0, 0, 0, 0, -1000)] * 3)
    with pytest.raises(BadInitializationError):
        fit(b.model, b.obs, b.cam, quick(), behind)


def test_threads_do_not_change_results(small_bundle, monkeypatch):
    b = small_bundle
    r1 = fit(b.model, b.obs, b.cam, quick(iterations=5), b.init)
    monkeypatch.setenv("DFMVR_THREADS", "3")
    r3 = fit(b.model, b.obs, b.cam, quick(iterations=5), b.init)
    assert r1.trace == r3.trace


@pytest.mark.slow
def test_staged_not_worse_than_plain():
    b = make_bundle(seed=0)
    cfg = FitConfig()
    staged = staged_fit(b.model, b.obs, b.cam, cfg, b.init)
    plain = fit(b.model, b.obs, b.cam, cfg, b.init)
    assert staged.final_loss <= plain.final_loss
