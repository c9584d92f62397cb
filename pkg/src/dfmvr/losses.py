"""Weakly supervised reconstruction losses and their analytic gradients.

Every loss returns ``(value, gradient)``; gradients are w.r.t. the
differentiable input named in each docstring.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import EmptyOverlapError, InvalidArgumentError
from .masks import one_hot
from .morphable_model import INNER_MOUTH_LANDMARKS, N_LM2D, NOSE_LANDMARKS
from .similarity import SimilarityTransform, solve_similarity

EPS = 1e-7
HEAVY_LANDMARK_WEIGHT = 20.0


def default_landmark_weights(heavy=NOSE_LANDMARKS + INNER_MOUTH_LANDMARKS) -> np.ndarray:
    w = np.ones(N_LM2D)
    w[list(heavy)] = HEAVY_LANDMARK_WEIGHT
    return w


@dataclass
class LossWeights:
    w_p: float = 4.0
    w_m: float = 3.0
    w_l: float = 1.0
    w_reg: float = 3.0e-4
    w_2d: float = 0.02
    w_3d: float = 1.0
    w_alpha: float = 1.0
    w_beta: float = 0.8
    w_gamma: float = 0.017
    landmark_pointwise: np.ndarray = field(default_factory=default_landmark_weights)

    def __post_init__(self):
        self.landmark_pointwise = np.asarray(self.landmark_pointwise, dtype=np.float64)
        for f in fields(self):
            if np.any(np.asarray(getattr(self, f.name)) < 0):
                raise InvalidArgumentError(f"loss weight {f.name} must be >= 0")


def photo_loss(originals, renders, weightmaps, masks=None):
    """Weight-map-normalised mean RGB distance over the render/image overlap.

    The overlap of a view is the render coverage, further restricted to
    non-background pixels of ``masks`` when those are given.  Returns the
    loss and per-view gradients w.r.t. the rendered colors.
    """
    if not (len(originals) == len(renders) == len(weightmaps)):
        raise InvalidArgumentError("view counts differ")
    n = len(renders)
    total = 0.0
    grads = []
    for v in range(n):
        img = np.asarray(originals[v], dtype=np.float64)
        rend = renders[v].color
        wmap = np.asarray(weightmaps[v], dtype=np.float64)
        if img.shape != rend.shape or wmap.shape != rend.shape[:2]:
            raise InvalidArgumentError(f"image sizes differ in view {v}")
        region = renders[v].coverage.copy()
        if masks is not None:
            region &= np.asarray(masks[v]) != 0
        if not region.any():
            raise EmptyOverlapError(v)
        diff = rend[region] - img[region]
        dist = np.linalg.norm(diff, axis=1)
        w = wmap[region]
        den = w.sum()
        total += (w * dist).sum() / den
        g = np.zeros_like(rend)
        safe = dist > 0
        scale = np.zeros_like(dist)
        scale[safe] = w[safe] / (dist[safe] * den * n)
        g[region] = diff * scale[:, None]
        grads.append(g)
    return total / n, grads


def mask_loss(true_masks, pred_probs, eps: float = EPS):
    """Per-class binary cross-entropy summed over classes, averaged over pixels and views.

    Returns the loss and per-view gradients w.r.t. the predicted probabilities;
    the gradient vanishes where a probability was clamped.
    """
    if len(true_masks) != len(pred_probs):
        raise InvalidArgumentError("view counts differ")
    n = len(pred_probs)
    total = 0.0
    grads = []
    for v in range(n):
        y = one_hot(true_masks[v]).astype(np.float64)
        p = np.asarray(pred_probs[v], dtype=np.float64)
        if p.shape != y.shape:
            raise InvalidArgumentError(f"probability map shape {p.shape} != {y.shape}")
        if p.min() < -1e-9 or p.max() > 1 + 1e-9:
            raise InvalidArgumentError("probabilities must lie in [0, 1]")
        n_pix = p.shape[0] * p.shape[1]
        pc = np.clip(p, eps, 1 - eps)
        bce = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
        total += bce.sum() / n_pix
        live = (p > eps) & (p < 1 - eps)
        grads.append(np.where(live, -(y / pc - (1 - y) / (1 - pc)), 0.0) / (n_pix * n))
    return total / n, grads


def landmark2d_loss(gt, pred, weights=None):
    """Weighted mean pixel distance of 68 landmarks over views; gradient w.r.t. ``pred``."""
    if len(gt) != len(pred):
        raise InvalidArgumentError("view counts differ")
    w = default_landmark_weights() if weights is None else np.asarray(weights, dtype=np.float64)
    n_views = len(pred)
    total = 0.0
    grads = []
    for g_, p_ in zip(gt, pred):
        g_ = np.asarray(g_, dtype=np.float64)
        p_ = np.asarray(p_, dtype=np.float64)
        if g_.shape != p_.shape or g_.shape[0] != w.shape[0]:
            raise InvalidArgumentError("landmark counts differ")
        n = g_.shape[0]
        diff = p_ - g_
        dist = np.linalg.norm(diff, axis=1)
        total += (w * dist).sum()
        scale = np.zeros_like(dist)
        safe = dist > 0
        scale[safe] = w[safe] / (dist[safe] * n * n_views)
        grads.append(diff * scale[:, None])
    return total / (n * n_views), grads


def landmark3d_loss(gt, pred, align_idx):
    """Mean distance of 3D landmarks after similarity alignment on ``align_idx``.

    The alignment is solved from the predicted alignment points onto the
    ground-truth ones and then held constant: the gradient w.r.t. ``pred``
    does not flow through the solve.  Returns (loss, gradient, transform).
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise InvalidArgumentError("landmark counts differ")
    align_idx = np.asarray(align_idx)
    if align_idx.size and (align_idx.min() < 0 or align_idx.max() >= len(gt)):
        raise InvalidArgumentError("alignment index out of range")
    T = solve_similarity(pred[align_idx], gt[align_idx])
    diff = T.apply(pred) - gt
    dist = np.linalg.norm(diff, axis=1)
    n = len(gt)
    scale = np.zeros_like(dist)
    safe = dist > 0
    scale[safe] = 1.0 / (dist[safe] * n)
    grad = T.s * (diff * scale[:, None]) @ T.R
    return dist.sum() / n, grad, T


def regularization_loss(params, w: LossWeights):
    """Weighted squared norms of the coefficient vectors; gradients per vector."""
    a, b, g = (np.asarray(x, dtype=np.float64) for x in (params.alpha, params.beta, params.gamma))
    value = w.w_alpha * a @ a + w.w_beta * b @ b + w.w_gamma * g @ g
    return value, {"alpha": 2 * w.w_alpha * a, "beta": 2 * w.w_beta * b, "gamma": 2 * w.w_gamma * g}


COMPONENTS = ("photo", "mask", "lm2d", "lm3d", "reg")


def total_loss(components, w: LossWeights, use_3d: bool = True):
    """Combine component values; returns (L_all, dL_all/d component).

    The weighted terms are summed with correct rounding, so the result does
    not depend on their order.
    """
    coef = {
        "photo": w.w_p,
        "mask": w.w_m,
        "lm2d": w.w_l * w.w_2d,
        "lm3d": w.w_l * w.w_3d if use_3d else 0.0,
        "reg": w.w_reg,
    }
    unknown = set(components) - set(coef)
    if unknown:
        raise InvalidArgumentError(f"unknown loss components {sorted(unknown)}")
    value = math.fsum(coef[k] * float(components.get(k, 0.0)) for k in COMPONENTS)
    return value, coef


__all__ = [
    "EPS", "LossWeights", "SimilarityTransform", "default_landmark_weights",
    "landmark2d_loss", "landmark3d_loss", "mask_loss", "photo_loss",
    "regularization_loss", "solve_similarity", "total_loss",
]
