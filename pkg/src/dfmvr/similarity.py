"""Closed-form similarity alignment of corresponding 3D point sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError, InvalidArgumentError


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> s * (R @ x + t); note the translation sits inside the scale."""

    s: float
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return self.s * (np.asarray(points) @ self.R.T + self.t)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other."""
        # s1 (R1 (s2 (R2 x + t2)) + t1) = s1 s2 (R1 R2 x + R1 t2 + t1 / s2)
        return SimilarityTransform(
            self.s * other.s, self.R @ other.R, self.R @ other.t + self.t / other.s
        )

    def inverse(self) -> "SimilarityTransform":
        # x = R^T (y / s - t) = (1/s) (R^T y - s R^T t)
        return SimilarityTransform(1.0 / self.s, self.R.T, -self.s * (self.R.T @ self.t))


def solve_similarity(src, dst) -> SimilarityTransform:
    """Least-squares (s, R, t) with dst ~ s (R src + t), det R = +1.

    Centroids, an SVD of the cross-covariance with reflection correction,
    and the scale from the source variance (Umeyama's method).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidArgumentError("src and dst must both be N x 3")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv.size < 2 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("source points are collinear or coincident")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    var_s = (xs**2).sum() / len(src)
    s = float((D * S).sum() / var_s)
    if not s > 0:
        raise DegenerateConfigurationError("target points collapse to a single point")
    t = (mu_d - s * R @ mu_s) / s
    return SimilarityTransform(s, R, t)
