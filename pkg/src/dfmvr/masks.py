"""Semantic face masks, one-hot encoding and photometric weight maps."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .morphable_model import N_CLASSES

BACKGROUND, FACE_SKIN = 0, 1
FEATURE_CLASSES = tuple(range(2, N_CLASSES))

FEATURE_WEIGHT = 254
SKIN_WEIGHT = 128
BACKGROUND_WEIGHT = 32


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidArgumentError("label mask must be H x W")
    if mask.size and (mask.min() < 0 or mask.max() >= N_CLASSES):
        raise InvalidArgumentError("label mask values must lie in [0, 9]")
    return mask.astype(np.uint8)


def one_hot(mask) -> np.ndarray:
    mask = check_mask(mask)
    return np.eye(N_CLASSES, dtype=np.uint8)[mask]


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def dilate(mask, radius: int = 20) -> np.ndarray:
    """Per-class disk dilation; features beat skin beat background, higher id wins."""
    if radius < 0:
        raise InvalidArgumentError("radius must be >= 0")
    mask = check_mask(mask)
    if radius == 0:
        return mask.copy()
    fp = disk(radius)
    out = np.zeros_like(mask)
    for cls in (FACE_SKIN,) + FEATURE_CLASSES:
        grown = ndimage.binary_dilation(mask == cls, structure=fp)
        out[grown] = cls
    return out


def to_weight_map(dilated) -> np.ndarray:
    lut = np.full(N_CLASSES, FEATURE_WEIGHT, dtype=np.uint8)
    lut[FACE_SKIN] = SKIN_WEIGHT
    lut[BACKGROUND] = BACKGROUND_WEIGHT
    return lut[check_mask(dilated)]


def weight_map_for(mask, radius: int = 20) -> np.ndarray:
    return to_weight_map(dilate(mask, radius))
