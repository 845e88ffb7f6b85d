"""Input validation helpers shared by the estimators and functional API."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ShapeError


def check_image(image, *, divisible_by=None):
    """Return ``image`` as a float32 (H, W, 3) array in [0, 1].

    uint8 input is rescaled; grayscale (H, W) input is broadcast to RGB.
    """
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if divisible_by is not None:
        h, w = arr.shape[:2]
        if h % divisible_by or w % divisible_by:
            raise ShapeError(f"image size {h}x{w} is not divisible by {divisible_by}")
    return arr


def check_images(images, **kwargs):
    """Validate a batch: an (N, H, W, 3) array or any iterable of images."""
    return [check_image(im, **kwargs) for im in images]


def check_mask_array(mask):
    """Return a 2-D boolean array."""
    values = getattr(mask, "values", mask)
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all(np.isin(arr, (0, 1))):
            raise ValueError("mask values must be boolean or 0/1")
        arr = arr.astype(bool)
    return arr


def check_scores(scores, *, ndim=None):
    arr = check_array(np.asarray(scores, dtype=np.float64), ensure_2d=False, allow_nd=True,
                      ensure_min_samples=1)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected {ndim}-D scores, got shape {arr.shape}")
    return arr


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
