"""Refined masks from the difference between an image and its
background-inpainted counterpart, plus the crop-and-flip ablation."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_mask_array
from .backend.sampling import inpaint_latents, seeded_normal
from .errors import ContractError, DegenerateDistribution
from .maskgen import BinaryMask, GmmFit, binarize, fit_bimodal_gmm, upsample_mask


@dataclass
class RefineConfig:
    reduce: str = "mean"
    # fit the difference GMM only inside the upsampled preliminary region
    fit_inside_preliminary: bool = True


@dataclass
class RefineResult:
    mask: BinaryMask
    difference: Optional[np.ndarray]
    inpainted: Optional[np.ndarray]
    fit: Optional[GmmFit]


def channel_reduce(diff, how="mean"):
    """Collapse a (H, W, C) difference to (H, W) from absolute values."""
    d = np.abs(np.asarray(diff, dtype=np.float64))
    if d.ndim == 2:
        return d
    if how == "mean":
        return d.mean(axis=2)
    if how == "max":
        return d.max(axis=2)
    if how == "luminance":
        return d @ np.array([0.299, 0.587, 0.114])[: d.shape[2]]
    raise ValueError(f"unknown channel reduction {how!r}")


def _empty(shape, provenance, reason):
    return BinaryMask(np.zeros(shape, bool), "pixel", provenance, {"empty_refinement": True, "reason": reason})


def mask_from_difference(diff, prelim_up, config=RefineConfig(), provenance="refined"):
    """``M = M_pre,up * g(d)`` with ``g`` a bimodal GMM threshold on ``d``."""
    up = check_mask_array(prelim_up)
    d = np.asarray(diff, dtype=np.float64)
    samples = d[up] if config.fit_inside_preliminary else d.ravel()
    try:
        fit = fit_bimodal_gmm(samples)
    except (DegenerateDistribution, ContractError) as exc:
        return _empty(up.shape, provenance, str(exc)), None
    g = binarize(d, fit, "pixel", provenance)
    return BinaryMask(up & g.values, "pixel", provenance, {"empty_refinement": False}), fit


def masked_latent(z0, m_pre, seed):
    """``z0 * (1 - M) + z * M`` with fresh seeded noise ``z``."""
    z0 = torch.as_tensor(z0)
    m = torch.from_numpy(check_mask_array(m_pre).astype(np.float32))[None]
    z = seeded_normal(tuple(z0.shape), seed)
    return z0 * (1 - m) + z * m


def refine_batch(backend, images, prelim_masks, seeds, config=RefineConfig(), batch_size=32):
    """Refine many images with one batched inpainting pass per chunk."""
    results = [None] * len(images)
    work = []
    for i, (img, mp) in enumerate(zip(images, prelim_masks)):
        img = check_image(img, divisible_by=backend.descriptor.spatial_scale)
        mp_arr = check_mask_array(mp)
        if not mp_arr.any():
            results[i] = RefineResult(_empty(img.shape[:2], "refined", "empty preliminary mask"), None, None, None)
            results[i].mask.flags["empty_preliminary"] = True
            continue
        work.append((i, img, mp_arr))
    bg = backend.background_prompt()
    for start in range(0, len(work), batch_size):
        chunk = work[start:start + batch_size]
        imgs = torch.from_numpy(np.stack([c[1] for c in chunk])).permute(0, 3, 1, 2)
        with torch.no_grad():
            z0 = backend.encode_batch(imgs)
        masks = torch.stack([torch.from_numpy(c[2].astype(np.float32))[None] for c in chunk])
        z_tilde = torch.stack([masked_latent(z0[k], c[2], seeds[c[0]]) for k, c in enumerate(chunk)])
        z = inpaint_latents(backend, z_tilde, masks, [bg] * len(chunk), [seeds[c[0]] for c in chunk])
        with torch.no_grad():
            inpainted = backend.decode_batch(z).clamp(0, 1).permute(0, 2, 3, 1).numpy()
        for k, (i, img, mp_arr) in enumerate(chunk):
            d = channel_reduce(img - inpainted[k], config.reduce)
            up = upsample_mask(mp_arr, img.shape[:2])
            mask, fit = mask_from_difference(d, up, config)
            results[i] = RefineResult(mask, d, inpainted[k], fit)
    return results


def refined_mask(image, m_pre, backend, seed=0, config=RefineConfig()):
    """Refined pixel-space mask for one image; see :func:`refine_batch`."""
    return refine_batch(backend, [image], [m_pre], [seed], config)[0].mask


def largest_background_rect(background):
    """Maximal all-True axis-aligned rectangle (histogram stack method).

    Returns (top, left, height, width) or None when there is no True cell.
    """
    bg = check_mask_array(background)
    H, W = bg.shape
    heights = np.zeros(W, dtype=np.int64)
    best, best_rect = 0, None
    for row in range(H):
        heights = np.where(bg[row], heights + 1, 0)
        stack = []
        for col in range(W + 1):
            h = heights[col] if col < W else 0
            start = col
            while stack and stack[-1][1] >= h:
                s, sh = stack.pop()
                area = sh * (col - s)
                if area > best:
                    best, best_rect = area, (row - sh + 1, s, int(sh), col - s)
                start = s
            stack.append((start, h))
    return best_rect


def crop_flip_inpaint(image, prelim_up):
    """Fill the preliminary region with the mirrored largest background patch.

    Returns (filled image, tiled flag). The patch is tiled when it is
    smaller than the region's bounding box.
    """
    img = check_image(image)
    up = check_mask_array(prelim_up)
    rect = largest_background_rect(~up)
    if rect is None:
        raise ContractError("preliminary mask leaves no background region")
    top, left, h, w = rect
    patch = img[top:top + h, left:left + w][:, ::-1]
    rows, cols = np.nonzero(up)
    r0, c0 = rows.min(), cols.min()
    bh, bw = rows.max() - r0 + 1, cols.max() - c0 + 1
    tiled = bool(h < bh or w < bw)
    filled = img.copy()
    filled[rows, cols] = patch[(rows - r0) % h, (cols - c0) % w]
    return filled, tiled


def crop_flip_mask(image, m_pre, seed=0, config=RefineConfig()):
    """Refinement with the mirrored-patch fill in place of learned inpainting."""
    img = check_image(image)
    mp = check_mask_array(m_pre)
    up = upsample_mask(mp, img.shape[:2]) if mp.shape != img.shape[:2] else mp
    if not up.any():
        return _empty(img.shape[:2], "crop_ablation", "empty preliminary mask")
    filled, tiled = crop_flip_inpaint(img, up)
    d = channel_reduce(img - filled, config.reduce)
    mask, _ = mask_from_difference(d, up, config, provenance="crop_ablation")
    mask.flags["tiled"] = tiled
    return mask


class MaskRefiner(TransformerMixin, BaseEstimator):
    """(images, preliminary masks) -> refined pixel masks using a fine-tuned backend."""

    def __init__(self, backend=None, seed=0, fit_inside_preliminary=True, reduce="mean"):
        self.backend = backend
        self.seed = seed
        self.fit_inside_preliminary = fit_inside_preliminary
        self.reduce = reduce

    def fit(self, X=None, y=None):
        if self.backend is None:
            raise ValueError("MaskRefiner needs a backend")
        self.config_ = RefineConfig(self.reduce, self.fit_inside_preliminary)
        return self

    def transform(self, X, prelim_masks):
        if not hasattr(self, "config_"):
            self.fit()
        seeds = [self.seed + i for i in range(len(X))]
        return np.stack([r.mask.values for r in refine_batch(self.backend, X, prelim_masks, seeds, self.config_)])
