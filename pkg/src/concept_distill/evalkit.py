"""Segmentation and generation metrics."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._validation import check_mask_array, check_same_shape
from .errors import FidNumericalError, UndefinedMetric

COV_EPS = 1e-6


def _pair(pred, gt):
    p, g = check_mask_array(pred), check_mask_array(gt)
    check_same_shape(p, g)
    return p, g


def pixel_accuracy(pred, gt):
    p, g = _pair(pred, gt)
    return float((p == g).mean())


def iou(pred, gt, cls="foreground"):
    """Intersection over union for one class; 1.0 when both are empty."""
    p, g = _pair(pred, gt)
    if cls == "background":
        p, g = ~p, ~g
    elif cls != "foreground":
        raise ValueError("cls must be 'foreground' or 'background'")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(pred, gt):
    return 0.5 * (iou(pred, gt, "foreground") + iou(pred, gt, "background"))


def auc_roc(scores, gt):
    """Mann-Whitney estimate: P(fg score > bg score), ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = check_mask_array(gt).ravel() if np.ndim(gt) == 2 else np.asarray(gt, dtype=bool).ravel()
    if s.shape != g.shape:
        raise ValueError(f"dimension mismatch: {s.shape} vs {g.shape}")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC-ROC needs both foreground and background pixels")
    ranks = rankdata(s)
    return float((ranks[g].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def tight_bbox(mask):
    """(top, left, height, width) of the foreground, or None if empty."""
    m = check_mask_array(mask)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        return None
    return int(rows.min()), int(cols.min()), int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1)


def box_iou(a, b):
    at, al, ah, aw = a
    bt, bl, bh, bw = b
    ih = max(0, min(at + ah, bt + bh) - max(at, bt))
    iw = max(0, min(al + aw, bl + bw) - max(al, bl))
    inter = ih * iw
    union = ah * aw + bh * bw - inter
    return float(inter / union) if union else 0.0


def bbox_iou(pred, gt_box):
    """IoU of the prediction's tight box with ``gt_box``; empty prediction scores 0 and warns."""
    box = tight_bbox(pred)
    if box is None:
        warnings.warn("empty prediction: bounding-box IoU set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    g = gt_box
    if hasattr(g, "top"):
        g = (g.top, g.left, g.height, g.width)
    return box_iou(box, tuple(g))


def matrix_sqrt_psd(sigma):
    """Symmetric PSD square root via eigendecomposition, negative eigenvalues clipped."""
    s = 0.5 * (sigma + sigma.T)
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(features_a, features_b, eps=COV_EPS):
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError("feature dimensions differ")
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eps * np.eye(d)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eps * np.eye(d)
    try:
        root_a = matrix_sqrt_psd(cov_a)
        inner = root_a @ cov_b @ root_a
        vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    except np.linalg.LinAlgError as exc:
        raise FidNumericalError("covariance square root did not converge", {
            "cond_a": float(np.linalg.cond(cov_a)), "cond_b": float(np.linalg.cond(cov_b)),
            "error": str(exc)}) from exc
    if not np.all(np.isfinite(vals)):
        raise FidNumericalError("non-finite eigenvalues in covariance product", {"eigenvalues": vals.tolist()})
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)


class RandomProjectionExtractor:
    """Fixed random projection of resized, flattened images (desk-scale stand-in
    for a pretrained feature network)."""

    def __init__(self, dim=16, size=16, seed=0):
        self.dim = dim
        self.size = size
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(size=(size * size * 3, dim)) / np.sqrt(size * size * 3)

    def __call__(self, images):
        import torch
        import torch.nn.functional as F

        x = torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i in images])).permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(self.size, self.size), mode="area")
        return x.reshape(x.shape[0], -1).double().numpy() @ self.projection


class InceptionExtractor:
    """Pool features of torchvision's Inception-v3 (weights downloaded on first use)."""

    def __init__(self):
        import torch
        from torchvision.models import Inception_V3_Weights, inception_v3

        self._torch = torch
        self.model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        self.model.fc = torch.nn.Identity()
        self.model.eval()

    def __call__(self, images):
        torch = self._torch
        x = torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i in images])).permute(0, 3, 1, 2)
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406])[None, :, None, None]
        std = torch.tensor([0.229, 0.224, 0.225])[None, :, None, None]
        with torch.no_grad():
            return self.model((x - mean) / std).double().numpy()


@dataclass
class ThresholdReport:
    threshold: float
    holdout_tpr: float
    holdout_accuracy: float
    test_accuracy: float = float("nan")


def _flat(scores, gt):
    if isinstance(scores, (list, tuple)):
        s = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in scores])
        g = np.concatenate([np.asarray(getattr(x, "values", x), dtype=bool).ravel() for x in gt])
    else:
        s = np.asarray(scores, dtype=np.float64).ravel()
        g = np.asarray(getattr(gt, "values", gt), dtype=bool).ravel()
    if s.shape != g.shape:
        raise ValueError("scores and ground truth differ in size")
    return s, g


def tpr_threshold(scores, gt, target_tpr=0.95, test_scores=None, test_gt=None):
    """Strictest threshold whose foreground rule ``score > threshold`` keeps
    TPR >= target on the holdout.

    The threshold sits midway between the deciding foreground score and the
    next lower score in the holdout.
    """
    s, g = _flat(scores, gt)
    if not 0 < target_tpr <= 1:
        raise UndefinedMetric(f"target TPR {target_tpr} unreachable")
    if not g.any() or g.all():
        raise UndefinedMetric("holdout needs both classes")
    fg = np.sort(s[g])[::-1]
    need = int(np.ceil(target_tpr * fg.size - 1e-12))
    need = max(need, 1)
    decisive = fg[need - 1]
    lower = s[s < decisive]
    thr = 0.5 * (decisive + lower.max()) if lower.size else float(np.nextafter(decisive, -np.inf))
    pred = s > thr
    report = ThresholdReport(float(thr), float(pred[g].mean()), float((pred == g).mean()))
    if test_scores is not None:
        ts, tg = _flat(test_scores, test_gt)
        report.test_accuracy = float(((ts > thr) == tg).mean())
    return report


def accuracy_optimal_threshold(scores, gt):
    """Threshold maximising pixel accuracy over all distinct score cut points."""
    s, g = _flat(scores, gt)
    order = np.argsort(s, kind="stable")
    ss, gg = s[order], g[order]
    uniq = np.unique(ss)
    cuts = np.concatenate([[uniq[0] - 1.0], 0.5 * (uniq[1:] + uniq[:-1]), [uniq[-1]]])
    # predictions are fg iff s > cut; correct = bg below cut + fg above cut
    bg_below = np.searchsorted(ss, cuts, side="right")
    cum_bg = np.concatenate([[0], np.cumsum(~gg)])
    cum_fg = np.concatenate([[0], np.cumsum(gg)])
    correct = cum_bg[bg_below] + (cum_fg[-1] - cum_fg[bg_below])
    best = int(np.argmax(correct))
    return float(cuts[best]), float(correct[best] / s.size)
