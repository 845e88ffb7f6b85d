"""Binary masks from importance maps: bimodal GMM thresholding, orphan
removal and nearest-neighbour upsampling."""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_mask_array
from .errors import ContractError, DegenerateDistribution

MIN_SAMPLES = 16
VARIANCE_FLOOR = 1e-8
MAX_ITER = 200
TOL = 1e-7
DEGENERATE_RANGE = 1e-6
SPACES = ("latent", "pixel")
PROVENANCES = ("preliminary", "refined", "crop_ablation", "ground_truth", "predicted")


@dataclass
class GmmFit:
    means: Tuple[float, float]
    variances: Tuple[float, float]
    weights: Tuple[float, float]
    threshold: float
    iterations_used: int
    converged: bool
    log_likelihoods: list = field(default_factory=list, repr=False)

    def to_record(self):
        return {"means": list(self.means), "variances": list(self.variances), "weights": list(self.weights),
                "threshold": self.threshold, "iterations_used": self.iterations_used,
                "converged": self.converged}


@dataclass
class BinaryMask:
    values: np.ndarray
    resolution_space: str = "latent"
    provenance: str = "preliminary"
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = check_mask_array(self.values)
        if self.resolution_space not in SPACES:
            raise ValueError(f"resolution_space must be one of {SPACES}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")

    @property
    def shape(self):
        return self.values.shape

    def is_empty(self):
        return not self.values.any()


def _log_normal(x, mu, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x[:, None] - mu) ** 2 / var)


def mixture_log_likelihood(x, means, variances, weights):
    """Mean per-sample log-likelihood of a 1-D Gaussian mixture."""
    x = np.asarray(x, dtype=np.float64)
    logp = _log_normal(x, np.asarray(means), np.asarray(variances)) + np.log(np.asarray(weights))
    return float(logsumexp(logp, axis=1).mean())


def posterior_equality_threshold(means, variances, weights):
    """Value between the two means where both components have equal posterior.

    Solves the quadratic in ``x``. When no crossing lies between the means
    (one component dominates the whole interval) the interval end on the
    dominated side is returned.
    """
    (m1, m2), (v1, v2), (p1, p2) = means, variances, weights
    a = 1.0 / (2 * v2) - 1.0 / (2 * v1)
    b = m1 / v1 - m2 / v2
    c = (m2 ** 2 / (2 * v2) - m1 ** 2 / (2 * v1) + np.log(p1) - np.log(p2)
         - 0.5 * np.log(v1) + 0.5 * np.log(v2))
    if abs(a) < 1e-12 * max(abs(b), 1e-300):
        roots = [-c / b] if b != 0 else []
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            roots = []
        else:
            sq = np.sqrt(disc)
            # numerically stable pair
            q = -0.5 * (b + np.copysign(sq, b))
            roots = [q / a, c / q] if q != 0 else [-b / (2 * a)]
    inside = sorted(r for r in roots if m1 <= r <= m2)

    def g(x):  # log posterior ratio low/high
        return a * x * x + b * x + c

    if inside:
        # prefer the crossing where the low component hands over to the high one
        for r in inside:
            if g(r - 1e-9 * (abs(r) + 1)) >= g(r + 1e-9 * (abs(r) + 1)):
                return float(r)
        return float(inside[0])
    return float(m1 if g(0.5 * (m1 + m2)) < 0 else m2)


def fit_bimodal_gmm(samples, max_iter=MAX_ITER, tol=TOL, var_floor=VARIANCE_FLOOR):
    """EM fit of a two-component 1-D Gaussian mixture.

    Initialisation: means at the 25th/75th percentiles, equal weights and
    the pooled sample variance for both components. Stops when the mean
    log-likelihood changes by less than ``tol``. Component 0 is the
    lower-mean (background) component.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < MIN_SAMPLES:
        raise ContractError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if np.ptp(x) < DEGENERATE_RANGE:
        raise DegenerateDistribution(f"sample range {np.ptp(x):.3g} below {DEGENERATE_RANGE}")

    mu = np.percentile(x, [25, 75]).astype(np.float64)
    if mu[1] - mu[0] < DEGENERATE_RANGE:
        # heavy ties at the median; spread the start around the mean instead
        mu = np.array([x.mean() - x.std(), x.mean() + x.std()])
    var = np.full(2, max(x.var(), var_floor))
    w = np.array([0.5, 0.5])

    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        logp = _log_normal(x, mu, var) + np.log(w)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            raise DegenerateDistribution("a mixture component lost all responsibility")
        w = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, var_floor)

    order = np.argsort(mu, kind="stable")
    mu, var, w = mu[order], var[order], w[order]
    thr = posterior_equality_threshold(tuple(mu), tuple(var), tuple(w))
    return GmmFit(tuple(float(v) for v in mu), tuple(float(v) for v in var), tuple(float(v) for v in w),
                  thr, it, converged, history)


def binarize(values, fit, resolution_space="latent", provenance="preliminary"):
    """Foreground iff value > fit.threshold."""
    scores = np.asarray(getattr(values, "scores", values), dtype=np.float64)
    return BinaryMask(scores > fit.threshold, resolution_space, provenance)


def _neighbourhood_counts(arr, kernel):
    return ndimage.correlate(arr.astype(np.int32), np.ones((kernel, kernel), dtype=np.int32), mode="nearest")


def remove_orphans(mask, kernel=3):
    """Mean filter (replicate borders) re-thresholded at 0.5."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be an odd integer >= 3")
    arr = check_mask_array(mask)
    keep = 2 * _neighbourhood_counts(arr, kernel) >= kernel * kernel
    if isinstance(mask, BinaryMask):
        return BinaryMask(keep, mask.resolution_space, mask.provenance, dict(mask.flags))
    return keep


def upsample_mask(mask, target):
    """Nearest-neighbour upsampling to ``target = (H, W)``."""
    arr = check_mask_array(mask)
    H, W = target
    h, w = arr.shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    up = arr[rows[:, None], cols[None, :]]
    if isinstance(mask, BinaryMask):
        return BinaryMask(up, "pixel", mask.provenance, dict(mask.flags))
    return up


def downsample_mask(mask, target):
    """Nearest-neighbour (strided) downsampling; inverse of ``upsample_mask`` for integer factors."""
    arr = check_mask_array(mask)
    h, w = target
    H, W = arr.shape
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return arr[rows[:, None], cols[None, :]]


@dataclass
class PrelimConfig:
    T0: int = 40
    N: int = 1
    normalize: bool = True
    absolute: bool = True
    orphan_kernel: int = 3
    head_reduce: str = "mean"
    resample: str = "bilinear"


@dataclass
class PreliminaryResult:
    mask: BinaryMask
    importance: object
    fit: Optional[GmmFit]


def mask_from_importance(imap, config=PrelimConfig()):
    """normalize -> GMM -> binarize -> orphan removal, at latent resolution."""
    from .probe import normalize_instance

    scores_map = normalize_instance(imap) if config.normalize else imap
    scores = np.abs(scores_map.scores) if config.absolute else scores_map.scores
    try:
        fit = fit_bimodal_gmm(scores.ravel())
    except DegenerateDistribution as exc:
        empty = BinaryMask(np.zeros(scores.shape, bool), "latent", "preliminary",
                           {"degenerate": True, "reason": str(exc)})
        return PreliminaryResult(empty, scores_map, None)
    mask = binarize(scores, fit)
    mask = remove_orphans(mask, config.orphan_kernel)
    mask.flags["degenerate"] = False
    return PreliminaryResult(mask, scores_map, fit)


def compute_preliminary(backend, image, prompt, config=PrelimConfig(), seed=0):
    from .probe import importance_map

    imap = importance_map(backend, image, prompt, config.T0, config.N, seed=seed,
                          head_reduce=config.head_reduce, resample=config.resample)
    return mask_from_importance(imap, config)


def preliminary_mask(backend, image, prompt, config=PrelimConfig(), seed=0):
    return compute_preliminary(backend, image, prompt, config, seed).mask


class BimodalGMM(BaseEstimator):
    """Two-component 1-D Gaussian mixture with a posterior-equality threshold.

    ``predict`` returns True for the higher-mean (foreground) component.
    """

    def __init__(self, max_iter=MAX_ITER, tol=TOL, var_floor=VARIANCE_FLOOR):
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor

    def fit(self, X, y=None):
        fit = fit_bimodal_gmm(np.asarray(X, dtype=np.float64).ravel(), self.max_iter, self.tol, self.var_floor)
        self.fit_ = fit
        self.means_ = np.array(fit.means)
        self.variances_ = np.array(fit.variances)
        self.weights_ = np.array(fit.weights)
        self.threshold_ = fit.threshold
        self.converged_ = fit.converged
        self.n_iter_ = fit.iterations_used
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        return np.asarray(X, dtype=np.float64) > self.threshold_

    def score(self, X, y=None):
        check_is_fitted(self, "threshold_")
        return mixture_log_likelihood(np.asarray(X).ravel(), self.means_, self.variances_, self.weights_)


class PreliminaryMasker(TransformerMixin, BaseEstimator):
    """Images -> latent-resolution preliminary masks for one object word."""

    def __init__(self, backend=None, object_word="blob", T0=40, N=1, orphan_kernel=3, seed=0):
        self.backend = backend
        self.object_word = object_word
        self.T0 = T0
        self.N = N
        self.orphan_kernel = orphan_kernel
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.backend is None:
            raise ValueError("PreliminaryMasker needs a backend")
        self.prompt_ = self.backend.foreground_prompt(self.object_word)
        self.config_ = PrelimConfig(T0=self.T0, N=self.N, orphan_kernel=self.orphan_kernel)
        return self

    def transform(self, X):
        if not hasattr(self, "prompt_"):
            self.fit()
        masks = [preliminary_mask(self.backend, check_image(x), self.prompt_, self.config_, seed=self.seed + i)
                 for i, x in enumerate(X)]
        return np.stack([m.values for m in masks])
