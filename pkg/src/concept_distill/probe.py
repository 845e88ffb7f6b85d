"""Cross-attention capture and importance-map aggregation.

An importance map for token ``k`` is the attention each latent position
pays to ``k``, averaged over heads, resampled to the latent grid, summed
over cross-attention layers, averaged over Monte-Carlo re-noisings of the
clean latent at each step and summed over steps ``t = 1..T0``.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image
from .errors import ContractError

DEFAULT_T0 = 40
DEFAULT_N = 1


@dataclass
class AttentionRecord:
    layer_index: int
    head_index: int
    probabilities: np.ndarray  # (h * w, tokens)
    spatial_shape: Tuple[int, int]
    timestep: int = 0
    draw: int = 0

    def __post_init__(self):
        p = np.asarray(self.probabilities)
        if p.ndim != 2 or p.shape[0] != self.spatial_shape[0] * self.spatial_shape[1]:
            raise ValueError(f"probabilities {p.shape} do not match spatial shape {self.spatial_shape}")
        self.probabilities = p

    def row_sums(self):
        return self.probabilities.astype(np.float64).sum(axis=1)

    def token_map(self, token_index):
        return self.probabilities[:, token_index].reshape(self.spatial_shape)


@dataclass
class ImportanceMap:
    scores: np.ndarray
    token_index: Union[int, Tuple[int, ...]]
    T0: int
    N: int
    normalized: bool = False
    seed: Optional[int] = None
    layers: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("importance scores must be finite")

    def metadata(self):
        token = list(self.token_index) if isinstance(self.token_index, tuple) else self.token_index
        return {"token_index": token, "T0": self.T0, "N": self.N, "seed": self.seed,
                "normalized": self.normalized, "layers": self.layers, **self.meta}


def capture_trajectory(backend, image, prompt, T0=DEFAULT_T0, N=DEFAULT_N, seed=0, batch_size=64):
    """Re-noise the clean latent ``N`` times at every step ``t = 1..T0`` and
    denoise each draw once with attention capture.

    Returns one list of records per timestep, in ascending ``t``.
    """
    T = backend.descriptor.schedule_length
    if not 1 <= T0 <= T:
        raise ContractError(f"T0={T0} must lie in [1, {T}]")
    if N < 1:
        raise ContractError("N must be >= 1")
    z0 = backend.encode(image)
    return capture_from_latent(backend, z0.values, prompt, T0, N, seed, batch_size)


def capture_from_latent(backend, z0, prompt, T0, N, seed, batch_size=64):
    z0 = torch.as_tensor(z0, dtype=torch.float32)
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    jobs = [(t, n) for t in range(1, T0 + 1) for n in range(N)]
    noise = torch.randn((len(jobs),) + tuple(z0.shape), generator=gen)
    ts = torch.tensor([t for t, _ in jobs], dtype=torch.long)
    a, s = backend.schedule.coefficients(ts.numpy())
    a = torch.from_numpy(a)[:, None, None, None]
    s = torch.from_numpy(s)[:, None, None, None]
    zt = (a * z0.double()[None] + s * noise.double()).float()
    h, w = z0.shape[1:]
    groups = {t: [] for t in range(1, T0 + 1)}
    from .backend.base import layer_shape

    with torch.no_grad():
        for start in range(0, len(jobs), batch_size):
            sl = slice(start, start + batch_size)
            _, attn = backend.predict_noise(zt[sl], ts[sl], [prompt], capture=True)
            for layer, probs in enumerate(attn):
                probs = probs.numpy()
                shape = layer_shape(probs.shape[2], h, w)
                for i, (t, n) in enumerate(jobs[sl]):
                    for head in range(probs.shape[1]):
                        groups[t].append(AttentionRecord(layer, head, probs[i, head], shape, t, n))
    return [groups[t] for t in range(1, T0 + 1)]


def _flatten(records):
    if records and isinstance(records[0], (list, tuple)):
        return [r for group in records for r in group]
    return list(records)


def _resample(m, shape, mode):
    if m.shape == tuple(shape):
        return m
    t = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float64))[None, None]
    kw = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    return F.interpolate(t, size=tuple(shape), mode=mode, **kw)[0, 0].numpy()


def _layer_maps(records, token_index, latent_shape, head_reduce, resample):
    """Per (timestep, draw): sum over layers of head-reduced, resampled token maps."""
    tokens = token_index if isinstance(token_index, tuple) else (token_index,)
    by_key = {}
    for r in records:
        n_tok = r.probabilities.shape[1]
        if any(k < 0 or k >= n_tok for k in tokens):
            raise ContractError(f"token index {token_index} outside 0..{n_tok - 1}")
        by_key.setdefault((r.timestep, r.draw), {}).setdefault(r.layer_index, []).append(r)
    out = {}
    for key in sorted(by_key):
        total = None
        for layer in sorted(by_key[key]):
            heads = sorted(by_key[key][layer], key=lambda r: r.head_index)
            stack = np.stack([sum(r.token_map(k).astype(np.float64) for k in tokens) for r in heads])
            m = stack.mean(axis=0) if head_reduce == "mean" else stack.sum(axis=0)
            m = _resample(m, latent_shape, resample)
            total = m if total is None else total + m
        out[key] = total
    return out


def _latent_shape(records, latent_shape):
    if latent_shape is not None:
        return tuple(latent_shape)
    return max((r.spatial_shape for r in records), key=lambda s: s[0] * s[1])


def aggregate(records, token_index, latent_shape=None, head_reduce="mean", resample="bilinear"):
    """Monte-Carlo importance map: draws are averaged at each step, steps summed."""
    records = _flatten(records)
    if not records:
        raise ContractError("cannot aggregate an empty record list")
    shape = _latent_shape(records, latent_shape)
    maps = _layer_maps(records, token_index, shape, head_reduce, resample)
    steps = sorted({t for t, _ in maps})
    total = None
    draws_used = 0
    for t in steps:
        draws = [maps[key] for key in sorted(maps) if key[0] == t]
        draws_used = max(draws_used, len(draws))
        acc = draws[0]
        for d in draws[1:]:
            acc = acc + d
        step_mean = acc / len(draws)
        total = step_mean if total is None else total + step_mean
    return ImportanceMap(total, token_index, T0=len(steps), N=draws_used)


def aggregate_single_draw(records, token_index, latent_shape=None, head_reduce="mean", resample="bilinear"):
    """Simplified importance score: plain sum over steps and layers (one draw per step)."""
    records = _flatten(records)
    if not records:
        raise ContractError("cannot aggregate an empty record list")
    if any(r.draw != 0 for r in records):
        raise ContractError("the simplified score expects exactly one draw per step")
    shape = _latent_shape(records, latent_shape)
    maps = _layer_maps(records, token_index, shape, head_reduce, resample)
    total = None
    for key in sorted(maps):
        total = maps[key] if total is None else total + maps[key]
    return ImportanceMap(total, token_index, T0=len(maps), N=1)


def normalize_instance(imap):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    s = imap.scores
    lo, hi = s.min(), s.max()
    scaled = np.zeros_like(s) if hi - lo <= 0 else (s - lo) / (hi - lo)
    return ImportanceMap(scaled, imap.token_index, imap.T0, imap.N, normalized=True, seed=imap.seed,
                         layers=imap.layers, meta=dict(imap.meta))


def _latent_hw(backend, image):
    img = check_image(image)
    scale = backend.descriptor.spatial_scale
    return img.shape[0] // scale, img.shape[1] // scale


def importance_map(backend, image, prompt, T0=DEFAULT_T0, N=DEFAULT_N, seed=0, head_reduce="mean",
                   resample="bilinear", token_index=None):
    """Map for the prompt's target token(s); multiple subtokens are summed."""
    records = capture_trajectory(backend, image, prompt, T0, N, seed)
    if token_index is None:
        targets = tuple(prompt.target_token_indices)
        token_index = targets[0] if len(targets) == 1 else targets
    imap = aggregate(records, token_index, _latent_hw(backend, image), head_reduce, resample)
    imap.seed = seed
    return imap


def per_token_maps(backend, image, prompt, T0=DEFAULT_T0, N=DEFAULT_N, seed=0, head_reduce="mean",
                   resample="bilinear"):
    """One map per token position, plus a summed map for every word split into subtokens."""
    records = capture_trajectory(backend, image, prompt, T0, N, seed)
    shape = _latent_hw(backend, image)
    maps = []
    for k in range(len(prompt.token_ids)):
        m = aggregate(records, k, shape, head_reduce, resample)
        m.seed = seed
        maps.append(m)
    for group in prompt.word_groups:
        if len(group) > 1:
            m = ImportanceMap(sum(maps[k].scores for k in group), tuple(group), T0, N, seed=seed)
            maps.append(m)
    return maps


class ImportanceMapExtractor(TransformerMixin, BaseEstimator):
    """Transform images into importance maps for a fixed object word.

    Stateless apart from the backend handle; ``fit`` only validates.
    """

    def __init__(self, backend=None, object_word="blob", T0=DEFAULT_T0, N=DEFAULT_N, seed=0,
                 normalize=True, head_reduce="mean"):
        self.backend = backend
        self.object_word = object_word
        self.T0 = T0
        self.N = N
        self.seed = seed
        self.normalize = normalize
        self.head_reduce = head_reduce

    def fit(self, X=None, y=None):
        if self.backend is None:
            raise ValueError("ImportanceMapExtractor needs a backend")
        self.prompt_ = self.backend.foreground_prompt(self.object_word)
        return self

    def transform(self, X):
        if not hasattr(self, "prompt_"):
            self.fit()
        out = []
        for i, image in enumerate(X):
            m = importance_map(self.backend, check_image(image), self.prompt_, self.T0, self.N,
                               seed=self.seed + i, head_reduce=self.head_reduce)
            out.append(normalize_instance(m).scores if self.normalize else m.scores)
        return np.stack(out)
