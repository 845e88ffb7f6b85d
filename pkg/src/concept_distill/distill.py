"""Dual-objective fine-tuning, background-substituted guidance and
synthetic dataset generation."""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_mask_array
from .backend.base import GuidanceSpec
from .backend.sampling import guided_noise, sample_images
from .backend.toy import denoising_loss
from .errors import ContractError, NoValidRect

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchRect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.top < 0 or self.left < 0:
            raise ValueError(f"invalid rectangle {self}")

    @property
    def area(self):
        return self.height * self.width

    @property
    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def fits(self, shape):
        return self.top + self.height <= shape[0] and self.left + self.width <= shape[1]

    def to_mask(self, shape):
        if not self.fits(shape):
            raise ValueError(f"{self} exceeds image bounds {shape}")
        m = np.zeros(shape, dtype=bool)
        m[self.slices] = True
        return m


@dataclass(frozen=True)
class RectConstraints:
    min_fraction: float = 0.05
    max_fraction: float = 0.40
    min_aspect: float = 1 / 3
    max_aspect: float = 3.0
    max_tries: int = 100

    def candidate_sizes(self, shape):
        """All (height, width) pairs admitted by the area and aspect bounds."""
        H, W = shape
        total = H * W
        sizes = []
        for h in range(1, H + 1):
            for w in range(1, W + 1):
                frac = h * w / total
                if not self.min_fraction <= frac <= self.max_fraction:
                    continue
                if not self.min_aspect <= h / w <= self.max_aspect:
                    continue
                sizes.append((h, w))
        return sizes


def _integral(mask):
    return np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))


def _rect_sum(ii, r):
    t, l, b, rr = r.top, r.left, r.top + r.height, r.left + r.width
    return ii[b, rr] - ii[t, rr] - ii[b, l] + ii[t, l]


def sample_background_rect(mask, constraints=RectConstraints(), seed=0):
    """Rejection-sample a rectangle that avoids every foreground pixel.

    Proposals pick a size uniformly from the admissible (height, width)
    pairs, then a uniform position where it fits.
    """
    fg = check_mask_array(mask)
    if fg.all():
        raise NoValidRect("mask has no background pixels")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = constraints.candidate_sizes(fg.shape)
    if not sizes:
        raise NoValidRect(f"no rectangle size satisfies the constraints on {fg.shape}")
    ii = _integral(fg)
    H, W = fg.shape
    for _ in range(constraints.max_tries):
        h, w = sizes[int(rng.integers(len(sizes)))]
        rect = PatchRect(int(rng.integers(H - h + 1)), int(rng.integers(W - w + 1)), h, w)
        if _rect_sum(ii, rect) == 0:
            return rect
    raise NoValidRect(f"no background rectangle found in {constraints.max_tries} tries")


@dataclass
class FinetuneConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 5e-5
    objective_ratio: tuple = (1, 1)
    rect: RectConstraints = field(default_factory=RectConstraints)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 0, batch size >= 1, learning rate > 0")
        if tuple(self.objective_ratio) != (1, 1):
            raise ValueError("the two objectives are trained in equal proportion (ratio 1:1)")

    def to_record(self):
        d = asdict(self)
        d["objective_ratio"] = list(self.objective_ratio)
        return d


def objective_for_step(step):
    """Strict alternation: even steps synthesise, odd steps inpaint background."""
    return "synthesis" if step % 2 == 0 else "background"


def rect_latent_weights(rect, image_shape, scale):
    """Latent cells fully covered by the rectangle get weight 1, all others 0."""
    m = torch.from_numpy(rect.to_mask(image_shape).astype(np.float32))[None, None]
    return (F.avg_pool2d(m, scale) >= 1.0 - 1e-6).float()[0]


@dataclass
class FinetuneResult:
    backend: object
    log: list
    skipped: int


def finetune(backend, images, prelim_masks, object_word, config=FinetuneConfig(), log_path=None):
    """Fine-tune a copy of ``backend`` on full synthesis (object prompt) and
    rectangle-restricted background denoising (background prompt).

    ``prelim_masks`` may be latent- or pixel-resolution; they are brought
    to pixel resolution to choose background rectangles. Images with no
    valid rectangle are skipped for the background objective and counted.
    """
    from .maskgen import upsample_mask

    if len(images) != len(prelim_masks):
        raise ContractError("every training image needs a preliminary mask")
    tuned = backend.copy()
    if config.steps == 0 or len(images) == 0:
        return FinetuneResult(tuned, [], 0)
    imgs = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    H, W = imgs.shape[1:3]
    scale = backend.descriptor.spatial_scale
    pix_masks = [upsample_mask(np.asarray(getattr(m, "values", m), dtype=bool), (H, W)) for m in prelim_masks]
    with torch.no_grad():
        latents = tuned.encode_batch(torch.from_numpy(imgs).permute(0, 3, 1, 2))
    fg_prompt = tuned.foreground_prompt(object_word)
    bg_prompt = tuned.background_prompt()

    gen = torch.Generator().manual_seed(config.seed)
    rect_rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(tuned.net.parameters(), lr=config.learning_rate)
    tuned.net.train()
    log, skipped = [], 0
    n = len(imgs)
    for step in range(config.steps):
        objective = objective_for_step(step)
        idx = torch.randint(0, n, (config.batch_size,), generator=gen).tolist()
        if objective == "synthesis":
            loss = denoising_loss(tuned, latents[idx], [fg_prompt], gen)
        else:
            keep, weights = [], []
            for i in idx:
                try:
                    rect = sample_background_rect(pix_masks[i], config.rect, rect_rng)
                except NoValidRect:
                    skipped += 1
                    continue
                wgt = rect_latent_weights(rect, (H, W), scale)
                if wgt.sum() == 0:
                    skipped += 1
                    continue
                keep.append(i)
                weights.append(wgt)
            if not keep:
                log.append({"step": step, "objective": objective, "loss": None, "seed": config.seed})
                continue
            loss = denoising_loss(tuned, latents[keep], [bg_prompt], gen, weights=torch.stack(weights))
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"step": step, "objective": objective, "loss": float(loss.item()), "seed": config.seed})
    tuned.net.eval()
    tuned.trained = True
    if log_path is not None:
        from .pipeline.io import atomic_write_text

        atomic_write_text(log_path, "".join(json.dumps(r) + "\n" for r in log))
    if skipped:
        logger.info("finetune: %d background samples skipped (no valid rectangle)", skipped)
    return FinetuneResult(tuned, log, skipped)


def guided_update(backend, z_t, spec: GuidanceSpec, timestep=None):
    """``w * eps(z_t, positive) - (w - 1) * eps(z_t, negative)``.

    ``z_t`` may be a LatentCode or a (C, h, w) / (B, C, h, w) array.
    """
    values = getattr(z_t, "values", z_t)
    t = getattr(z_t, "timestep", timestep)
    if t is None or t < 1:
        raise ContractError("guided_update needs a noised latent with timestep >= 1")
    z = torch.as_tensor(np.asarray(values, dtype=np.float32))
    single = z.ndim == 3
    if single:
        z = z[None]
    neg = spec.negative_prompt if spec.negative_prompt is not None else backend.tokenize("")
    ts = torch.full((z.shape[0],), int(t), dtype=torch.long)
    with torch.no_grad():
        eps_pos, _ = backend.predict_noise(z, ts, [spec.positive_prompt])
        eps_neg, _ = backend.predict_noise(z, ts, [neg])
    out = guided_noise(eps_pos.double(), eps_neg.double(), float(spec.scale)) if spec.scale != 1.0 \
        else eps_pos.double()
    out = out.numpy()
    return out[0] if single else out


def composite_foreground(image, mask, fill=0.5):
    """Object pixels over a neutral grey fill."""
    m = np.asarray(mask, dtype=bool)[:, :, None]
    return np.where(m, image, np.float32(fill)).astype(np.float32)


@dataclass
class SyntheticSample:
    seed: int
    image: np.ndarray
    background: np.ndarray
    mask: np.ndarray = None
    foreground: np.ndarray = None
    flags: dict = field(default_factory=dict)


def generate_synthetic_set(tuned, object_word, seeds, prelim_backend=None, prelim_config=None, refine_config=None,
                           guidance_scale=1.0, batch_size=32):
    """Sample D' with the object prompt and D'_b with the background prompt,
    then label D' with the refinement pipeline.

    Returns (kept samples, excluded samples). Samples whose refinement is
    degenerate are excluded and flagged.
    """
    from .maskgen import PrelimConfig, compute_preliminary
    from .refine import RefineConfig, refine_batch

    seeds = [int(s) for s in seeds]
    if not seeds:
        return [], []
    prelim_backend = prelim_backend or tuned
    prelim_config = prelim_config or PrelimConfig()
    refine_config = refine_config or RefineConfig()
    fg = tuned.foreground_prompt(object_word)
    bg = tuned.background_prompt()
    neg = [bg] if guidance_scale != 1.0 else None
    samples = []
    for start in range(0, len(seeds), batch_size):
        chunk = seeds[start:start + batch_size]
        imgs = sample_images(tuned, [fg] * len(chunk), chunk, scale=guidance_scale,
                             neg_prompts=None if neg is None else neg * len(chunk))
        bgs = sample_images(tuned, [bg] * len(chunk), [s + 1_000_003 for s in chunk])
        for s, im, b in zip(chunk, imgs, bgs):
            samples.append(SyntheticSample(s, im, b))

    prelims = [compute_preliminary(prelim_backend, s.image, prelim_backend.foreground_prompt(object_word),
                                   prelim_config, seed=s.seed).mask for s in samples]
    refined = refine_batch(tuned, [s.image for s in samples], prelims, [s.seed for s in samples], refine_config)
    kept, excluded = [], []
    for s, r in zip(samples, refined):
        s.mask = r.mask.values
        s.flags = dict(r.mask.flags)
        if r.mask.flags.get("empty_refinement") or r.mask.is_empty():
            excluded.append(s)
            continue
        s.foreground = composite_foreground(s.image, s.mask)
        kept.append(s)
    return kept, excluded


def guidance_sweep(tuned, object_word, scales, seeds, feature_extractor, reference_features):
    """FID of object-prompt samples against reference features for each guidance scale."""
    from .evalkit import fid

    out = {}
    fg = tuned.foreground_prompt(object_word)
    bg = tuned.background_prompt()
    for w in scales:
        imgs = sample_images(tuned, [fg] * len(seeds), list(seeds), scale=float(w),
                             neg_prompts=[bg] * len(seeds) if w != 1.0 else None)
        out[float(w)] = fid(feature_extractor(imgs), reference_features)
    return out
