"""Deterministic DDIM sampling, guided sampling and blended latent inpainting."""

import warnings

import numpy as np
import torch

from ..errors import ShapeError


def seeded_normal(shape, seed):
    g = torch.Generator().manual_seed(int(seed) % (2**63))
    return torch.randn(shape, generator=g)


def guided_noise(eps_pos, eps_neg, scale):
    """``w * eps_pos - (w - 1) * eps_neg``; the negative branch is skipped at w = 1."""
    if scale == 1.0 or eps_neg is None:
        return eps_pos
    return scale * eps_pos - (scale - 1.0) * eps_neg


def _ddim_step(schedule, z_t, eps, t):
    a_t, s_t = (float(v) for v in schedule.coefficients(t))
    a_p, s_p = (float(v) for v in schedule.coefficients(t - 1))
    x0 = (z_t - s_t * eps) / a_t
    return a_p * x0 + s_p * eps


def _predict(backend, z, t, prompts, neg_prompts, scale):
    ts = torch.full((z.shape[0],), t, dtype=torch.long)
    if neg_prompts is None or scale == 1.0:
        eps, _ = backend.predict_noise(z, ts, prompts)
        return eps
    eps, _ = backend.predict_noise(torch.cat([z, z]), torch.cat([ts, ts]), list(prompts) + list(neg_prompts))
    n = z.shape[0]
    return guided_noise(eps[:n], eps[n:], scale)


@torch.no_grad()
def sample_latents(backend, prompts, seeds, *, scale=1.0, neg_prompts=None, latent_hw=None):
    """Run the full reverse chain for a batch; returns clean latents (B, C, h, w)."""
    desc = backend.descriptor
    c, h, w = desc.latent_shape
    if latent_hw is not None:
        h, w = latent_hw
    z = torch.stack([seeded_normal((c, h, w), s) for s in seeds])
    for t in range(desc.schedule_length, 0, -1):
        eps = _predict(backend, z, t, prompts, neg_prompts, scale)
        z = _ddim_step(backend.schedule, z, eps, t)
    return z


@torch.no_grad()
def sample_images(backend, prompts, seeds, *, scale=1.0, neg_prompts=None, latent_hw=None):
    z = sample_latents(backend, prompts, seeds, scale=scale, neg_prompts=neg_prompts, latent_hw=latent_hw)
    x = backend.decode_batch(z).clamp(0.0, 1.0)
    return x.permute(0, 2, 3, 1).numpy()


def sample_image(backend, prompt, guidance=None, seed=0, latent_hw=None):
    if guidance is None:
        return sample_images(backend, [prompt], [seed], latent_hw=latent_hw)[0]
    neg = guidance.negative_prompt
    if neg is None and guidance.scale != 1.0:
        neg = backend.tokenize("", role="free")
    return sample_images(backend, [guidance.positive_prompt], [seed], scale=float(guidance.scale),
                         neg_prompts=None if neg is None else [neg], latent_hw=latent_hw)[0]


@torch.no_grad()
def inpaint_latents(backend, z_known, masks, prompts, seeds):
    """Blended inpainting for a batch.

    ``z_known`` is (B, C, h, w); ``masks`` is (B, 1, h, w) with 1 marking the
    region to regenerate. At every reverse step the known region is replaced
    by a forward-noised copy of ``z_known`` so the generated region is
    denoised in context.
    """
    schedule = backend.schedule
    T = backend.descriptor.schedule_length
    m = masks.to(z_known.dtype)
    gens = [torch.Generator().manual_seed(int(s) % (2**63)) for s in seeds]

    def fresh():
        return torch.stack([torch.randn(z_known.shape[1:], generator=g) for g in gens])

    a, s = (float(v) for v in schedule.coefficients(T))
    z = a * z_known + s * fresh()
    for t in range(T, 0, -1):
        a, s = (float(v) for v in schedule.coefficients(t))
        known = a * z_known + s * fresh()
        z = known * (1 - m) + z * m
        eps, _ = backend.predict_noise(z, torch.full((z.shape[0],), t, dtype=torch.long), prompts)
        z = _ddim_step(schedule, z, eps, t)
    return z_known * (1 - m) + z * m


def inpaint_latent(backend, z_masked, mask, prompt, seed=0):
    values = np.asarray(getattr(mask, "values", mask))
    if values.shape != tuple(z_masked.spatial_shape):
        raise ShapeError(f"mask shape {values.shape} must equal latent resolution {z_masked.spatial_shape}")
    if values.all():
        warnings.warn("inpainting mask covers the whole latent; generating without context", stacklevel=3)
    m = torch.from_numpy(values.astype(np.float32))[None, None]
    z = inpaint_latents(backend, torch.from_numpy(z_masked.values)[None], m, [prompt], [seed])
    with torch.no_grad():
        x = backend.decode_batch(z).clamp(0.0, 1.0)
    return x[0].permute(1, 2, 0).numpy()
