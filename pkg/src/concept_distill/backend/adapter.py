"""Adapter for external pretrained latent-diffusion checkpoints.

The descriptor is a plain ``key = value`` text file::

    kind = checkpoint-adapter
    checkpoint = /models/ldm-text2img
    tokenizer = openai/clip-vit-large-patch14
    layers = down_blocks.1, up_blocks.1, up_blocks.2
    latent_channels = 4
    spatial_scale = 4
    image_size = 256
    schedule_length = 50

Running it needs the optional ``diffusers`` package and local weights.
"""

import os

import numpy as np
import torch

from ..errors import BackendNotReady
from .base import BackendDescriptor, DiffusionBackend, NoiseSchedule, PromptSpec

TOKEN_LENGTH = 77


def parse_descriptor_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"descriptor line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    required = ("kind", "latent_channels", "spatial_scale", "image_size", "schedule_length", "layers")
    missing = [k for k in required if k not in values]
    if missing:
        raise ValueError(f"descriptor missing keys: {', '.join(missing)}")
    size = int(values["image_size"])
    scale = int(values["spatial_scale"])
    layers = [s.strip() for s in values["layers"].split(",") if s.strip()]
    lat = size // scale
    # resolution per named layer is only known once the model is loaded; record the latent grid
    res = tuple((lat, lat) for _ in layers)
    return BackendDescriptor(
        kind=values["kind"], latent_channels=int(values["latent_channels"]), spatial_scale=scale,
        schedule_length=int(values["schedule_length"]), image_size=(size, size), layer_resolutions=res,
        vocabulary=tuple(layers), tokenizer_id=values.get("tokenizer", ""),
        checkpoint_path=values.get("checkpoint", ""),
    )


def load_descriptor(path):
    with open(path, encoding="utf-8") as fh:
        return parse_descriptor_text(fh.read())


def latent_grid(descriptor, image_shape):
    """Latent (h, w) produced for an image of ``image_shape`` (H, W)."""
    H, W = image_shape[:2]
    s = descriptor.spatial_scale
    if H % s or W % s:
        raise ValueError(f"image {H}x{W} not divisible by spatial scale {s}")
    return H // s, W // s


class _CaptureProcessor:
    """diffusers attention processor that records cross-attention probabilities."""

    def __init__(self, store, name):
        self.store = store
        self.name = name

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        is_cross = encoder_hidden_states is not None
        context = encoder_hidden_states if is_cross else hidden_states
        q = attn.head_to_batch_dim(attn.to_q(hidden_states))
        k = attn.head_to_batch_dim(attn.to_k(context))
        v = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(q, k, attention_mask)
        if is_cross and self.store.get("active"):
            b = hidden_states.shape[0]
            self.store.setdefault("maps", []).append(probs.view(b, attn.heads, *probs.shape[1:]).detach().cpu())
        out = attn.batch_to_head_dim(torch.bmm(probs, v))
        return attn.to_out[1](attn.to_out[0](out))


class CheckpointBackend(DiffusionBackend):
    """Backend over a diffusers text-to-image pipeline; same contract as the toy one."""

    def __init__(self, descriptor):
        try:
            from diffusers import DiffusionPipeline
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendNotReady("the checkpoint adapter needs the 'diffusers' package") from exc
        if not os.path.exists(descriptor.checkpoint_path):
            raise BackendNotReady(f"checkpoint not found: {descriptor.checkpoint_path}")
        self.descriptor = descriptor
        self.schedule = NoiseSchedule(descriptor.schedule_length)
        self.pipe = DiffusionPipeline.from_pretrained(descriptor.checkpoint_path)
        self.tokenizer = self.pipe.tokenizer
        self._store = {}
        procs = {}
        for name in self.pipe.unet.attn_processors:
            procs[name] = _CaptureProcessor(self._store, name)
        self.pipe.unet.set_attn_processor(procs)
        ac = self.pipe.scheduler.alphas_cumprod.double().numpy()
        idx = np.linspace(0, len(ac) - 1, descriptor.schedule_length).round().astype(int)
        self.schedule.alphas_cumprod = np.concatenate([[1.0], ac[idx]])
        self._timesteps = np.concatenate([[0], idx])

    def tokenize(self, text, role="free", target_words=None):
        enc = self.tokenizer(text, padding="max_length", max_length=TOKEN_LENGTH, truncation=True)
        ids = tuple(enc["input_ids"])
        tokens = tuple(self.tokenizer.convert_ids_to_tokens(list(ids)))
        words = text.lower().split()
        groups, pos = [], 1
        for w in words:
            n = len(self.tokenizer(w, add_special_tokens=False)["input_ids"])
            groups.append(tuple(range(pos, pos + n)))
            pos += n
        target_words = target_words or words[-1:]
        targets = [i for w, g in zip(words, groups) if w in [t.lower() for t in target_words] for i in g] or [0]
        return PromptSpec(text, ids, tuple(targets), role, tokens, tuple(groups))

    def encode_batch(self, images):
        vae = self.pipe.vae
        with torch.no_grad():
            return vae.encode(images * 2 - 1).latent_dist.mean * vae.config.scaling_factor

    def decode_batch(self, latents):
        vae = self.pipe.vae
        with torch.no_grad():
            return (vae.decode(latents / vae.config.scaling_factor).sample + 1) / 2

    def predict_noise(self, latents, timesteps, prompts, capture=False):
        if len(prompts) == 1 and latents.shape[0] > 1:
            prompts = list(prompts) * latents.shape[0]
        ids = torch.tensor([p.token_ids for p in prompts])
        with torch.no_grad():
            ctx = self.pipe.text_encoder(ids)[0]
        self._store.clear()
        self._store["active"] = capture
        t = torch.from_numpy(self._timesteps[timesteps.numpy()])
        with torch.no_grad():
            eps = self.pipe.unet(latents, t, encoder_hidden_states=ctx).sample
        maps = self._store.get("maps", []) if capture else []
        self._store.clear()
        return eps, maps
