"""Backend contract: latent codes, prompts, denoise results and the abstract backend."""

import abc
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..errors import BackendNotReady, ContractError, ShapeError

FOREGROUND_TEMPLATE = "a photo of a {object}"
BACKGROUND_PROMPT = "a photo of a background"
ROLES = ("foreground", "background", "free")


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray  # (channels, height, width)
    timestep: int = 0
    spatial_scale: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[1] <= 0 or v.shape[2] <= 0:
            raise ShapeError(f"latent must be (C, H, W) with H, W > 0, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent contains non-finite values")
        if self.timestep < 0:
            raise ContractError("timestep must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def spatial_shape(self):
        return self.values.shape[1:]


@dataclass(frozen=True)
class PromptSpec:
    text: str
    token_ids: Tuple[int, ...]
    target_token_indices: Tuple[int, ...]
    role: str = "free"
    tokens: Tuple[str, ...] = ()
    # token positions of each whitespace word (excluding start/pad tokens)
    word_groups: Tuple[Tuple[int, ...], ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        n = len(self.token_ids)
        if not self.target_token_indices or any(i < 0 or i >= n for i in self.target_token_indices):
            raise ContractError(f"target token indices {self.target_token_indices} outside 0..{n - 1}")


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance with a substitutable negative branch."""

    scale: float
    positive_prompt: PromptSpec
    negative_prompt: Optional[PromptSpec] = None

    def __post_init__(self):
        if not np.isfinite(self.scale):
            raise ValueError("guidance scale must be finite")


@dataclass
class DenoiseResult:
    predicted_update: np.ndarray
    attention_records: list = field(default_factory=list)


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    latent_channels: int
    spatial_scale: int
    schedule_length: int
    image_size: Tuple[int, int]
    layer_resolutions: Tuple[Tuple[int, int], ...]
    vocabulary: Tuple[str, ...] = ()
    tokenizer_id: str = ""
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.kind not in ("toy", "checkpoint-adapter"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.schedule_length < 1:
            raise ValueError("schedule length T must be >= 1")
        if not self.layer_resolutions:
            raise ValueError("a backend needs at least one cross-attention layer")

    @property
    def latent_shape(self):
        h, w = self.image_size
        return (self.latent_channels, h // self.spatial_scale, w // self.spatial_scale)


class NoiseSchedule:
    """Linear beta schedule with cumulative products for forward noising."""

    def __init__(self, length=50, beta_start=1e-3, beta_end=0.2):
        self.length = int(length)
        self.beta_start = beta_start
        self.beta_end = beta_end
        betas = np.linspace(beta_start, beta_end, self.length, dtype=np.float64)
        # index 0 is the clean sample; alphas_cumprod[t] for t in 0..T
        self.betas = np.concatenate([[0.0], betas])
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    def check_timestep(self, t, allow_zero=True):
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.length:
            raise ContractError(f"timestep {t} outside [{lo}, {self.length}]")

    def coefficients(self, t):
        """Return (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) as float64 arrays."""
        ab = self.alphas_cumprod[np.asarray(t)]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


class DiffusionBackend(abc.ABC):
    """Text-conditioned latent denoiser with attention capture.

    Subclasses implement the batched primitives (``encode_batch``,
    ``decode_batch``, ``predict_noise``); the per-item operations are
    provided here on top of them so every backend shares the same checks.
    """

    descriptor: BackendDescriptor
    schedule: NoiseSchedule

    # -- primitives -------------------------------------------------------
    @abc.abstractmethod
    def tokenize(self, text, role="free", target_words=None) -> PromptSpec:
        ...

    @abc.abstractmethod
    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) pixels in [0, 1] -> (B, C, h, w) latents."""

    @abc.abstractmethod
    def decode_batch(self, latents: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w) latents -> (B, 3, H, W) pixels."""

    @abc.abstractmethod
    def predict_noise(self, latents, timesteps, prompts: Sequence[PromptSpec], capture=False):
        """Return ``(eps, attention)`` where attention is a list with one
        (B, heads, h*w, L) probability tensor per cross-attention layer
        (empty when ``capture`` is false)."""

    @property
    def is_ready(self):
        return True

    def _require_ready(self):
        if not self.is_ready:
            raise BackendNotReady(f"{type(self).__name__} has no trained weights")

    # -- prompts ------------------------------------------------------------
    def foreground_prompt(self, object_word):
        return self.tokenize(FOREGROUND_TEMPLATE.format(object=object_word), role="foreground",
                             target_words=[object_word])

    def background_prompt(self):
        return self.tokenize(BACKGROUND_PROMPT, role="background", target_words=["background"])

    # -- single-item operations --------------------------------------------
    def encode(self, image) -> LatentCode:
        from .._validation import check_image

        x = check_image(image, divisible_by=self.descriptor.spatial_scale)
        with torch.no_grad():
            z = self.encode_batch(torch.from_numpy(x).permute(2, 0, 1)[None])
        return LatentCode(z[0].numpy(), timestep=0, spatial_scale=self.descriptor.spatial_scale)

    def decode(self, latent: LatentCode) -> np.ndarray:
        with torch.no_grad():
            x = self.decode_batch(torch.from_numpy(latent.values)[None])
        return x[0].permute(1, 2, 0).numpy()

    def add_noise(self, z0: LatentCode, t: int, noise) -> LatentCode:
        self.schedule.check_timestep(t)
        noise = np.asarray(noise, dtype=np.float32)
        if noise.shape != z0.values.shape:
            raise ShapeError(f"noise shape {noise.shape} does not match latent {z0.values.shape}")
        if t == 0:
            return z0
        a, s = self.schedule.coefficients(t)
        values = (a * z0.values.astype(np.float64) + s * noise.astype(np.float64)).astype(np.float32)
        return LatentCode(values, timestep=int(t), spatial_scale=z0.spatial_scale)

    def denoise_step(self, z: LatentCode, prompt: PromptSpec, capture_attention=False) -> DenoiseResult:
        from ..probe import AttentionRecord

        self._require_ready()
        if z.timestep < 1:
            raise ContractError("denoise_step needs a noised latent (timestep >= 1)")
        self.schedule.check_timestep(z.timestep)
        with torch.no_grad():
            eps, attn = self.predict_noise(torch.from_numpy(z.values)[None],
                                           torch.tensor([z.timestep]), [prompt], capture=capture_attention)
        records = []
        h, w = z.spatial_shape
        for layer, probs in enumerate(attn):
            n_heads, hw = probs.shape[1], probs.shape[2]
            shape = _layer_shape(hw, h, w)
            for head in range(n_heads):
                records.append(AttentionRecord(layer, head, probs[0, head].numpy(), shape,
                                               timestep=z.timestep))
        return DenoiseResult(eps[0].numpy(), records)

    def inpaint(self, z_masked: LatentCode, mask, prompt: PromptSpec, seed=0) -> np.ndarray:
        from .sampling import inpaint_latent

        self._require_ready()
        return inpaint_latent(self, z_masked, mask, prompt, seed)

    def sample(self, prompt: PromptSpec, guidance: Optional[GuidanceSpec] = None, seed=0,
               latent_hw=None) -> np.ndarray:
        from .sampling import sample_image

        self._require_ready()
        return sample_image(self, prompt, guidance, seed, latent_hw=latent_hw)


def _layer_shape(hw, h, w):
    """Recover the (rows, cols) of a flattened attention layer with the latent's aspect."""
    factor = int(round((h * w / hw) ** 0.5))
    factor = max(factor, 1)
    shape = (h // factor, w // factor)
    if shape[0] * shape[1] != hw:
        raise ShapeError(f"cannot infer layer shape for {hw} positions on a {h}x{w} latent")
    return shape


def layer_shape(hw, h, w) -> Tuple[int, int]:
    return _layer_shape(hw, h, w)


def prompt_batch(prompts: List[PromptSpec], pad_id: int):
    """Stack token ids into (B, L) with a key-padding mask (True = real token)."""
    length = max(len(p.token_ids) for p in prompts)
    ids = torch.full((len(prompts), length), pad_id, dtype=torch.long)
    keep = torch.zeros((len(prompts), length), dtype=torch.bool)
    for i, p in enumerate(prompts):
        ids[i, : len(p.token_ids)] = torch.tensor(p.token_ids)
        keep[i, : len(p.token_ids)] = True
    return ids, keep
