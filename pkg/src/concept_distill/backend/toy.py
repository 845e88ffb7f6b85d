"""Small trainable latent denoiser used for desk-scale runs.

The autoencoder is a fixed linear map (bilinear x4 upsampling with an
orthonormal 4->3 channel mix); encoding is its exact pseudo-inverse, so
``decode(encode(x)) == x`` for every image in the decoder's range. The
denoiser is a two-level conv net with one cross-attention layer per level
over frozen token embeddings.
"""

import copy
import io
import json
import logging
import math
import struct
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .base import BackendDescriptor, DiffusionBackend, NoiseSchedule, PromptSpec, prompt_batch

logger = logging.getLogger(__name__)

VOCABULARY = (
    "<sos>", "<pad>", "a", "photo", "of", "background",
    "circle", "square", "triangle", "diamond", "ellipse", "ring", "cross", "star", "blob", "object",
)
SOS, PAD = 0, 1
LATENT_CHANNELS = 4
SPATIAL_SCALE = 4
SCHEDULE_LENGTH = 50
BLOB_MAGIC = b"CDTOYBK"
BLOB_VERSION = 1
EMBED_DIM = 32

_CHANNEL_MIX = torch.tensor([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1]], dtype=torch.float64) / 2.0


class ToyTokenizer:
    """Whitespace words split greedily into the longest vocabulary pieces."""

    def __init__(self, vocabulary=VOCABULARY):
        self.vocabulary = tuple(vocabulary)
        self.index = {w: i for i, w in enumerate(self.vocabulary)}
        self._pieces = sorted((w for w in self.vocabulary if not w.startswith("<")), key=len, reverse=True)

    def split_word(self, word):
        out, rest = [], word
        while rest:
            for piece in self._pieces:
                if rest.startswith(piece):
                    out.append(piece)
                    rest = rest[len(piece):]
                    break
            else:
                raise ValueError(f"word {word!r} cannot be tokenized with the toy vocabulary")
        return out

    def __call__(self, text, role="free", target_words=None):
        words = text.lower().split()
        tokens, groups = ["<sos>"], []
        for word in words:
            pieces = self.split_word(word)
            groups.append(tuple(range(len(tokens), len(tokens) + len(pieces))))
            tokens.extend(pieces)
        if target_words is None:
            target_words = words[-1:]
        targets = []
        for tw in target_words:
            hits = [g for w, g in zip(words, groups) if w == tw.lower()]
            if not hits:
                raise ValueError(f"target word {tw!r} not in prompt {text!r}")
            targets.extend(hits[-1])
        if not targets:
            targets = [0]
        return PromptSpec(text=text, token_ids=tuple(self.index[t] for t in tokens),
                          target_token_indices=tuple(targets), role=role, tokens=tuple(tokens),
                          word_groups=tuple(groups))


@lru_cache(maxsize=16)
def _bilinear_matrices(size, factor):
    """Upsampling matrix U (size x size/factor) and its pseudo-inverse."""
    small = size // factor
    eye = torch.eye(small, dtype=torch.float64)
    up = F.interpolate(eye[:, None, :], size=size, mode="linear", align_corners=False)[:, 0, :].T
    return up.contiguous(), torch.linalg.pinv(up).contiguous()


class LinearAutoencoder:
    def __init__(self, scale=SPATIAL_SCALE, latent_scale=2.0):
        self.scale = scale
        self.latent_scale = latent_scale

    def encode(self, x):
        """(B, 3, H, W) in [0, 1] -> (B, 4, H/s, W/s)."""
        _, uh_inv = _bilinear_matrices(x.shape[2], self.scale)
        _, uw_inv = _bilinear_matrices(x.shape[3], self.scale)
        p = (2.0 * x.double() - 1.0)
        z = torch.einsum("ck,bcHW,hH,wW->bkhw", _CHANNEL_MIX, p, uh_inv, uw_inv)
        return (self.latent_scale * z).float()

    def decode(self, z):
        h, w = z.shape[2] * self.scale, z.shape[3] * self.scale
        uh, _ = _bilinear_matrices(h, self.scale)
        uw, _ = _bilinear_matrices(w, self.scale)
        p = torch.einsum("ck,bkhw,Hh,Ww->bcHW", _CHANNEL_MIX, z.double() / self.latent_scale, uh, uw)
        return ((p + 1.0) / 2.0).float()


def token_embeddings(vocab_size=len(VOCABULARY), dim=EMBED_DIM, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(vocab_size, dim, generator=g)


def timestep_embedding(t, dim=64):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, dim, ctx_dim, heads=2):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, ctx, keep):
        b, c, h, w = x.shape
        d = c // self.heads
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2)).view(b, h * w, self.heads, d).transpose(1, 2)
        k = self.to_k(ctx).view(b, -1, self.heads, d).transpose(1, 2)
        v = self.to_v(ctx).view(b, -1, self.heads, d).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d)
        logits = logits.masked_fill(~keep[:, None, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).view(b, c, h, w), probs


class ToyDenoiser(nn.Module):
    def __init__(self, channels=LATENT_CHANNELS, widths=(32, 64), heads=2, ctx_dim=EMBED_DIM):
        super().__init__()
        c0, c1 = widths
        tdim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(64, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, tdim)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c1, c1, tdim)
        self.attn_mid = CrossAttention(c1, ctx_dim, heads)
        self.mid2 = ResBlock(c1, c1, tdim)
        self.up = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, tdim)
        self.attn_dec = CrossAttention(c0, ctx_dim, heads)
        self.dec1 = ResBlock(c0, c0, tdim)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, channels, 3, padding=1)
        self.register_buffer("embeddings", token_embeddings(dim=ctx_dim))

    def forward(self, z, t, token_ids, keep):
        temb = self.time_mlp(timestep_embedding(t))
        ctx = self.embeddings[token_ids]
        h0 = self.enc0(self.conv_in(z), temb)
        h = self.mid1(self.down(h0), temb)
        h, p_mid = self.attn_mid(h, ctx, keep)
        h = self.mid2(h, temb)
        h = self.up(F.interpolate(h, size=h0.shape[2:], mode="nearest"))
        h = self.dec0(torch.cat([h, h0], dim=1), temb)
        h, p_dec = self.attn_dec(h, ctx, keep)
        h = self.dec1(h, temb)
        return self.conv_out(F.silu(self.norm_out(h))), [p_mid, p_dec]


class ToyBackend(DiffusionBackend):
    """Toy latent-diffusion backend; see module docstring for the geometry."""

    def __init__(self, image_size=32, widths=(32, 64), heads=2, seed=0):
        self.image_size = int(image_size)
        self.widths = tuple(widths)
        self.heads = heads
        self.seed = seed
        self.tokenizer = ToyTokenizer()
        self.autoencoder = LinearAutoencoder()
        self.schedule = NoiseSchedule(SCHEDULE_LENGTH)
        torch.manual_seed(seed)
        self.net = ToyDenoiser(widths=self.widths, heads=heads)
        self.net.eval()
        self.trained = False
        lat = self.image_size // SPATIAL_SCALE
        self.descriptor = BackendDescriptor(
            kind="toy", latent_channels=LATENT_CHANNELS, spatial_scale=SPATIAL_SCALE,
            schedule_length=SCHEDULE_LENGTH, image_size=(self.image_size, self.image_size),
            layer_resolutions=((lat // 2, lat // 2), (lat, lat)), vocabulary=VOCABULARY,
            tokenizer_id="toy-greedy-v1",
        )

    @property
    def is_ready(self):
        return self.trained

    def tokenize(self, text, role="free", target_words=None):
        return self.tokenizer(text, role=role, target_words=target_words)

    def encode_batch(self, images):
        return self.autoencoder.encode(images)

    def decode_batch(self, latents):
        return self.autoencoder.decode(latents)

    def predict_noise(self, latents, timesteps, prompts, capture=False):
        if len(prompts) == 1 and latents.shape[0] > 1:
            prompts = list(prompts) * latents.shape[0]
        ids, keep = prompt_batch(list(prompts), PAD)
        eps, probs = self.net(latents, timesteps.to(torch.long), ids, keep)
        return eps, (probs if capture else [])

    def copy(self):
        return copy.deepcopy(self)

    def parameters_vector(self):
        return torch.cat([p.detach().flatten() for p in self.net.parameters()])

    # -- persistence --------------------------------------------------------
    def to_bytes(self):
        meta = json.dumps({"image_size": self.image_size, "widths": list(self.widths),
                           "heads": self.heads, "seed": self.seed, "trained": self.trained},
                          sort_keys=True).encode()
        buf = io.BytesIO()
        torch.save(self.net.state_dict(), buf)
        return BLOB_MAGIC + struct.pack("<HI", BLOB_VERSION, len(meta)) + meta + buf.getvalue()

    def save(self, path):
        from ..pipeline.io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        if not blob.startswith(BLOB_MAGIC):
            raise ValueError("not a toy backend weight blob")
        off = len(BLOB_MAGIC)
        version, n = struct.unpack("<HI", blob[off: off + 6])
        if version != BLOB_VERSION:
            raise ValueError(f"unsupported toy backend blob version {version}")
        meta = json.loads(blob[off + 6: off + 6 + n])
        backend = cls(meta["image_size"], tuple(meta["widths"]), meta["heads"], meta["seed"])
        state = torch.load(io.BytesIO(blob[off + 6 + n:]), weights_only=True)
        backend.net.load_state_dict(state)
        backend.trained = bool(meta["trained"])
        return backend

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def denoising_loss(backend, z0, prompts, generator, weights=None):
    """Epsilon-prediction MSE at uniformly drawn timesteps.

    ``weights`` (B, 1, h, w) restricts the loss to a region; positions with
    zero weight contribute neither loss nor gradient.
    """
    b = z0.shape[0]
    T = backend.descriptor.schedule_length
    t = torch.randint(1, T + 1, (b,), generator=generator)
    noise = torch.randn(z0.shape, generator=generator)
    a, s = backend.schedule.coefficients(t.numpy())
    a = torch.from_numpy(a).float()[:, None, None, None]
    s = torch.from_numpy(s).float()[:, None, None, None]
    eps, _ = backend.predict_noise(a * z0 + s * noise, t, prompts)
    return masked_mse(eps, noise, weights)


def masked_mse(pred, target, weights=None):
    sq = (pred - target) ** 2
    if weights is None:
        return sq.mean()
    w = weights.expand_as(sq)
    total = w.sum()
    if total <= 0:
        return (sq * 0.0).sum()
    return (sq * w).sum() / total


def pretrain_toy_backend(image_size=32, steps=6000, batch_size=32, lr=1e-3, corpus_size=4000, seed=0,
                         log_every=500):
    """Train the stand-in foundation model on a rendered shape corpus."""
    from ..toydata import OBJECT_WORDS, render_corpus

    backend = ToyBackend(image_size=image_size, seed=seed)
    images, _, words = render_corpus(corpus_size, seed=seed + 1, size=image_size, words=OBJECT_WORDS)
    with torch.no_grad():
        latents = backend.encode_batch(torch.from_numpy(images).permute(0, 3, 1, 2))
    fg = {w: backend.foreground_prompt(w) for w in OBJECT_WORDS}
    bg = backend.background_prompt()
    prompts = [bg if w is None else fg[w] for w in words]
    gen = torch.Generator().manual_seed(seed + 2)
    opt = torch.optim.Adam(backend.net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr * 0.05)
    backend.net.train()
    running = None
    for step in range(steps):
        idx = torch.randint(0, corpus_size, (batch_size,), generator=gen)
        loss = denoising_loss(backend, latents[idx], [prompts[i] for i in idx.tolist()], gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        running = loss.item() if running is None else 0.99 * running + 0.01 * loss.item()
        if log_every and (step + 1) % log_every == 0:
            logger.info("toy pretrain step %d loss %.4f", step + 1, running)
    backend.net.eval()
    backend.trained = True
    return backend
