"""Plain U-Net trained on self-generated foreground labels."""

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_image, check_mask_array
from .errors import ShapeError
from .maskgen import BinaryMask

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CDSEGNET"
MODEL_VERSION = 1


@dataclass
class SegTrainConfig:
    steps: int = 12000
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_crop: int = 128
    # None: evaluate on the full image (centre crop of the image's own size)
    eval_crop: object = None
    base_width: int = 32
    depth: int = 4

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.train_crop < 1:
            raise ValueError("segmentation training values must be positive")
        if self.train_crop % (2 ** (self.depth - 1)):
            raise ValueError(f"train crop must be divisible by {2 ** (self.depth - 1)}")

    @classmethod
    def toy(cls, **overrides):
        """Reduced recipe for 32x32 desk runs."""
        base = dict(steps=1500, batch_size=16, learning_rate=1e-3, train_crop=24, eval_crop=None)
        base.update(overrides)
        return cls(**base)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, in_channels=3, base_width=32, depth=4):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_double_conv(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w_hi, w_lo in zip(widths[::-1][:-1], widths[::-1][1:]):
            self.up.append(nn.ConvTranspose2d(w_hi, w_lo, 2, stride=2))
            self.merge.append(_double_conv(2 * w_lo, w_lo))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def center_crop(arr, size):
    h, w = arr.shape[:2]
    if size is None:
        return arr
    size = int(size)
    if size > h or size > w:
        raise ShapeError(f"crop {size} larger than image {h}x{w}")
    t, l = (h - size) // 2, (w - size) // 2
    return arr[t:t + size, l:l + size]


def _random_crops(images, masks, idx, size, gen):
    xs, ys = [], []
    for i in idx:
        img, m = images[i], masks[i]
        h, w = m.shape
        if size > h or size > w:
            raise ShapeError(f"train crop {size} larger than image {h}x{w}")
        t = int(torch.randint(0, h - size + 1, (1,), generator=gen))
        l = int(torch.randint(0, w - size + 1, (1,), generator=gen))
        xs.append(img[:, t:t + size, l:l + size])
        ys.append(m[None, t:t + size, l:l + size])
    return torch.stack(xs), torch.stack(ys)


def train_segmenter(images, masks, config=SegTrainConfig(), seed=0, log_every=0):
    """Fixed-recipe training with pixel-wise BCE; returns (net, loss log)."""
    if len(images) != len(masks) or not len(images):
        raise ValueError("need the same, non-zero number of images and masks")
    torch.manual_seed(seed)
    net = UNet(base_width=config.base_width, depth=config.depth)
    imgs = [torch.from_numpy(check_image(x)).permute(2, 0, 1).contiguous() for x in images]
    ms = [torch.from_numpy(check_mask_array(m).astype(np.float32)) for m in masks]
    for x, m in zip(imgs, ms):
        if x.shape[1:] != m.shape:
            raise ShapeError(f"image {tuple(x.shape[1:])} and mask {tuple(m.shape)} differ")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    net.train()
    log = []
    for step in range(config.steps):
        idx = torch.randint(0, len(imgs), (config.batch_size,), generator=gen).tolist()
        x, y = _random_crops(imgs, ms, idx, config.train_crop, gen)
        loss = F.binary_cross_entropy_with_logits(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"step": step, "loss": float(loss.item())})
        if log_every and (step + 1) % log_every == 0:
            logger.info("segnet step %d loss %.4f", step + 1, loss.item())
    net.eval()
    return net, log


@torch.no_grad()
def predict_proba(net, images, eval_crop=None, batch_size=64):
    xs = [center_crop(check_image(x), eval_crop) for x in images]
    out = []
    for start in range(0, len(xs), batch_size):
        batch = torch.from_numpy(np.stack(xs[start:start + batch_size])).permute(0, 3, 1, 2)
        out.append(torch.sigmoid(net(batch))[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def predict(net, image, eval_crop=None):
    """Centre-cropped prediction; a probability of exactly 0.5 is background."""
    prob = predict_proba(net, [image], eval_crop)[0]
    return BinaryMask(prob > 0.5, "pixel", "predicted")


class ForegroundSegmenter(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper: ``fit(images, masks)``, ``predict(images)``."""

    def __init__(self, steps=12000, batch_size=32, learning_rate=1e-3, train_crop=128, eval_crop=None,
                 base_width=32, depth=4, seed=0):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.train_crop = train_crop
        self.eval_crop = eval_crop
        self.base_width = base_width
        self.depth = depth
        self.seed = seed

    def _config(self):
        return SegTrainConfig(self.steps, self.batch_size, self.learning_rate, self.train_crop, self.eval_crop,
                              self.base_width, self.depth)

    def fit(self, X, y):
        self.net_, self.loss_curve_ = train_segmenter(X, y, self._config(), seed=self.seed)
        self.classes_ = np.array([False, True])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        p = predict_proba(self.net_, X, self.eval_crop)
        return np.stack([1 - p, p], axis=-1)

    def predict(self, X):
        check_is_fitted(self, "net_")
        return predict_proba(self.net_, X, self.eval_crop) > 0.5

    def score(self, X, y):
        from .evalkit import iou

        pred = self.predict(X)
        return float(np.mean([iou(p, center_crop(check_mask_array(t), self.eval_crop)) for p, t in zip(pred, y)]))

    def to_bytes(self):
        check_is_fitted(self, "net_")
        meta = json.dumps({"params": self.get_params(), "config": asdict(self._config())}, sort_keys=True).encode()
        buf = io.BytesIO()
        torch.save(self.net_.state_dict(), buf)
        return MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(meta)) + meta + buf.getvalue()

    def save(self, path):
        from .pipeline.io import atomic_write_bytes, atomic_write_text

        atomic_write_bytes(path, self.to_bytes())
        atomic_write_text(str(path) + ".json", json.dumps(
            {"version": MODEL_VERSION, "config": asdict(self._config()), "seed": self.seed}, sort_keys=True, indent=1))

    @classmethod
    def from_bytes(cls, blob):
        if not blob.startswith(MODEL_MAGIC):
            raise ValueError("not a segmentation model blob")
        off = len(MODEL_MAGIC)
        version, n = struct.unpack("<HI", blob[off:off + 6])
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported segmentation model version {version}")
        meta = json.loads(blob[off + 6:off + 6 + n])
        est = cls(**meta["params"])
        est.net_ = UNet(base_width=est.base_width, depth=est.depth)
        est.net_.load_state_dict(torch.load(io.BytesIO(blob[off + 6 + n:]), weights_only=True))
        est.net_.eval()
        est.classes_ = np.array([False, True])
        return est

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
