"""Procedural shape scenes with exact ground-truth masks.

Every object word owns a hue and a geometry family, so a prompt word is
enough to tell a denoiser what colour the object region should take.
Backgrounds are desaturated colour fields with a gradient and smooth
low-amplitude texture.
"""

import colorsys
import math

import numpy as np
from PIL import Image, ImageDraw

# hue and geometry per object word
OBJECT_STYLES = {
    "circle": (0.00, "disc"),
    "square": (0.33, "square"),
    "triangle": (0.62, "triangle"),
    "diamond": (0.14, "diamond"),
    "ellipse": (0.90, "ellipse"),
    "ring": (0.50, "ring"),
    "cross": (0.78, "cross"),
    "star": (0.07, "star"),
    "blob": (0.03, "blob"),
}
OBJECT_WORDS = tuple(OBJECT_STYLES)
MIN_AREA, MAX_AREA = 0.05, 0.50


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _smooth_field(rng, size, cells):
    from scipy.ndimage import zoom

    coarse = rng.normal(size=(cells, cells))
    return zoom(coarse, size / cells, order=1)[:size, :size]


def render_background(rng, size):
    base = _hsv(rng.uniform(), rng.uniform(0.05, 0.3), rng.uniform(0.35, 0.8))
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
    angle = rng.uniform(0, 2 * np.pi)
    gradient = 0.12 * (np.cos(angle) * xx + np.sin(angle) * yy)
    texture = 0.025 * _smooth_field(rng, size, 4) + 0.008 * rng.normal(size=(size, size))
    img = base[None, None, :] + (gradient + texture)[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _polygon(cx, cy, r, n, rot, inner=None):
    """Regular n-gon, or an n-pointed star when ``inner`` (radius ratio) is given."""
    if inner is None:
        radii = [r] * n
    else:
        radii = [r, r * inner] * n
    step = 2 * np.pi / len(radii)
    return [(cx + rad * math.cos(rot + i * step), cy + rad * math.sin(rot + i * step))
            for i, rad in enumerate(radii)]


def _draw_geometry(kind, rng, size, scale):
    """Draw one shape of the family on a supersampled canvas; returns a bool mask."""
    ss = 4
    canvas = Image.new("L", (size * ss, size * ss), 0)
    d = ImageDraw.Draw(canvas)
    r = scale * size * ss
    margin = r * 1.05
    lo, hi = margin, size * ss - margin
    if hi <= lo:
        lo = hi = size * ss / 2
    cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
    rot = rng.uniform(0, 2 * np.pi)
    if kind == "disc":
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif kind == "ellipse":
        a, b = r, r * rng.uniform(0.45, 0.75)
        pts = [(cx + a * math.cos(u) * math.cos(rot) - b * math.sin(u) * math.sin(rot),
                cy + a * math.cos(u) * math.sin(rot) + b * math.sin(u) * math.cos(rot))
               for u in np.linspace(0, 2 * np.pi, 48, endpoint=False)]
        d.polygon(pts, fill=255)
    elif kind == "square":
        d.polygon(_polygon(cx, cy, r, 4, rng.uniform(-0.3, 0.3) + np.pi / 4), fill=255)
    elif kind == "diamond":
        d.polygon(_polygon(cx, cy, r, 4, 0.0), fill=255)
    elif kind == "triangle":
        d.polygon(_polygon(cx, cy, r, 3, rot), fill=255)
    elif kind == "star":
        d.polygon(_polygon(cx, cy, r, 5, rot, inner=0.5), fill=255)
    elif kind == "ring":
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        ri = r * 0.5
        d.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    elif kind == "cross":
        t = r * 0.38
        d.rectangle([cx - r, cy - t, cx + r, cy + t], fill=255)
        d.rectangle([cx - t, cy - r, cx + t, cy + r], fill=255)
    elif kind == "blob":
        for _ in range(int(rng.integers(2, 5))):
            rr = r * rng.uniform(0.45, 0.75)
            ox, oy = rng.uniform(-0.5, 0.5, size=2) * r
            d.ellipse([cx + ox - rr, cy + oy - rr, cx + ox + rr, cy + oy + rr], fill=255)
    else:
        raise ValueError(f"unknown geometry {kind!r}")
    small = np.asarray(canvas.resize((size, size), Image.BOX), dtype=np.float32) / 255.0
    return small >= 0.5


def render_object_mask(word, rng, size, area_range=(MIN_AREA, MAX_AREA), max_tries=200):
    hue, kind = OBJECT_STYLES[word]
    lo, hi = area_range
    for _ in range(max_tries):
        scale = rng.uniform(0.12, 0.45)
        mask = _draw_geometry(kind, rng, size, scale)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask
    raise RuntimeError(f"could not render a {word!r} with area in {area_range}")


def render_scene(word, rng, size=32, area_range=(MIN_AREA, MAX_AREA)):
    """Return ``(image, mask)``; ``word=None`` renders background only."""
    bg = render_background(rng, size)
    if word is None:
        return bg, np.zeros((size, size), dtype=bool)
    mask = render_object_mask(word, rng, size, area_range)
    hue, _ = OBJECT_STYLES[word]
    color = _hsv(hue + rng.uniform(-0.03, 0.03), rng.uniform(0.7, 1.0), rng.uniform(0.65, 1.0))
    yy = np.linspace(-0.5, 0.5, size)[:, None, None]
    obj = np.clip(color[None, None, :] - 0.1 * yy + 0.01 * rng.normal(size=(size, size, 3)), 0, 1)
    img = np.where(mask[:, :, None], obj, bg).astype(np.float32)
    return img, mask


def render_corpus(count, seed, size=32, words=OBJECT_WORDS, background_fraction=0.2):
    """Render a mixed corpus; returns (images, masks, words) with ``None`` for background scenes."""
    rng = np.random.default_rng(seed)
    images, masks, labels = [], [], []
    for _ in range(count):
        word = None if rng.uniform() < background_fraction else words[int(rng.integers(len(words)))]
        img, m = render_scene(word, rng, size)
        images.append(img)
        masks.append(m)
        labels.append(word)
    return np.stack(images), np.stack(masks), labels
