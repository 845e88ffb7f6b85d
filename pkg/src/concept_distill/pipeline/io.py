"""File helpers: atomic writes, PNG masks, float maps, hashing."""

import hashlib
import json
import os
import tempfile

import numpy as np
from PIL import Image


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _png_bytes(img):
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_mask_png(path, mask):
    """Write a boolean mask as a 1-bit PNG."""
    arr = np.asarray(getattr(mask, "values", mask), dtype=bool)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr).convert("1")))


def load_mask_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def save_image_png(path, image):
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr, mode="RGB")))


def load_image(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_float_map(path, values, metadata=None):
    """Lossless single-channel float32 TIFF plus an optional JSON sidecar."""
    import io

    arr = np.asarray(values, dtype=np.float32)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="F").save(buf, format="TIFF")
    atomic_write_bytes(path, buf.getvalue())
    if metadata is not None:
        atomic_write_text(os.fspath(path) + ".json", json.dumps(metadata, sort_keys=True, indent=1))


def load_float_map(path):
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float32).copy()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()
