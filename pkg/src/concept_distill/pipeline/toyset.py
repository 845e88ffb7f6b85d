"""Write a procedural toy dataset to disk in the manifest layout."""

import os

import numpy as np

from ..toydata import render_scene
from .io import save_image_png, save_mask_png
from .manifest import DatasetManifest, ManifestRecord


def make_toy_dataset(root, count=500, seed=0, words=("blob",), size=32, test_fraction=0.3):
    """Render ``count`` scenes under ``root``; output is byte-identical for a fixed seed.

    Writes images/NNNNN.png, gt/NNNNN.png and manifest.jsonl. The last
    ``test_fraction`` of records (after a seeded shuffle) form the test split.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    n_test = int(round(count * test_fraction))
    order = rng.permutation(count)
    test_ids = set(order[:n_test].tolist())
    records = []
    for i in range(count):
        word = words[i % len(words)]
        img, mask = render_scene(word, rng, size)
        rid = f"{i:05d}"
        image_rel = os.path.join("images", rid + ".png")
        gt_rel = os.path.join("gt", rid + ".png")
        save_image_png(os.path.join(root, image_rel), img)
        save_mask_png(os.path.join(root, gt_rel), mask)
        rows, cols = np.nonzero(mask)
        bbox = [int(rows.min()), int(cols.min()), int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1)]
        records.append(ManifestRecord(rid, image_rel, word, "test" if i in test_ids else "train", gt_rel, bbox))
    manifest = DatasetManifest(
        "toy", records, notes={"generator": f"toy scenes seed={seed} size={size} words={','.join(words)}"},
        root=os.path.abspath(root))
    manifest.save()
    return manifest
