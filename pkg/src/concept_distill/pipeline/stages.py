"""Pipeline stages over a dataset manifest.

Each stage writes its artifacts under the manifest's folder, records a
content hash of its inputs in the manifest header and is skipped when
rerun with the same inputs. Per-record failures set a flag on the record
instead of stopping the stage.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
import torch.nn.functional as F

from .. import evalkit
from ..backend.sampling import sample_images
from ..backend.toy import ToyBackend, pretrain_toy_backend
from ..distill import finetune, generate_synthetic_set
from ..errors import StageDependencyError
from ..maskgen import compute_preliminary, upsample_mask
from ..refine import refine_batch
from ..segnet import ForegroundSegmenter, predict_proba
from .io import (atomic_write_text, file_sha256, load_float_map, load_image, load_mask_png, save_float_map,
                 save_image_png, save_mask_png, stable_hash)
from .manifest import DatasetManifest, ManifestRecord

logger = logging.getLogger(__name__)

STAGES = ("prelim", "finetune", "refine", "synth", "segtrain", "eval")
DEPENDS = {
    "prelim": (),
    "finetune": ("prelim",),
    "refine": ("prelim", "finetune"),
    "synth": ("prelim", "finetune"),
    "segtrain": ("refine",),
    "eval": ("prelim", "refine", "segtrain"),
}
SEED_SPACE = 2 ** 31 - 1


def record_seed(run_seed, *parts):
    """Per-record seed derived from the run seed and a stable key."""
    return int(stable_hash([run_seed, *parts])[:12], 16) % SEED_SPACE


def _pool_map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def variants_of(config):
    return [v.strip() for v in config.segvariants.variants.split(",") if v.strip()]


class Pipeline:
    """Runs stages for one manifest; ``force`` lists stages to recompute."""

    def __init__(self, manifest, config, force=(), workers=None):
        self.manifest = manifest
        self.config = config
        self.force = set(force)
        self.workers = workers if workers is not None else config.run.workers
        self._backend = None
        self._tuned = None

    # -- helpers -------------------------------------------------------------

    @property
    def root(self):
        return self.manifest.root

    def _abs(self, rel):
        return self.manifest.path(rel)

    def _word(self, record=None):
        return self.config.run.object_word or (record.word if record else self.manifest.records[0].word)

    def _input_digest(self, split=None):
        recs = self.manifest.records if split is None else self.manifest.by_split(split)
        return stable_hash([[r.id, r.split, r.word, file_sha256(self._abs(r.image))] for r in recs])

    def _key(self, stage, extra):
        upstream = {d: self.manifest.stages[d]["key"] for d in DEPENDS[stage]}
        return stable_hash({"stage": stage, "upstream": upstream, **extra})

    def _check_deps(self, stage):
        missing = [d for d in DEPENDS[stage] if d not in self.manifest.stages]
        if missing:
            raise StageDependencyError(f"stage {stage!r} needs {', '.join(missing)} to run first")

    def _cached(self, stage, key, files=()):
        done = self.manifest.stages.get(stage)
        if stage in self.force or not done or done.get("key") != key:
            return False
        return all(os.path.exists(self._abs(p)) for p in files)

    def _finish(self, stage, key, summary):
        self.manifest.stages[stage] = {"key": key, "summary": summary}
        self.manifest.save()

    def _set_flag(self, record, name, value):
        if value:
            record.flags[name] = value
        else:
            record.flags.pop(name, None)

    # -- backends ------------------------------------------------------------

    def backend(self):
        if self._backend is None:
            sec = self.config.backend
            if sec.descriptor != "toy":
                from ..backend.adapter import CheckpointBackend, load_descriptor

                self._backend = CheckpointBackend(load_descriptor(self._abs(sec.descriptor)))
            else:
                path = self._abs(sec.toy_weights)
                if not os.path.exists(path):
                    logger.info("pretraining toy backend (%d steps) -> %s", sec.toy_pretrain_steps, path)
                    b = pretrain_toy_backend(image_size=sec.toy_image_size, steps=sec.toy_pretrain_steps,
                                             corpus_size=sec.toy_pretrain_corpus, seed=self.config.run.seed)
                    b.save(path)
                self._backend = ToyBackend.load(path)
        return self._backend

    def backend_hash(self):
        sec = self.config.backend
        if sec.descriptor == "toy":
            self.backend()
            return file_sha256(self._abs(sec.toy_weights))
        with open(self._abs(sec.descriptor), "rb") as fh:
            return stable_hash(fh.read().decode("utf-8"))

    def tuned_backend(self):
        if self._tuned is None:
            self._tuned = ToyBackend.load(self._abs(self.manifest.stages["finetune"]["summary"]["weights"])) \
                if self.config.backend.descriptor == "toy" else self.backend()
        return self._tuned

    # -- stages ----------------------------------------------------------------

    def run(self, stage):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self._check_deps(stage)
        return getattr(self, f"_run_{stage}")()

    def run_all(self):
        for stage in STAGES:
            self.run(stage)
        return self.manifest

    def _run_prelim(self):
        cfg = self.config.probe
        key = self._key("prelim", {"config": self.config.section_record("probe"), "backend": self.backend_hash(),
                                   "inputs": self._input_digest(), "seed": self.config.run.seed,
                                   "word": self.config.run.object_word})
        files = [p for r in self.manifest for k, p in r.artifacts.items() if k in ("prelim_mask", "prelim_map")]
        if self._cached("prelim", key, files):
            return self.manifest
        backend = self.backend()

        def work(r):
            image = load_image(self._abs(r.image))
            res = compute_preliminary(backend, image, backend.foreground_prompt(self._word(r)), cfg,
                                      seed=record_seed(self.config.run.seed, "prelim", r.id))
            return r, res

        degenerate = 0
        for r, res in _pool_map(work, self.manifest.records, self.workers):
            map_rel = os.path.join("prelim", "maps", r.id + ".tiff")
            mask_rel = os.path.join("prelim", "masks", r.id + ".png")
            meta = dict(res.importance.metadata())
            meta["gmm"] = res.fit.to_record() if res.fit else None
            save_float_map(self._abs(map_rel), res.importance.scores, meta)
            save_mask_png(self._abs(mask_rel), res.mask.values)
            r.artifacts["prelim_map"] = map_rel
            r.artifacts["prelim_mask"] = mask_rel
            flag = "degenerate importance map" if res.mask.flags.get("degenerate") else None
            degenerate += bool(flag)
            self._set_flag(r, "prelim", flag)
        self._finish("prelim", key, {"records": len(self.manifest), "degenerate": degenerate})
        return self.manifest

    def _train_records(self):
        return [r for r in self.manifest.by_split("train")] or list(self.manifest.records)

    def _run_finetune(self):
        cfg = self.config.finetune
        recs = self._train_records()
        key = self._key("finetune", {"config": cfg.to_record(), "inputs": self._input_digest(),
                                     "word": self.config.run.object_word})
        weights = os.path.join("finetune", "backend.bin")
        log_rel = os.path.join("finetune", "log.jsonl")
        if self._cached("finetune", key, [weights, log_rel]):
            return self.manifest
        images = [load_image(self._abs(r.image)) for r in recs]
        masks = [load_mask_png(self._abs(r.artifacts["prelim_mask"])) for r in recs]
        result = finetune(self.backend(), images, masks, self._word(recs[0]), cfg, log_path=self._abs(log_rel))
        if self.config.backend.descriptor == "toy":
            result.backend.save(self._abs(weights))
        self._tuned = result.backend
        self._finish("finetune", key, {"weights": weights, "log": log_rel, "images": len(recs),
                                       "skipped_background_samples": result.skipped})
        return self.manifest

    def _run_refine(self):
        cfg = self.config.refine
        key = self._key("refine", {"config": self.config.section_record("refine"), "seed": self.config.run.seed})
        files = [p for r in self.manifest for k, p in r.artifacts.items() if k == "refined_mask"]
        if self._cached("refine", key, files):
            return self.manifest
        tuned = self.tuned_backend()
        recs = list(self.manifest.records)
        images = [load_image(self._abs(r.image)) for r in recs]
        masks = [load_mask_png(self._abs(r.artifacts["prelim_mask"])) for r in recs]
        seeds = [record_seed(self.config.run.seed, "refine", r.id) for r in recs]
        chunks = [list(range(i, min(i + 32, len(recs)))) for i in range(0, len(recs), 32)]

        def work(idx):
            return refine_batch(tuned, [images[i] for i in idx], [masks[i] for i in idx], [seeds[i] for i in idx], cfg)

        results = [res for chunk in _pool_map(work, chunks, self.workers) for res in chunk]
        empty = 0
        for r, res in zip(recs, results):
            rel = os.path.join("refine", "masks", r.id + ".png")
            save_mask_png(self._abs(rel), res.mask.values)
            r.artifacts["refined_mask"] = rel
            if res.inpainted is not None:
                inp = os.path.join("refine", "inpainted", r.id + ".png")
                save_image_png(self._abs(inp), res.inpainted)
                r.artifacts["inpainted"] = inp
            else:
                r.artifacts.pop("inpainted", None)
            flag = res.mask.flags.get("reason") if res.mask.flags.get("empty_refinement") or res.mask.is_empty() \
                else None
            if flag is None and res.mask.is_empty():
                flag = "empty refined mask"
            empty += bool(flag)
            self._set_flag(r, "refine", flag)
        self._finish("refine", key, {"records": len(recs), "empty": empty})
        return self.manifest

    def _run_synth(self):
        sec = self.config.synth
        key = self._key("synth", {"config": self.config.section_record("synth"), "seed": self.config.run.seed,
                                  "probe": self.config.section_record("probe"),
                                  "refine": self.config.section_record("refine"),
                                  "word": self.config.run.object_word})
        synth_rel = os.path.join("synth", "manifest.jsonl")
        if self._cached("synth", key, [synth_rel]):
            return self.manifest
        word = self._word()
        seeds = [record_seed(self.config.run.seed, "synth", k) for k in range(sec.count)]
        kept, excluded = generate_synthetic_set(self.tuned_backend(), word, seeds, prelim_backend=self.backend(),
                                                prelim_config=self.config.probe, refine_config=self.config.refine,
                                                guidance_scale=sec.guidance_scale)
        index = {s: k for k, s in enumerate(seeds)}
        synth_root = self._abs("synth")
        records = []
        for s in sorted(kept + excluded, key=lambda s: index[s.seed]):
            rid = f"syn-{index[s.seed]:05d}"
            img = os.path.join("images", rid + ".png")
            save_image_png(os.path.join(synth_root, img), s.image)
            art = {}
            if s.foreground is not None:
                art["refined_mask"] = os.path.join("masks", rid + ".png")
                art["foreground"] = os.path.join("foreground", rid + ".png")
                save_mask_png(os.path.join(synth_root, art["refined_mask"]), s.mask)
                save_image_png(os.path.join(synth_root, art["foreground"]), s.foreground)
                flags = {}
            else:
                flags = {"synth": s.flags.get("reason", "empty refined mask")}
            records.append(ManifestRecord(rid, img, word, "synthetic", artifacts=art, flags=flags))
            bid = f"bg-{index[s.seed]:05d}"
            bimg = os.path.join("background", bid + ".png")
            save_image_png(os.path.join(synth_root, bimg), s.background)
            records.append(ManifestRecord(bid, bimg, "background", "synthetic_background"))
        tuned = self.tuned_backend()
        hseeds = [record_seed(self.config.run.seed, "synth-holdout", k) for k in range(sec.holdout_backgrounds)]
        for start in range(0, len(hseeds), 32):
            chunk = hseeds[start:start + 32]
            for k, im in enumerate(sample_images(tuned, [tuned.background_prompt()] * len(chunk), chunk), start):
                hid = f"bgh-{k:05d}"
                himg = os.path.join("background", hid + ".png")
                save_image_png(os.path.join(synth_root, himg), im)
                records.append(ManifestRecord(hid, himg, "background", "background_holdout"))
        synth = DatasetManifest(f"{self.manifest.name}-synthetic", records, root=synth_root,
                                notes={"layout": "D' images with refined masks and foregrounds; D'_b backgrounds"})
        synth.save()
        self._finish("synth", key, {"manifest": synth_rel, "kept": len(kept), "excluded": len(excluded),
                                    "backgrounds": len(seeds), "holdout_backgrounds": len(hseeds)})
        return self.manifest

    def synth_manifest(self):
        info = self.manifest.stages.get("synth")
        return DatasetManifest.load(self._abs(info["summary"]["manifest"])) if info else None

    def _training_set(self, variant):
        images, masks = [], []
        label = {"preliminary": "prelim_mask"}.get(variant.split("+")[0], "refined_mask")
        for r in self._train_records():
            if r.flags.get("refine") and label == "refined_mask":
                continue
            m = load_mask_png(self._abs(r.artifacts[label]))
            img = load_image(self._abs(r.image))
            images.append(img)
            masks.append(upsample_mask(m, img.shape[:2]))
        if variant.endswith("+synthetic"):
            synth = self.synth_manifest()
            if synth is None:
                raise StageDependencyError(f"segtrain variant {variant!r} needs the synth stage")
            for r in synth:
                img = load_image(synth.path(r.image))
                if r.split == "synthetic_background":
                    images.append(img)
                    masks.append(np.zeros(img.shape[:2], bool))
                elif "refined_mask" in r.artifacts:
                    images.append(img)
                    masks.append(load_mask_png(synth.path(r.artifacts["refined_mask"])))
        return images, masks

    def _run_segtrain(self):
        cfg = self.config.segtrain
        variants = variants_of(self.config)
        synth_key = self.manifest.stages.get("synth", {}).get("key")
        key = self._key("segtrain", {"config": self.config.section_record("segtrain"), "variants": variants,
                                     "seed": self.config.run.seed,
                                     "synth": synth_key if any("+synthetic" in v for v in variants) else None})
        models = {v: os.path.join("segtrain", v.replace("+", "_"), "model.bin") for v in variants}
        if self._cached("segtrain", key, list(models.values())):
            return self.manifest
        summary = {"models": models, "train_size": {}}
        for v in variants:
            images, masks = self._training_set(v)
            est = ForegroundSegmenter(cfg.steps, cfg.batch_size, cfg.learning_rate, cfg.train_crop, cfg.eval_crop,
                                      cfg.base_width, cfg.depth, seed=record_seed(self.config.run.seed, "segtrain"))
            est.fit(images, masks)
            est.save(self._abs(models[v]))
            atomic_write_text(self._abs(os.path.join(os.path.dirname(models[v]), "loss.jsonl")),
                              "".join(json.dumps(x) + "\n" for x in est.loss_curve_))
            summary["train_size"][v] = len(images)
        self._finish("segtrain", key, summary)
        return self.manifest

    def _run_eval(self):
        key = self._key("eval", {"inputs": [r.gt_mask for r in self.manifest]})
        report_rel = os.path.join("eval", "report.jsonl")
        if self._cached("eval", key, [report_rel]):
            return self.manifest
        models = {v: ForegroundSegmenter.load(self._abs(p))
                  for v, p in self.manifest.stages["segtrain"]["summary"]["models"].items()}
        lines, per_method = [], {}
        for r in self.manifest:
            if not r.gt_mask:
                continue
            image = load_image(self._abs(r.image))
            gt = load_mask_png(self._abs(r.gt_mask))
            preds = {"preliminary": upsample_mask(load_mask_png(self._abs(r.artifacts["prelim_mask"])), gt.shape),
                     "refined": load_mask_png(self._abs(r.artifacts["refined_mask"]))}
            for v, est in models.items():
                pred = est.predict([image])[0]
                rel = os.path.join("eval", "predicted", v.replace("+", "_"), r.id + ".png")
                save_mask_png(self._abs(rel), pred)
                r.artifacts[f"predicted:{v}"] = rel
                preds[f"unet:{v}"] = pred
            for method, pred in preds.items():
                row = {"id": r.id, "split": r.split, "method": method, **_metrics(pred, gt, r.gt_bbox)}
                lines.append(row)
                per_method.setdefault((r.split, method), []).append(row)
            scores = _upsample_scores(load_float_map(self._abs(r.artifacts["prelim_map"])), gt.shape)
            if gt.any() and not gt.all():
                row = {"id": r.id, "split": r.split, "method": "importance_map", "auc": evalkit.auc_roc(scores, gt)}
                lines.append(row)
                per_method.setdefault((r.split, "importance_map"), []).append(row)
        aggregates = []
        for (split, method), rows in sorted(per_method.items()):
            keys = [k for k in rows[0] if k not in ("id", "split", "method")]
            agg = {"aggregate": True, "split": split, "method": method, "n": len(rows)}
            agg.update({k: float(np.mean([x[k] for x in rows])) for k in keys})
            aggregates.append(agg)
        aggregates += self._background_check(models)
        atomic_write_text(self._abs(report_rel), "".join(json.dumps(x, sort_keys=True) + "\n"
                                                         for x in lines + aggregates))
        summary = {"report": report_rel,
                   "test": {a["method"]: {k: round(v, 6) for k, v in a.items() if isinstance(v, float)}
                            for a in aggregates if a.get("split") == "test"}}
        self._finish("eval", key, summary)
        return self.manifest

    def _background_check(self, models):
        """Share of held-out background-prompt samples each segmenter leaves empty."""
        synth = self.synth_manifest()
        if synth is None:
            return []
        bgs = [load_image(synth.path(r.image)) for r in synth if r.split == "background_holdout"]
        if not bgs:
            return []
        out = []
        for v, est in models.items():
            pred = predict_proba(est.net_, bgs, est.eval_crop) > 0.5
            empty = [not p.any() for p in pred]
            out.append({"aggregate": True, "split": "background_holdout", "method": f"unet:{v}", "n": len(bgs),
                        "empty_rate": float(np.mean(empty))})
        return out


def _metrics(pred, gt, gt_bbox=None):
    import warnings

    out = {"iou": evalkit.iou(pred, gt), "miou": evalkit.miou(pred, gt), "accuracy": evalkit.pixel_accuracy(pred, gt)}
    if gt_bbox is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out["bbox_iou"] = evalkit.bbox_iou(pred, gt_bbox)
    return out


def _upsample_scores(scores, shape):
    t = torch.from_numpy(np.asarray(scores, dtype=np.float32))[None, None]
    return F.interpolate(t, size=shape, mode="bilinear", align_corners=False)[0, 0].numpy()


def flagged(manifest):
    """Ids of records carrying a stage failure flag."""
    return [r.id for r in manifest if any(k in STAGES for k in r.flags)]


# -- ingest --------------------------------------------------------------------

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _images_in(folder):
    out = []
    for dirpath, _, names in os.walk(folder):
        out += [os.path.join(dirpath, n) for n in names if n.lower().endswith(IMAGE_EXTS)]
    return sorted(out)


def _find_mask(mask_dir, rel_stem):
    for ext in (".png", ".bmp", ".tif", ".jpg"):
        p = os.path.join(mask_dir, rel_stem + ext)
        if os.path.exists(p):
            return p
    return None


def ingest(source_dir, out_dir, word, layout="flat", size=None, test_fraction=0.0, seed=0):
    """Build a manifest over a folder of images.

    layouts:
      flat        images/*.png with optional masks/<same stem>.png
      cub-style   images/<class>/*.jpg with segmentations/<class>/<stem>.png;
                  class folders are merged under one object word
      bbox-style  images/*.png plus bboxes.csv (file,top,left,height,width)

    With ``size`` every image (and mask) is resized to size x size and copied
    into ``out_dir``; otherwise the manifest points at the source files.
    """
    import csv

    from PIL import Image

    if layout not in ("flat", "cub-style", "bbox-style"):
        raise ValueError(f"unknown layout {layout!r}")
    if not os.path.isdir(source_dir):
        raise FileNotFoundError(f"not a readable directory: {source_dir}")
    img_dir = os.path.join(source_dir, "images")
    if not os.path.isdir(img_dir):
        img_dir = source_dir
    paths = _images_in(img_dir)
    if layout == "flat":
        paths = [p for p in paths if os.path.dirname(p) == img_dir]
    if not paths:
        raise ValueError(f"no images found in {source_dir}")
    boxes = {}
    if layout == "bbox-style":
        with open(os.path.join(source_dir, "bboxes.csv"), newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                boxes[row["file"]] = [int(row[k]) for k in ("top", "left", "height", "width")]
    mask_dir = os.path.join(source_dir, "segmentations" if layout == "cub-style" else "masks")
    out_dir = os.path.abspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    test = set(rng.permutation(len(paths))[:int(round(len(paths) * test_fraction))].tolist())
    records, problems = [], []
    for i, p in enumerate(paths):
        rel = os.path.relpath(p, img_dir)
        stem = os.path.splitext(rel)[0]
        rid = stem.replace(os.sep, "__")
        flags = {"subcategory": os.path.dirname(rel)} if layout == "cub-style" and os.path.dirname(rel) else {}
        mask = _find_mask(mask_dir, stem) if os.path.isdir(mask_dir) else None
        try:
            with Image.open(p) as im:
                im.verify()
        except Exception as exc:  # noqa: BLE001 - report every unreadable file
            problems.append(f"{p}: {exc}")
            continue
        bbox = boxes.get(os.path.basename(p)) or boxes.get(rel)
        if size:
            image_rel = os.path.join("images", rid + ".png")
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255
            save_image_png(os.path.join(out_dir, image_rel), arr)
            gt_rel = None
            if mask:
                gt_rel = os.path.join("gt", rid + ".png")
                with Image.open(mask) as im:
                    m = np.asarray(im.convert("L").resize((size, size), Image.NEAREST)) > 127
                save_mask_png(os.path.join(out_dir, gt_rel), m)
            if bbox:
                with Image.open(p) as im:
                    W, H = im.size
                sy, sx = size / H, size / W
                bbox = [int(round(bbox[0] * sy)), int(round(bbox[1] * sx)),
                        max(1, int(round(bbox[2] * sy))), max(1, int(round(bbox[3] * sx)))]
        else:
            image_rel = os.path.relpath(p, out_dir)
            gt_rel = os.path.relpath(mask, out_dir) if mask else None
        records.append(ManifestRecord(rid, image_rel, word, "test" if i in test else "train", gt_rel, bbox,
                                      flags=flags))
    if problems:
        raise ValueError("unreadable files:\n" + "\n".join(problems))
    manifest = DatasetManifest(os.path.basename(os.path.normpath(source_dir)), records,
                               notes={"layout": layout, "source": "ingested"}, root=out_dir)
    missing = manifest.validate()
    if missing:
        raise ValueError("missing files:\n" + "\n".join(missing))
    manifest.save()
    return manifest
