import itertools

import numpy as np
from oracles import channel_mean_loop

from concept_distill.maskgen import compute_preliminary, upsample_mask
from concept_distill.refine import (MaskRefiner, RefineConfig, channel_reduce, crop_flip_inpaint, crop_flip_mask,
                                    largest_background_rect, mask_from_difference, refine_batch)


def test_channel_reduce_cases(rng):
    assert np.allclose(channel_reduce(np.full((2, 2, 3), 0.3)), 0.3)
    assert np.array_equal(channel_reduce(np.zeros((3, 3, 3))), np.zeros((3, 3)))
    for _ in range(10):
        d = rng.normal(size=(5, 7, 3))
        assert np.allclose(channel_reduce(d), channel_mean_loop(d))
    assert np.allclose(channel_reduce(-np.ones((2, 2, 3)), "max"), 1.0)


def test_empty_preliminary_is_flagged(toy_backend):
    img = np.zeros((32, 32, 3), np.float32)
    res = refine_batch(toy_backend, [img], [np.zeros((8, 8), bool)], [0])[0]
    assert res.mask.is_empty()
    assert res.mask.flags["empty_preliminary"]
    assert res.mask.flags["empty_refinement"]


def test_constructed_difference_gives_exact_mask(rng):
    gt = np.zeros((32, 32), bool)
    gt[8:20, 10:24] = True
    prelim = np.zeros((8, 8), bool)
    prelim[1:6, 1:7] = True
    up = upsample_mask(prelim, (32, 32))
    d = gt.astype(np.float64)
    mask, fit = mask_from_difference(d, up)
    assert np.array_equal(mask.values, gt & up)
    assert fit is not None


def test_refined_is_subset_of_preliminary(trained_backend, toy_scenes):
    prompt = trained_backend.foreground_prompt("blob")
    images = [img for img, _ in toy_scenes[:8]]
    prelims = [compute_preliminary(trained_backend, img, prompt, seed=k).mask for k, img in enumerate(images)]
    results = refine_batch(trained_backend, images, prelims, list(range(8)))
    for res, pm in zip(results, prelims):
        up = upsample_mask(pm.values, (32, 32))
        assert not (res.mask.values & ~up).any()
        assert res.mask.resolution_space == "pixel"


def test_refine_deterministic(toy_backend, toy_scenes):
    img, gt = toy_scenes[0]
    prelim = gt.reshape(8, 4, 8, 4).any(axis=(1, 3))
    a = refine_batch(toy_backend, [img], [prelim], [3])[0]
    b = refine_batch(toy_backend, [img], [prelim], [3])[0]
    assert np.array_equal(a.mask.values, b.mask.values)
    assert np.array_equal(a.inpainted, b.inpainted)


def test_uniform_image_crop_flip_is_empty():
    img = np.full((32, 32, 3), 0.4, np.float32)
    prelim = np.zeros((8, 8), bool)
    prelim[2:5, 2:5] = True
    mask = crop_flip_mask(img, prelim)
    assert mask.is_empty()
    assert mask.flags["empty_refinement"]
    assert mask.provenance == "crop_ablation"


def test_crop_flip_perfect_inpaint_matches_refinement():
    # flat background: the mirrored patch is a perfect inpainting of the hole
    img = np.full((32, 32, 3), 0.3, np.float32)
    gt = np.zeros((32, 32), bool)
    gt[6:14, 5:13] = True
    img[gt] = (0.9, 0.2, 0.1)
    prelim = np.zeros((8, 8), bool)
    prelim[1:4, 1:4] = True
    up = upsample_mask(prelim, (32, 32))
    filled, tiled = crop_flip_inpaint(img, up)
    assert np.array_equal(filled, np.full_like(img, 0.3))
    assert not tiled
    ideal, _ = mask_from_difference(channel_reduce(img - np.full_like(img, 0.3)), up)
    assert np.array_equal(crop_flip_mask(img, prelim).values, ideal.values)


def test_largest_background_rect_brute_force(rng):
    for _ in range(20):
        bg = rng.uniform(size=(6, 7)) < 0.7
        top, left, h, w = largest_background_rect(bg)
        assert bg[top:top + h, left:left + w].all()
        best = max((hh * ww for t, l, hh, ww in itertools.product(range(6), range(7), range(1, 7), range(1, 8))
                    if t + hh <= 6 and l + ww <= 7 and bg[t:t + hh, l:l + ww].all()), default=0)
        assert h * w == best
    assert largest_background_rect(np.zeros((3, 3), bool)) is None


def test_fit_on_whole_image_option():
    gt = np.zeros((32, 32), bool)
    gt[4:12, 4:12] = True
    up = np.zeros((32, 32), bool)
    up[:16, :16] = True
    d = gt.astype(float) + 0.01 * np.arange(32 * 32).reshape(32, 32) / 1024
    mask, _ = mask_from_difference(d, up, RefineConfig(fit_inside_preliminary=False))
    assert np.array_equal(mask.values, gt)


def test_mask_refiner_estimator(toy_backend, toy_scenes):
    img, gt = toy_scenes[1]
    prelim = gt.reshape(8, 4, 8, 4).any(axis=(1, 3))
    out = MaskRefiner(toy_backend, seed=2).fit().transform([img], [prelim])
    assert out.shape == (1, 32, 32)
    assert MaskRefiner(reduce="max").get_params()["reduce"] == "max"
