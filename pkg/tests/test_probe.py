import numpy as np
import pytest

from concept_distill.errors import ContractError
from concept_distill.evalkit import auc_roc
from concept_distill.probe import (AttentionRecord, ImportanceMap, ImportanceMapExtractor, aggregate,
                                   aggregate_single_draw, capture_trajectory, importance_map, normalize_instance,
                                   per_token_maps)


def _image(rng):
    return rng.uniform(size=(32, 32, 3)).astype(np.float32)


def test_single_step_group(toy_backend, rng):
    records = capture_trajectory(toy_backend, _image(rng), toy_backend.foreground_prompt("blob"), T0=1, N=1)
    assert len(records) == 1
    assert {r.timestep for r in records[0]} == {1}


def test_record_count(toy_backend, rng):
    T0, N = 3, 2
    records = capture_trajectory(toy_backend, _image(rng), toy_backend.foreground_prompt("blob"), T0=T0, N=N)
    n_layers = len(toy_backend.descriptor.layer_resolutions)
    assert sum(len(g) for g in records) == T0 * N * n_layers * toy_backend.heads
    shapes = {r.spatial_shape for g in records for r in g}
    assert shapes == set(toy_backend.descriptor.layer_resolutions)


def test_capture_replay(toy_backend, rng):
    img = _image(rng)
    prompt = toy_backend.foreground_prompt("ring")
    a = capture_trajectory(toy_backend, img, prompt, T0=4, N=2, seed=9)
    b = capture_trajectory(toy_backend, img, prompt, T0=4, N=2, seed=9)
    for ga, gb in zip(a, b):
        for ra, rb in zip(ga, gb):
            assert np.array_equal(ra.probabilities, rb.probabilities)


def test_T0_out_of_range(toy_backend, rng):
    with pytest.raises(ContractError):
        capture_trajectory(toy_backend, _image(rng), toy_backend.foreground_prompt("blob"), T0=0)
    with pytest.raises(ContractError):
        capture_trajectory(toy_backend, _image(rng), toy_backend.foreground_prompt("blob"), T0=51)


def test_single_record_aggregation(rng):
    probs = rng.dirichlet(np.ones(5), size=12)
    rec = AttentionRecord(0, 0, probs, (3, 4), timestep=1)
    m = aggregate([rec], 2)
    assert np.array_equal(m.scores, probs[:, 2].reshape(3, 4))


def test_identical_layers_double(rng):
    probs = rng.dirichlet(np.ones(5), size=16)
    one = aggregate([AttentionRecord(0, 0, probs, (4, 4), timestep=1)], 3)
    two = aggregate([AttentionRecord(0, 0, probs, (4, 4), timestep=1),
                     AttentionRecord(1, 0, probs, (4, 4), timestep=1)], 3)
    assert np.allclose(two.scores, 2 * one.scores)


def test_heads_averaged_and_layers_resampled(rng):
    p1 = rng.dirichlet(np.ones(3), size=4)
    p2 = rng.dirichlet(np.ones(3), size=4)
    m = aggregate([AttentionRecord(0, 0, p1, (2, 2), 1), AttentionRecord(0, 1, p2, (2, 2), 1)], 1,
                  latent_shape=(2, 2))
    assert np.allclose(m.scores, ((p1[:, 1] + p2[:, 1]) / 2).reshape(2, 2))
    up = aggregate([AttentionRecord(0, 0, np.ones((4, 1)), (2, 2), 1)], 0, latent_shape=(4, 4))
    assert up.scores.shape == (4, 4) and np.allclose(up.scores, 1.0)


def test_monte_carlo_average(rng):
    a = rng.dirichlet(np.ones(2), size=4)
    b = rng.dirichlet(np.ones(2), size=4)
    recs = [AttentionRecord(0, 0, a, (2, 2), timestep=1, draw=0), AttentionRecord(0, 0, b, (2, 2), timestep=1, draw=1)]
    m = aggregate(recs, 0)
    assert m.N == 2
    assert np.allclose(m.scores, ((a[:, 0] + b[:, 0]) / 2).reshape(2, 2))
    with pytest.raises(ContractError):
        aggregate_single_draw(recs, 0)


def test_single_draw_identity(toy_backend, rng):
    prompt = toy_backend.foreground_prompt("blob")
    for k in range(5):
        records = capture_trajectory(toy_backend, _image(rng), prompt, T0=40, N=1, seed=k)
        mc = aggregate(records, prompt.target_token_indices[0], (8, 8))
        simple = aggregate_single_draw(records, prompt.target_token_indices[0], (8, 8))
        assert np.array_equal(mc.scores, simple.scores)


def test_normalize():
    m = normalize_instance(ImportanceMap(np.array([[2.0, 4.0, 6.0]]), 0, 1, 1))
    assert np.allclose(m.scores, [[0, 0.5, 1]])
    assert m.normalized
    flat = normalize_instance(ImportanceMap(np.full((3, 3), 7.0), 0, 1, 1))
    assert np.array_equal(flat.scores, np.zeros((3, 3)))


def test_normalize_idempotent(rng):
    for _ in range(20):
        m = normalize_instance(ImportanceMap(rng.normal(size=(8, 8)), 0, 1, 1))
        again = normalize_instance(m)
        assert np.allclose(again.scores, m.scores, atol=1e-15)


def test_per_token_maps_single_token(toy_backend, rng):
    prompt = toy_backend.tokenize("")
    maps = per_token_maps(toy_backend, _image(rng), prompt, T0=2)
    assert len(maps) == 1


def test_subtoken_sum_map(toy_backend, rng):
    prompt = toy_backend.tokenize("a photo of a blobstar", target_words=["blobstar"])
    maps = per_token_maps(toy_backend, _image(rng), prompt, T0=3)
    assert len(maps) == len(prompt.token_ids) + 1
    summed = maps[-1]
    assert summed.token_index == (5, 6)
    assert np.allclose(summed.scores, maps[5].scores + maps[6].scores)
    direct = importance_map(toy_backend, _image(np.random.default_rng(0)), prompt, T0=3)
    assert direct.token_index == (5, 6)


def test_object_token_has_best_auc(trained_backend, toy_scenes):
    prompt = trained_backend.foreground_prompt("blob")
    obj = prompt.target_token_indices[0]
    per_token = np.zeros(len(prompt.token_ids))
    for k, (img, gt) in enumerate(toy_scenes[:12]):
        maps = per_token_maps(trained_backend, img, prompt, seed=k)
        gt_lat = gt.reshape(8, 4, 8, 4).mean(axis=(1, 3)) >= 0.5
        for t, m in enumerate(maps[:len(prompt.token_ids)]):
            per_token[t] += auc_roc(m.scores, gt_lat)
    assert int(np.argmax(per_token)) == obj


def test_extractor_estimator(toy_backend, rng):
    est = ImportanceMapExtractor(toy_backend, "blob", T0=2)
    assert est.get_params()["T0"] == 2
    out = est.fit().transform([_image(rng), _image(rng)])
    assert out.shape == (2, 8, 8)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        ImportanceMapExtractor().fit()
