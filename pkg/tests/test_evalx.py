import json

import numpy as np
import pytest
import torch
from scipy import ndimage

from protobagnet import evalx
from protobagnet.backbone import feature_to_input_box
from protobagnet.data import SynthConfig, generate_synthetic_dataset, stack
from protobagnet.estimator import ProtoBagNetClassifier


def pixel_model(values, k, side=6, weights=None):
    """Identity backbone (one feature per pixel) with scalar prototypes ``values``.

    Each box is a single pixel, so which pixels get pooled is easy to control.
    """
    est = ProtoBagNetClassifier(backbone="identity", m=len(values) // 2, k=k)
    est._build(1, side, side)
    conv = est.model_.backbone.body[0]
    with torch.no_grad():
        conv.weight.fill_(1.0)
        conv.bias.zero_()
        est.model_.prototypes.vectors.copy_(torch.tensor(values, dtype=torch.float32)[:, None])
        if weights is not None:
            est.model_.head.weight.copy_(torch.tensor(weights, dtype=torch.float32))
    est.mean_, est.std_ = np.zeros(1), np.ones(1)
    return est


def test_toy_two_hits_of_five():
    img = np.zeros((1, 1, 6, 6))
    bright = [(0, 0), (1, 3), (2, 5), (4, 1), (5, 5)]
    for i, (r, c) in enumerate(bright):
        img[0, 0, r, c] = 3.0 - 0.1 * i
    est = pixel_model([-3.0, 3.0], k=5)  # prototype 1 (disease) likes bright pixels
    res = evalx.localization_precision(est, img, [1], markers=[[(1, 3), (5, 5)]])
    assert res["precision"] == pytest.approx(0.4)
    assert res["hits"] == [[0.0, 1.0, 0.0, 0.0, 1.0]]
    assert res["per_k"][1]["mean"] == 0.0 and res["per_k"][2]["mean"] == 0.5


def test_boxes_covering_every_marker_give_precision_one():
    img = np.zeros((2, 1, 6, 6))
    markers = [[(1, 1), (2, 2)], [(4, 4), (0, 5)]]
    for i, pts in enumerate(markers):
        for r, c in pts:
            img[i, 0, r, c] = 3.0
    est = pixel_model([-3.0, 3.0], k=2)
    assert evalx.localization_precision(est, img, [1, 1], markers=markers)["precision"] == 1.0


def test_only_diseased_images_and_disease_prototypes_count():
    img = np.zeros((2, 1, 6, 6))
    img[:, 0, 3, 3] = 3.0
    est = pixel_model([3.0, 3.0, -3.0, -3.0], k=1)  # healthy prototypes would hit, disease ones miss
    res = evalx.localization_precision(est, img, [0, 1], markers=[[(3, 3)], [(3, 3)]])
    assert len(res["hits"]) == 2  # one diseased image x two disease prototypes
    assert res["precision"] == 0.0


def test_precision_needs_annotations():
    est = pixel_model([-3.0, 3.0], k=1)
    with pytest.raises(ValueError):
        evalx.localization_precision(est, np.zeros((1, 1, 6, 6)), [1])


@pytest.fixture(scope="module")
def trained():
    cfg = SynthConfig(side=40, band_amplitude=5.0, band_thickness=8.0, lesion_radius=(2, 3), seed=21)
    samples = generate_synthetic_dataset(cfg, 24)
    X, y = stack(samples)
    est = ProtoBagNetClassifier(m=2, k=3, warm_epochs=1, joint_epochs=1, last_epochs=1, batch_size=8)
    est.fit(X, y, sample_ids=[s.sample_id for s in samples])
    return est, samples, X, y


def test_precision_matches_naive_reference(trained):
    est, samples, X, y = trained
    masks = [s.lesion_mask for s in samples]
    markers = [s.lesion_markers for s in samples]
    res = evalx.localization_precision(est, X, y, masks=masks, markers=markers)
    sims = est.similarity_maps(X)
    n_cols = sims.shape[-1]
    hits = []
    for i in np.flatnonzero(y == 1):
        for j in (2, 3):
            order = sorted(range(sims[i, j].numel()), key=lambda p: (-float(sims[i, j].flatten()[p]), p))[: est.k]
            boxes = [feature_to_input_box(est.geometry_, divmod(p, n_cols)) for p in order]
            hits.append([any(b.contains(r, c) for r, c in markers[i]) for b in boxes])
    assert res["precision"] == pytest.approx(np.mean(hits))


def test_mask_dilation_never_lowers_precision(trained):
    est, samples, X, y = trained
    masks = [s.lesion_mask for s in samples]
    base = evalx.localization_precision(est, X, y, masks=masks, hit="mask")["precision"]
    grown = [ndimage.binary_dilation(m, iterations=3) for m in masks]
    assert evalx.localization_precision(est, X, y, masks=grown, hit="mask")["precision"] >= base


def test_occluded_image_differs_exactly_off_the_box_union(trained):
    est, _, X, _ = trained
    Xt = est.prepare(X)
    boxes = evalx.topk_boxes(est, Xt, est.k)
    keep = np.stack([evalx.box_mask([b for per in sample for b in per], 40, 40) for sample in boxes])
    Xo = evalx.occlude(Xt, keep, 0.0)
    diff = (Xo != Xt)[:, 0].numpy()
    assert np.array_equal(diff, ~keep)  # normalised pixels are never exactly 0


def test_noop_fill_gives_zero_deltas(trained):
    est, _, X, y = trained
    res = evalx.occlusion_faithfulness(est, X, y, fill="original")
    assert np.all(res.deltas == 0.0)
    assert res.auc_original == res.auc_occluded


def test_faithfulness_result_shape(trained, tmp_path):
    est, _, X, y = trained
    res = evalx.occlusion_faithfulness(est, X, y)
    assert len(res.deltas) == len(y)
    pc = res.per_class()
    assert pc[0]["original"]["n"] + pc[1]["original"]["n"] == len(y)
    evalx.write_json(res, tmp_path / "f.json")
    loaded = json.loads((tmp_path / "f.json").read_text())
    assert set(loaded["per_class"]) == {"0", "1"}
    evalx.write_csv(res.table(), tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().startswith("class,n,")


def test_zero_weight_prototype_has_no_effect():
    img = np.zeros((3, 1, 6, 6))
    g = np.random.default_rng(0)
    for i in range(3):
        img[i, 0] = g.uniform(-0.5, 0.5, (6, 6))
        img[i, 0, 0, i], img[i, 0, 1, i] = 3.0, 2.9  # bright pair for prototype 0
        img[i, 0, 5, i], img[i, 0, 4, i + 1] = -3.0, -2.9  # dark pair for prototype 1
    est = pixel_model([3.0, -3.0], k=2, weights=[0.0, 1.0])
    out = evalx.prototype_importance(est, img, [0, 1, 0], prototype=0)
    for stats in out["by_class"].values():
        assert stats["median_abs"] == pytest.approx(0.0, abs=1e-12)
    out1 = evalx.prototype_importance(est, img, [0, 1, 0], prototype=1)
    assert np.all(out1["deltas"] < 0)  # the only weighted evidence is for the disease class


def test_importance_sign_rates_pool_pairs():
    imp = {
        0: {"class": 0, "deltas": np.array([0.1, -0.2, 0.3, 0.0])},
        1: {"class": 1, "deltas": np.array([0.0, -0.5, 0.1, -0.1])},
    }
    rates = evalx.importance_sign_rates(imp, np.array([0, 1, 0, 1]))
    assert rates["healthy_on_healthy_raised"] == 1.0
    assert rates["disease_on_diseased_lowered"] == 1.0


def test_bootstrap_ci_contains_point():
    y = np.array([0, 1] * 20)
    s = y + np.random.default_rng(0).normal(0, 0.8, 40)
    point, lo, hi = evalx.bootstrap_ci(y, s, n_boot=200)
    assert lo <= point <= hi
