import json

import numpy as np
import pytest

from deskiba import evaluate as ev
from deskiba import iba
from deskiba.heatmap import Heatmap
from deskiba.gradcam import gradcam_heatmap


# ---------------------------------------------------------------- classification


def test_all_correct():
    m = ev.classification_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert (m.accuracy, m.sensitivity, m.specificity) == (1.0, 1.0, 1.0)


def test_confusion_arithmetic():
    pred = [1, 1, 1, 0] + [0, 0, 1, 1]
    true = [1, 1, 1, 1] + [0, 0, 0, 0]
    m = ev.classification_metrics(pred, true)
    assert (m.tp, m.fn, m.tn, m.fp) == (3, 1, 2, 2)
    assert m.accuracy == 0.625 and m.sensitivity == 0.75 and m.specificity == 0.5
    assert m.n == 8


def test_all_positive_predictions():
    m = ev.classification_metrics([1, 1, 1, 1], [1, 0, 1, 0])
    assert m.sensitivity == 1.0 and m.specificity == 0.0


def test_missing_class_rate_is_undefined():
    m = ev.classification_metrics([1, 0], [1, 1])
    assert m.specificity is None and m.sensitivity == 0.5


def test_length_mismatch():
    with pytest.raises(ValueError):
        ev.classification_metrics([1, 0], [1])


# ---------------------------------------------------------------- localization


def test_heatmap_equal_to_mask():
    g = np.zeros((64, 64), dtype=bool)
    g[10:20, 30:40] = True
    loc = ev.localization_metrics(g.astype(float), g)
    assert (loc.iou, loc.pointing_hit, loc.fp_area_ratio) == (1.0, True, 0.0)


def test_disjoint_prediction():
    g = np.zeros((64, 64), dtype=bool)
    g[:4, :4] = True
    h = np.zeros((64, 64))
    h[50:54, 50:54] = 1
    loc = ev.localization_metrics(h, g)
    assert loc.iou == 0 and loc.fp_area_ratio == 1.0 and not loc.pointing_hit


def test_set_arithmetic_example():
    g = np.zeros((8, 8), dtype=bool)
    g[0, :8] = True
    h = np.zeros((8, 8))
    h[0, 4:8] = 1
    h[1, :4] = 1
    loc = ev.localization_metrics(h, g)
    assert loc.iou == pytest.approx(4 / 12) and loc.fp_area_ratio == 0.5


def test_pointing_tie_uses_first_in_scan_order():
    g = np.zeros((4, 4), dtype=bool)
    g[3, 3] = True
    h = np.zeros((4, 4))
    h[0, 0] = h[3, 3] = 1.0
    assert not ev.localization_metrics(h, g).pointing_hit


def test_empty_truth_is_skipped():
    assert ev.localization_metrics(np.ones((4, 4)), np.zeros((4, 4))) is None
    summary = ev.summarize_localization([None, ev.Localization(0.5, True, 0.2)])
    assert summary["n"] == 1 and summary["skipped"] == 1


def test_empty_prediction_has_zero_fp_ratio():
    g = np.zeros((4, 4), dtype=bool)
    g[0, 0] = True
    loc = ev.localization_metrics(np.zeros((4, 4)), g)
    assert loc.iou == 0 and loc.fp_area_ratio == 0.0


def test_mask_iou():
    a = np.array([1, 1, 0, 0], dtype=bool)
    b = np.array([0, 1, 1, 0], dtype=bool)
    assert ev.mask_iou(a, b) == pytest.approx(1 / 3)
    assert ev.mask_iou(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


# ---------------------------------------------------------------- cross architecture


def test_cross_architecture_baseline():
    a = [np.eye(3, dtype=bool)[i].reshape(1, 3) for i in range(3)]
    result = ev.cross_architecture(a, a)
    assert result["mean_iou"] == 1.0 and result["shuffled_baseline"] == 0.0 and result["exceeds_baseline"]


def test_cross_architecture_is_order_invariant():
    rng = np.random.default_rng(0)
    a = [rng.random((6, 6)) > 0.5 for _ in range(5)]
    b = [rng.random((6, 6)) > 0.5 for _ in range(5)]
    order = [3, 1, 4, 0, 2]
    r1 = ev.cross_architecture(a, b)
    r2 = ev.cross_architecture([a[i] for i in order], [b[i] for i in order])
    assert r1["mean_iou"] == pytest.approx(r2["mean_iou"])
    assert r1["shuffled_baseline"] == pytest.approx(r2["shuffled_baseline"])


# ---------------------------------------------------------------- necessity


@pytest.fixture(scope="module")
def optimized(trained_a, default_dataset):
    s = [x for x in default_dataset.test if x.label][2]
    state, capacity, diag = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats)
    return s, state, capacity, diag


def test_necessity_with_zero_eps_is_exact(trained_a, optimized):
    s, state, capacity, _ = optimized
    r = ev.necessity_check(trained_a.model, s.image[None], trained_a.stats, state, capacity, eps_bits=0.0)
    assert r.shift == 0.0 and r.passed and r.pruned_locations == 0


def test_necessity_with_infinite_eps_prunes_everything(trained_a, optimized):
    from deskiba.classifier import forward_tail, predict

    s, state, capacity, diag = optimized
    r = ev.necessity_check(trained_a.model, s.image[None], trained_a.stats, state, capacity, eps_bits=np.inf)
    assert r.pruned_locations == 256
    p_mu = forward_tail(trained_a.model, trained_a.stats.mu).data[diag.target_class]
    assert r.p_pruned == pytest.approx(float(p_mu), abs=1e-6)
    assert float(predict(trained_a.model, s.image[None])[diag.target_class]) == pytest.approx(diag.p_target)


def test_stochastic_necessity_is_seeded(trained_a, optimized):
    s, state, capacity, _ = optimized
    a = ev.necessity_check(trained_a.model, s.image[None], trained_a.stats, state, capacity, stochastic=True, seed=3)
    b = ev.necessity_check(trained_a.model, s.image[None], trained_a.stats, state, capacity, stochastic=True, seed=3)
    assert a == b


def test_sample_config_depends_on_id():
    c = iba.BottleneckConfig(seed=4)
    assert ev.sample_config(c, "s0001").seed == ev.sample_config(c, "s0001").seed
    assert ev.sample_config(c, "s0001").seed != ev.sample_config(c, "s0002").seed
    assert ev.sample_config(c, "s0001").beta == c.beta


# ---------------------------------------------------------------- aggregation


def test_identical_method_under_two_names(trained_a, default_dataset):
    samples = default_dataset.test[100:140]  # negatives and positives
    maps = {s.id: gradcam_heatmap(trained_a.model, s.image[None], s.lung_mask) for s in samples}
    report = ev.evaluate_heatmaps(trained_a.model, samples, {"gradcam": maps, "copy": dict(maps)})
    assert report.localization["gradcam"] == report.localization["copy"]
    assert report.tau_sensitivity["gradcam"] == report.tau_sensitivity["copy"]


def test_ground_truth_heatmaps_score_one(trained_a, default_dataset):
    samples = default_dataset.test
    maps = {s.id: Heatmap(s.lesion_mask.astype(float), "iba") for s in samples}
    report = ev.evaluate_heatmaps(trained_a.model, samples, {"iba": maps})
    loc = report.localization["iba"]
    assert loc["mean_iou"] == 1.0 and loc["mean_fp_area_ratio"] == 0.0 and loc["pointing_accuracy"] == 1.0


def test_aggregates_are_order_invariant(trained_a, default_dataset):
    samples = default_dataset.test[100:160]
    maps = {s.id: gradcam_heatmap(trained_a.model, s.image[None], s.lung_mask) for s in samples}
    a = ev.evaluate_heatmaps(trained_a.model, samples, {"gradcam": maps})
    b = ev.evaluate_heatmaps(trained_a.model, samples[::-1], {"gradcam": maps})
    for key in ("mean_iou", "pointing_accuracy", "mean_fp_area_ratio"):
        assert a.localization["gradcam"][key] == pytest.approx(b.localization["gradcam"][key], abs=1e-12)
    assert a.classification["accuracy"] == pytest.approx(b.classification["accuracy"])


def test_report_serializes(comparison):
    report, _ = comparison
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["schema"] == ev.REPORT_SCHEMA
    assert set(doc["localization"]) == {"iba", "gradcam"}
    assert set(doc["winners"]) == {"mean_iou", "mean_fp_area_ratio", "iou_margin"}
    assert set(doc["tau_sensitivity"]["iba"]) == {"0.2", "0.3", "0.4", "0.5"}
    c = doc["classification"]
    assert c["tp"] + c["fn"] + c["tn"] + c["fp"] == 240
    for loc in doc["localization"].values():
        assert 0 <= loc["mean_iou"] <= 1 and 0 <= loc["mean_fp_area_ratio"] <= 1
    assert "summary" not in doc and "method" in report.summary()


def test_prediction_preserved_on_confident_images(comparison):
    report, _ = comparison
    assert report.prediction_preservation["rate"] >= 0.9
