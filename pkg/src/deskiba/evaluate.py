"""Classification, localization, severity, necessity and cross-model metrics.

Localization scores are computed against the synthetic ground-truth lesion
masks.  Every threshold here is an operational choice and is reported
alongside the numbers it produced.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import iba as iba_mod
from . import rng as rng_mod
from . import tensor as T
from .classifier import FeatureStats, Model, capture_single, forward_tail, predict
from .detect import DEFAULT_TAU, estimate_severity
from .gradcam import gradcam_heatmap
from .heatmap import Heatmap, normalize_max
from .synth import Sample

log = logging.getLogger(__name__)

REPORT_SCHEMA = "deskiba.metrics/1"
TAU_GRID = (0.2, 0.3, 0.4, 0.5)
CONFIDENCE = 0.8
NOTE = (
    "Localization, severity and necessity thresholds are operational choices for "
    "synthetic ground truth, not clinical scoring."
)


# ---------------------------------------------------------------- classification


@dataclass
class ClassificationMetrics:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def classification_metrics(predictions: Sequence[int], labels: Sequence[int]) -> ClassificationMetrics:
    """Rates over a binary confusion matrix; a rate without its class is ``None``."""
    pred = np.asarray(predictions).astype(bool)
    true = np.asarray(labels).astype(bool)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and labels must be equal-length vectors")
    if pred.size == 0:
        raise ValueError("no predictions")
    tp = int(np.sum(pred & true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    fp = int(np.sum(pred & ~true))
    return ClassificationMetrics(
        accuracy=(tp + tn) / pred.size,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        tp=tp, fn=fn, tn=tn, fp=fp,
    )


# ---------------------------------------------------------------- localization


@dataclass
class Localization:
    iou: float
    pointing_hit: bool
    fp_area_ratio: float


def binarize(heatmap, tau: float = DEFAULT_TAU) -> np.ndarray:
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    return normalize_max(values) > tau


def localization_metrics(heatmap, lesion_mask, tau: float = DEFAULT_TAU) -> Localization | None:
    """IoU, pointing hit and false-positive area ratio; ``None`` for an empty mask."""
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    truth = np.asarray(lesion_mask) != 0
    if truth.shape != values.shape:
        raise ValueError(f"lesion mask {truth.shape} does not match heatmap {values.shape}")
    if not truth.any():
        return None
    pred = binarize(values, tau)
    union = np.count_nonzero(pred | truth)
    inter = np.count_nonzero(pred & truth)
    peak = np.unravel_index(np.argmax(values), values.shape)  # first in scan order
    return Localization(
        iou=inter / union,
        pointing_hit=bool(truth[peak]),
        fp_area_ratio=np.count_nonzero(pred & ~truth) / max(np.count_nonzero(pred), 1),
    )


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


# ---------------------------------------------------------------- necessity


@dataclass
class NecessityResult:
    passed: bool
    shift: float
    p_masked: float
    p_pruned: float
    pruned_locations: int


def necessity_check(
    model: Model,
    image,
    stats: FeatureStats,
    mask_state: iba_mod.MaskState,
    capacity: iba_mod.CapacityMap,
    eps_bits: float = 0.01,
    delta: float = 0.05,
    stochastic: bool = False,
    draws: int = 20,
    seed: int = 0,
) -> NecessityResult:
    """Zero the mask wherever reduced capacity is below ``eps_bits`` and measure
    the change in target-class probability.

    The default compares at ``eta = mu`` so the check is deterministic; with
    ``stochastic`` the probability is averaged over ``draws`` shared noise draws.
    """
    features = capture_single(model, image)
    target = int(np.argmax(forward_tail(model, features).data))
    mask = mask_state.mask()
    pruned = mask.copy()
    low = capacity.reduced < eps_bits
    pruned[:, low] = 0

    if stochastic:
        eta = iba_mod.sample_noise(stats, rng_mod.stream(seed, "necessity"), draws)
    else:
        eta = stats.mu

    def p_target(m: np.ndarray) -> float:
        probs = forward_tail(model, iba_mod.inject_noise(features, m, eta)).data
        return float(probs.reshape(-1, probs.shape[-1])[:, target].mean())

    p_masked, p_pruned = p_target(mask), p_target(pruned)
    shift = abs(p_masked - p_pruned)
    return NecessityResult(shift < delta, shift, p_masked, p_pruned, int(low.sum()))


def prediction_preserved(model: Model, image, stats: FeatureStats, mask_state, draws: int = 10, seed: int = 0) -> bool:
    """Does the learned mask, with fresh noise, keep the target class on average?"""
    features = capture_single(model, image)
    target = int(np.argmax(forward_tail(model, features).data))
    eta = iba_mod.sample_noise(stats, rng_mod.stream(seed, "preserve"), draws)
    probs = forward_tail(model, iba_mod.inject_noise(features, mask_state.mask(), eta)).data
    return bool(np.argmax(probs.mean(axis=0)) == target)


# ---------------------------------------------------------------- aggregation


def sample_config(config: iba_mod.BottleneckConfig, sample_id: str) -> iba_mod.BottleneckConfig:
    """Per-image bottleneck config whose seed is derived from the run seed and id."""
    seed = int(rng_mod.stream(config.seed, "image", sample_id).integers(0, 2**62))
    return dataclasses.replace(config, seed=seed)


def summarize_localization(results: Sequence[Localization | None]) -> dict:
    kept = [r for r in results if r is not None]
    out = {"n": len(kept), "skipped": len(results) - len(kept)}
    if kept:
        out["mean_iou"] = float(np.mean([r.iou for r in kept]))
        out["pointing_accuracy"] = float(np.mean([r.pointing_hit for r in kept]))
        out["mean_fp_area_ratio"] = float(np.mean([r.fp_area_ratio for r in kept]))
    return out


def severity_summary(heatmaps: Sequence[Heatmap], samples: Sequence[Sample], predicted: Sequence[int], tau: float) -> dict:
    est = [estimate_severity(h.normalized(), s.lung_mask, p, tau) for h, s, p in zip(heatmaps, samples, predicted)]
    if not est:
        return {"n": 0}
    return {
        "n": len(est),
        "exact_agreement": float(np.mean([e.severity_pred == s.severity for e, s in zip(est, samples)])),
        "ggo_mae": float(np.mean([abs(e.ggo_fraction_pred - s.ggo_fraction) for e, s in zip(est, samples)])),
    }


def cross_architecture(maps_a: Sequence[np.ndarray], maps_b: Sequence[np.ndarray]) -> dict:
    """Matched-pair IoU against the mean over all mismatched pairs (the
    expectation of a random shuffled pairing, independent of sample order)."""
    n = len(maps_a)
    if n < 2:
        return {"n": n}
    ious = np.array([[mask_iou(a, b) for b in maps_b] for a in maps_a])
    matched = float(np.mean(np.diag(ious)))
    shuffled = float((ious.sum() - np.trace(ious)) / (n * (n - 1)))
    return {"n": n, "mean_iou": matched, "shuffled_baseline": shuffled, "exceeds_baseline": matched > shuffled}


@dataclass
class MetricsReport:
    classification: dict
    localization: dict
    severity: dict = field(default_factory=dict)
    necessity: dict = field(default_factory=dict)
    prediction_preservation: dict = field(default_factory=dict)
    cross_architecture: dict | None = None
    tau_sensitivity: dict = field(default_factory=dict)
    winners: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "note": NOTE, **dataclasses.asdict(self)}

    def summary(self) -> str:
        lines = ["method      n   mean IoU  pointing  FP area"]
        for name, loc in self.localization.items():
            if loc.get("n"):
                lines.append(
                    f"{name:<10} {loc['n']:>3}   {loc['mean_iou']:.3f}     {loc['pointing_accuracy']:.3f}     "
                    f"{loc['mean_fp_area_ratio']:.3f}"
                )
        c = self.classification
        lines.append(
            f"classification: accuracy {c['accuracy']:.3f}  sensitivity {_fmt(c['sensitivity'])}  "
            f"specificity {_fmt(c['specificity'])}"
        )
        if self.severity.get("n"):
            lines.append(
                f"severity (iba): exact class {self.severity['exact_agreement']:.3f}  "
                f"GGO MAE {self.severity['ggo_mae']:.3f}"
            )
        if self.necessity.get("n"):
            lines.append(f"necessity pass rate {self.necessity['pass_rate']:.3f} over {self.necessity['n']} images")
        if self.cross_architecture and self.cross_architecture.get("n", 0) >= 2:
            x = self.cross_architecture
            lines.append(f"cross-architecture IoU {x['mean_iou']:.3f} vs shuffled {x['shuffled_baseline']:.3f}")
        for key, value in self.winners.items():
            lines.append(f"winner[{key}] = {value}")
        if self.tau_sensitivity:
            taus = sorted({t for per in self.tau_sensitivity.values() for t in per})
            lines.append("tau sensitivity (mean IoU): " + "  ".join(f"{t}" for t in taus))
            for name, per in self.tau_sensitivity.items():
                lines.append(f"  {name:<10} " + "  ".join(f"{per[t]:.3f}" for t in taus))
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.3f}"


def _winners(localization: Mapping[str, dict]) -> dict:
    if not {"iba", "gradcam"} <= set(localization):
        return {}
    a, b = localization["iba"], localization["gradcam"]
    if not a.get("n") or not b.get("n"):
        return {}
    return {
        "mean_iou": "iba" if a["mean_iou"] > b["mean_iou"] else "gradcam",
        "mean_fp_area_ratio": "iba" if a["mean_fp_area_ratio"] < b["mean_fp_area_ratio"] else "gradcam",
        "iou_margin": a["mean_iou"] - b["mean_iou"],
    }


def classify(model: Model, samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    probs = np.stack([predict(model, s.image[None]) for s in samples]) if samples else np.zeros((0, 2))
    return probs, probs.argmax(axis=1)


def evaluate_heatmaps(
    model: Model,
    samples: Sequence[Sample],
    heatmaps: Mapping[str, Mapping[str, Heatmap]],
    tau: float = DEFAULT_TAU,
    severity_method: str = "iba",
) -> MetricsReport:
    """Metrics for precomputed heatmaps, ``heatmaps[method][sample_id]``."""
    _, predicted = classify(model, samples)
    cls = classification_metrics(predicted, [s.label for s in samples])
    positives = [i for i, s in enumerate(samples) if s.lesion_mask.any()]
    localization, tau_table = {}, {}
    for name, maps in heatmaps.items():
        localization[name] = summarize_localization(
            [localization_metrics(maps[samples[i].id], samples[i].lesion_mask, tau) for i in positives]
        )
        tau_table[name] = {
            t: summarize_localization(
                [localization_metrics(maps[samples[i].id], samples[i].lesion_mask, t) for i in positives]
            ).get("mean_iou", float("nan"))
            for t in TAU_GRID
        }
    severity = {}
    if severity_method in heatmaps and positives:
        maps = heatmaps[severity_method]
        severity = severity_summary(
            [maps[samples[i].id] for i in positives], [samples[i] for i in positives], [predicted[i] for i in positives], tau
        )
        severity["method"] = severity_method
    return MetricsReport(
        classification=dataclasses.asdict(cls),
        localization=localization,
        severity=severity,
        tau_sensitivity=tau_table,
        winners=_winners(localization),
        config={"tau": tau},
    )


HeatmapFn = Callable[[Model, Sample], Heatmap]


def compare_methods(
    model: Model,
    samples: Sequence[Sample],
    stats: FeatureStats,
    config: iba_mod.BottleneckConfig | None = None,
    tau: float = DEFAULT_TAU,
    model_b: Model | None = None,
    stats_b: FeatureStats | None = None,
    extra_methods: Mapping[str, HeatmapFn] | None = None,
    eps_bits: float = 0.01,
    delta: float = 0.05,
    confidence: float = CONFIDENCE,
) -> MetricsReport:
    """Run IBA and Grad-CAM on every positive in ``samples`` (the test split)
    and aggregate; with ``model_b`` also compare IBA maps across architectures.
    """
    config = config or iba_mod.BottleneckConfig()
    samples = list(samples)
    probs, predicted = classify(model, samples)
    positives = [i for i, s in enumerate(samples) if s.lesion_mask.any()]

    iba_maps, gc_maps, extra_maps = {}, {}, {name: {} for name in (extra_methods or {})}
    necessity, preserved = [], []
    for i in positives:
        s = samples[i]
        cfg = sample_config(config, s.id)
        heat, state, capacity, diag = iba_mod.attribute(model, s.image[None], stats, cfg, s.lung_mask)
        iba_maps[s.id] = heat
        gc_maps[s.id] = gradcam_heatmap(model, s.image[None], s.lung_mask)
        for name, fn in (extra_methods or {}).items():
            extra_maps[name][s.id] = fn(model, s)
        if diag.p_target >= confidence:
            necessity.append(necessity_check(model, s.image[None], stats, state, capacity, eps_bits, delta))
            preserved.append(prediction_preserved(model, s.image[None], stats, state, seed=cfg.seed))
    log.info("attributed %d positives", len(positives))

    report = evaluate_heatmaps(model, samples, {"iba": iba_maps, "gradcam": gc_maps, **extra_maps}, tau)
    report.necessity = {
        "n": len(necessity),
        "pass_rate": float(np.mean([r.passed for r in necessity])) if necessity else None,
        "mean_shift": float(np.mean([r.shift for r in necessity])) if necessity else None,
        "eps_bits": eps_bits,
        "delta": delta,
        "confidence": confidence,
    }
    report.prediction_preservation = {
        "n": len(preserved),
        "rate": float(np.mean(preserved)) if preserved else None,
    }
    if model_b is not None:
        if stats_b is None:
            raise ValueError("stats_b is required with model_b")
        maps_a, maps_b = [], []
        for i in positives:
            s = samples[i]
            cfg = sample_config(config, s.id)
            heat_b = iba_mod.attribute(model_b, s.image[None], stats_b, cfg, s.lung_mask)[0]
            maps_a.append(binarize(iba_maps[s.id], tau))
            maps_b.append(binarize(heat_b, tau))
        report.cross_architecture = {"model_a": model.arch, "model_b": model_b.arch, **cross_architecture(maps_a, maps_b)}
    report.config = {
        "tau": tau,
        "iba": config.to_dict(),
        "eps_bits": eps_bits,
        "delta": delta,
        "confidence": confidence,
        "mean_p_target": float(np.mean(probs[positives].max(axis=1))) if positives else None,
    }
    return report
