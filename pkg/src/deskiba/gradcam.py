"""Grad-CAM at the attribution layer, as the comparison baseline."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .classifier import Model, capture_single
from .heatmap import Heatmap, normalize_max, resize_bilinear


def gradcam_map(model: Model, image, target_class: int | None = None) -> tuple[np.ndarray, int]:
    """Pre-normalization map ``relu(sum_c w_c A_c)`` at feature resolution.

    ``w_c`` is the spatial mean of d(target logit)/dA_c.  The target defaults
    to the model's own argmax.
    """
    feats = capture_single(model, image).data
    acts = T.Tensor(feats, requires_grad=True, dtype=feats.dtype)
    with T.Tape() as tape:
        logits = model.tail_logits(acts)
        if target_class is None:
            target_class = int(np.argmax(logits.data))
        score = logits[target_class]
    T.backward(score, tape)
    weights = acts.grad.astype(np.float64).mean(axis=(1, 2))
    cam = np.tensordot(weights, feats.astype(np.float64), axes=1)
    return np.maximum(cam, 0.0), target_class


def gradcam_heatmap(model: Model, image, roi_mask=None, target_class: int | None = None) -> Heatmap:
    cam, target = gradcam_map(model, image, target_class)
    values = normalize_max(resize_bilinear(cam, (64, 64)))
    heat = Heatmap(values, "gradcam", config={"target_class": target, "layer": "attribution"})
    if roi_mask is not None:
        roi = np.asarray(roi_mask)
        if roi.shape != values.shape:
            raise T.ShapeError(f"ROI mask {roi.shape} does not match heatmap {values.shape}")
        heat = Heatmap(values * (roi != 0), "gradcam", True, heat.config)
    return heat
