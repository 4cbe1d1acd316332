"""Lesion detection and severity estimation from heatmaps."""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .heatmap import normalize_max
from .synth import SEVERITIES, severity_from_fraction

DEFAULT_TAU = 0.3
DEFAULT_MIN_AREA = 4

_NEIGHBOURS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class Detection:
    component_id: int
    pixel_count: int
    bbox: tuple[int, int, int, int]  # row_min, col_min, row_max, col_max (inclusive)
    mean_value: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        return d


@dataclass
class SeverityEstimate:
    ggo_fraction_pred: float
    severity_pred: int

    @property
    def severity_name(self) -> str:
        return SEVERITIES[self.severity_pred]


def label_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling by breadth-first flood fill in row-major seed order.

    Returns an int array (0 = background, 1..n) and the component count.
    """
    binary = np.asarray(binary, dtype=bool)
    labels = np.zeros(binary.shape, dtype=np.int32)
    h, w = binary.shape
    count = 0
    for r0, c0 in zip(*np.nonzero(binary)):
        if labels[r0, c0]:
            continue
        count += 1
        labels[r0, c0] = count
        queue = deque([(r0, c0)])
        while queue:
            r, c = queue.popleft()
            for dr, dc in _NEIGHBOURS_8:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and binary[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = count
                    queue.append((rr, cc))
    return labels, count


def _check_roi(heatmap: np.ndarray, roi_mask) -> np.ndarray:
    if roi_mask is None:
        return np.ones(heatmap.shape, dtype=bool)
    roi = np.asarray(roi_mask)
    if roi.shape != heatmap.shape:
        raise ValueError(f"ROI mask {roi.shape} does not match heatmap {heatmap.shape}")
    return roi != 0


def detect(heatmap, roi_mask=None, tau: float = DEFAULT_TAU, min_area: int = DEFAULT_MIN_AREA) -> list[Detection]:
    """Threshold the max-normalized heatmap at ``> tau`` inside the ROI and box
    each 8-connected component of at least ``min_area`` pixels.

    Detections are sorted by pixel count (descending), then by top-left corner.
    """
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    roi = _check_roi(values, roi_mask)
    norm = normalize_max(values)
    labels, count = label_components((norm > tau) & roi)
    found = []
    for k in range(1, count + 1):
        rows, cols = np.nonzero(labels == k)
        if rows.size < min_area:
            continue
        box = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        found.append(Detection(0, int(rows.size), box, float(norm[rows, cols].mean())))
    found.sort(key=lambda d: (-d.pixel_count, d.bbox[0], d.bbox[1]))
    for i, det in enumerate(found, start=1):
        det.component_id = i
    return found


def estimate_severity(heatmap, lung_mask, predicted_label: int, tau: float = DEFAULT_TAU) -> SeverityEstimate:
    """Fraction of lung above ``tau`` and its CT class.

    The heatmap is thresholded as given (callers pass a normalized map), which
    keeps the estimate monotone in the heatmap.
    """
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    lung = np.asarray(lung_mask) != 0
    if lung.shape != values.shape:
        raise ValueError(f"lung mask {lung.shape} does not match heatmap {values.shape}")
    if not lung.any():
        raise ValueError("estimate_severity: empty lung mask")
    fraction = float(np.count_nonzero((values > tau) & lung)) / float(np.count_nonzero(lung))
    return SeverityEstimate(fraction, severity_class(fraction, predicted_label))


def severity_class(fraction: float, predicted_label: int) -> int:
    """CT-0 for a negative prediction; otherwise the interval class, at least CT-1."""
    if not predicted_label:
        return 0
    return max(1, severity_from_fraction(fraction))


DETECTION_SCHEMA = "deskiba.detections/1"


def detection_report(
    heatmap,
    lung_mask,
    predicted_label: int,
    tau: float = DEFAULT_TAU,
    min_area: int = DEFAULT_MIN_AREA,
    method: str | None = None,
) -> dict:
    """Boxes and severity for one image, detections restricted to the lungs."""
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    method = method or getattr(heatmap, "method", None)
    found = detect(values, lung_mask, tau, min_area)
    severity = estimate_severity(normalize_max(values), lung_mask, predicted_label, tau)
    return {
        "schema": DETECTION_SCHEMA,
        "method": method,
        "tau": tau,
        "min_area": min_area,
        "detections": [d.to_dict() for d in found],
        "ggo_fraction_pred": severity.ggo_fraction_pred,
        "severity_pred": severity.severity_name,
    }
