"""Heatmap container, resizing helpers and the heatmap JSON / P5 formats."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import write_pgm

HEATMAP_SCHEMA = "deskiba.heatmap/1"
METHODS = ("iba", "gradcam")


class HeatmapFormatError(ValueError):
    pass


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """``[n_out, n_in]`` interpolation weights, half-pixel centres, edges clamped.

    Rows sum to one, so resizing a constant map gives the same constant.
    """
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def resize_bilinear(grid: np.ndarray, shape: tuple[int, int] = (64, 64)) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    return bilinear_matrix(shape[0], grid.shape[0]) @ grid @ bilinear_matrix(shape[1], grid.shape[1]).T


def normalize_max(values: np.ndarray) -> np.ndarray:
    """Scale to ``[0, 1]`` by the maximum; an all-zero map stays zero."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    return values / peak if peak > 0 else np.zeros_like(values)


@dataclass
class Heatmap:
    values: np.ndarray  # 64x64, float64, >= 0
    method: str
    roi_applied: bool = False
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.method not in METHODS:
            raise HeatmapFormatError(f"unknown method {self.method!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def normalized(self) -> np.ndarray:
        return normalize_max(self.values)

    def to_json(self, sample_id: str | None = None) -> str:
        doc = {
            "schema": HEATMAP_SCHEMA,
            "id": sample_id,
            "method": self.method,
            "roi_applied": self.roi_applied,
            "shape": list(self.shape),
            "values": self.values.tolist(),
            "config": self.config,
        }
        return json.dumps(doc, sort_keys=True)

    def preview(self) -> np.ndarray:
        """8-bit rendering scaled to ``[0, max]``."""
        return np.round(self.normalized() * 255).astype(np.uint8)

    def save(self, directory: str | Path, sample_id: str) -> Path:
        root = Path(directory)
        path = root / f"{sample_id}.json"
        path.write_text(self.to_json(sample_id) + "\n", encoding="utf-8")
        write_pgm(root / f"{sample_id}.pgm", self.preview())
        return path


def load_heatmap(path: str | Path) -> tuple[str, Heatmap]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise HeatmapFormatError(f"{path}: unreadable heatmap ({err})") from err
    if doc.get("schema") != HEATMAP_SCHEMA:
        raise HeatmapFormatError(f"{path}: not a heatmap file")
    values = np.asarray(doc["values"], dtype=np.float64)
    if list(values.shape) != doc["shape"]:
        raise HeatmapFormatError(f"{path}: values do not match declared shape")
    return doc["id"], Heatmap(values, doc["method"], bool(doc["roi_applied"]), doc.get("config", {}))
