"""Synthetic lung / lesion images with ground-truth masks.

Each sample is a 64x64 grayscale slice: two dark elliptical lungs on a noisy
brighter body, and for positive samples 1-4 bright soft-edged blobs inside the
lungs.  Blob size is searched until the lesion fraction of lung area lands in
the interval of the requested severity class:

    CT-0  exactly 0       CT-1  (0, 0.25]    CT-2  (0.25, 0.50]
    CT-3  (0.50, 0.75]    CT-4  (0.75, 1]

Images are quantized to 8 bits at generation time so that the on-disk P5
files reproduce the in-memory arrays exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .pgm import PGMError, read_pgm, write_pgm

log = logging.getLogger(__name__)

SIZE = 64
SEVERITIES = ("CT-0", "CT-1", "CT-2", "CT-3", "CT-4")
LABELS = ("negative", "positive")
DEFAULT_COUNTS = {"CT-0": 400, "CT-1": 250, "CT-2": 100, "CT-3": 40, "CT-4": 10}
BODY_LEVEL = 0.85
LUNG_LEVEL = 0.15
LESION_CONTRAST = 0.35
NOISE_STD = 0.05
EDGE_WIDTH = 0.25  # cosine taper half-width, in normalized blob radius
MIN_CT1_TARGET = 0.02
MAX_RESIZE_ATTEMPTS = 100
MAX_GEOMETRIES = 50

MANIFEST = "manifest.json"
FORMAT_TAG = "deskiba-dataset"
FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


class DatasetMissingError(DatasetFormatError):
    """The manifest or a file it lists is absent or unreadable."""


def severity_interval(severity: int) -> tuple[float, float]:
    """Half-open ``(lo, hi]`` GGO-fraction interval for CT-1..CT-4."""
    if not 1 <= severity <= 4:
        raise ValueError(f"no open interval for severity {severity}")
    return (severity - 1) / 4, severity / 4


def severity_from_fraction(fraction: float) -> int:
    """Map a GGO fraction to its class; 0 is CT-0, boundaries belong to the lower class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    if fraction == 0.0:
        return 0
    for k in (1, 2, 3):
        if fraction <= k / 4:
            return k
    return 4


def parse_severity(value) -> int:
    """Accepts ``"CT-2"``, ``"CT2"``, ``"ct2"`` or the integer 2."""
    if isinstance(value, str):
        name = value.strip().upper()
        if name.startswith("CT") and not name.startswith("CT-"):
            name = "CT-" + name[2:]
        try:
            return SEVERITIES.index(name)
        except ValueError:
            raise ValueError(f"unknown severity {value!r}") from None
    value = int(value)
    if not 0 <= value <= 4:
        raise ValueError(f"unknown severity {value}")
    return value


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float64, values k/255
    label: int
    lung_mask: np.ndarray  # bool
    lesion_mask: np.ndarray  # bool
    ggo_fraction: float
    severity: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.severity == other.severity
            and self.ggo_fraction == other.ggo_fraction
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.lung_mask, other.lung_mask)
            and np.array_equal(self.lesion_mask, other.lesion_mask)
        )


@dataclass
class Dataset:
    seed: int
    counts: dict[str, int]
    samples: list[Sample]
    split: dict[str, str] = field(default_factory=dict)

    def subset(self, part: str) -> list[Sample]:
        return [s for s in self.samples if self.split[s.id] == part]

    @property
    def train(self) -> list[Sample]:
        return self.subset("train")

    @property
    def test(self) -> list[Sample]:
        return self.subset("test")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.counts == other.counts
            and self.split == other.split
            and self.samples == other.samples
        )


# ---------------------------------------------------------------- geometry

_ROWS, _COLS = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)


def _ellipse_radius(cy, cx, ry, rx) -> np.ndarray:
    return np.sqrt(((_ROWS - cy) / ry) ** 2 + ((_COLS - cx) / rx) ** 2)


def _lungs(gen: np.random.Generator) -> list[tuple[float, float, float, float]]:
    lungs = []
    for side in (-1, 1):
        cy = 32 + gen.uniform(-2, 2)
        cx = 32 + side * (13 + gen.uniform(-1.5, 1.5))
        ry = 22 + gen.uniform(-2, 2)
        rx = 10 + gen.uniform(-1, 1)
        lungs.append((cy, cx, ry, rx))
    return lungs


def _blob_profile(radius: np.ndarray) -> np.ndarray:
    """1 inside the core, cosine taper to 0 across ``1 +- EDGE_WIDTH``; 0.5 at radius 1."""
    t = np.clip((radius - (1 - EDGE_WIDTH)) / (2 * EDGE_WIDTH), 0.0, 1.0)
    return 0.5 * (1 + np.cos(np.pi * t))


class _LesionGeometry:
    """Blob centres and shapes; a single scale factor grows or shrinks all blobs."""

    def __init__(self, gen: np.random.Generator, lungs, lung_mask: np.ndarray, severity: int):
        n = int(gen.integers(1, 5))
        if severity >= 3:
            n = max(n, 2)
        self.blobs = []
        for i in range(n):
            side = i % 2 if severity >= 3 else int(gen.integers(0, 2))
            cy, cx, ry, rx = lungs[side]
            # centre uniformly inside the inner 70% of the chosen lung
            while True:
                dy, dx = gen.uniform(-0.7, 0.7, size=2)
                if dy * dy + dx * dx <= 0.49:
                    break
            size = gen.uniform(0.6, 1.4)
            aspect = gen.uniform(0.6, 1.6)
            self.blobs.append((cy + dy * ry, cx + dx * rx, size * np.sqrt(aspect), size / np.sqrt(aspect)))
        self.lung_mask = lung_mask
        self.lung_area = int(lung_mask.sum())

    def radius(self, scale: float) -> np.ndarray:
        r = np.full((SIZE, SIZE), np.inf)
        for cy, cx, sy, sx in self.blobs:
            r = np.minimum(r, _ellipse_radius(cy, cx, scale * sy, scale * sx))
        return r

    def fraction(self, scale: float) -> tuple[float, np.ndarray]:
        mask = (self.radius(scale) <= 1.0) & self.lung_mask
        return float(mask.sum()) / self.lung_area, mask

    def fit(self, lo: float, hi: float, target: float) -> tuple[float, np.ndarray]:
        """Bisect the scale until the lesion fraction falls in ``(lo, hi]``."""
        low, high = 0.0, 80.0
        frac, mask = self.fraction(high)
        if frac <= lo:
            raise GenerationError(f"fraction {frac:.3f} cannot exceed {lo}")
        for _ in range(MAX_RESIZE_ATTEMPTS):
            mid = 0.5 * (low + high)
            frac, mask = self.fraction(mid)
            if lo < frac <= hi and abs(frac - target) < 0.02:
                return mid, mask
            if frac < target:
                low = mid
            else:
                high = mid
        frac, mask = self.fraction(mid)
        if lo < frac <= hi:
            return mid, mask
        raise GenerationError(f"no scale reaches ({lo}, {hi}] after {MAX_RESIZE_ATTEMPTS} attempts")


def generate_sample(gen: np.random.Generator, severity, sample_id: str = "sample") -> Sample:
    """Draw one sample of the given severity class from ``gen``."""
    severity = parse_severity(severity)
    lungs = _lungs(gen)
    lung_mask = np.zeros((SIZE, SIZE), dtype=bool)
    for lung in lungs:
        lung_mask |= _ellipse_radius(*lung) <= 1.0

    image = np.full((SIZE, SIZE), BODY_LEVEL)
    image[lung_mask] = LUNG_LEVEL
    lesion_mask = np.zeros_like(lung_mask)

    if severity > 0:
        lo, hi = severity_interval(severity)
        target = gen.uniform(max(lo, MIN_CT1_TARGET), hi)
        for _ in range(MAX_GEOMETRIES):
            geometry = _LesionGeometry(gen, lungs, lung_mask, severity)
            try:
                scale, lesion_mask = geometry.fit(lo, hi, target)
                break
            except GenerationError:
                log.debug("regenerating lesion geometry for %s", sample_id)
        else:
            raise GenerationError(f"{sample_id}: no lesion geometry reached {SEVERITIES[severity]}")
        profile = _blob_profile(geometry.radius(scale))
        image = image + LESION_CONTRAST * profile * lung_mask

    image = image + gen.normal(0.0, NOISE_STD, size=image.shape)
    quantized = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    fraction = float(lesion_mask.sum()) / float(lung_mask.sum())
    return Sample(
        id=sample_id,
        image=quantized / 255.0,
        label=int(severity > 0),
        lung_mask=lung_mask,
        lesion_mask=lesion_mask,
        ggo_fraction=fraction,
        severity=severity,
    )


def train_count(n: int) -> int:
    """70% of ``n``, rounded toward train."""
    return (7 * n + 9) // 10


def generate_dataset(counts: dict | None = None, seed: int = 0) -> Dataset:
    """Generate samples per severity class and a stratified 70/30 split."""
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    resolved = {}
    for key, n in counts.items():
        name = SEVERITIES[parse_severity(key)]
        if int(n) < 0:
            raise ValueError(f"negative count for {name}")
        resolved[name] = int(n)
    samples, split = [], {}
    index = 0
    for sev, name in enumerate(SEVERITIES):
        n = resolved.get(name, 0)
        ids = []
        for _ in range(n):
            sid = f"s{index:04d}"
            samples.append(generate_sample(rng_mod.stream(seed, "sample", index), sev, sid))
            ids.append(sid)
            index += 1
        order = rng_mod.stream(seed, "split", sev).permutation(n)
        n_train = train_count(n)
        for rank, pos in enumerate(order):
            split[ids[pos]] = "train" if rank < n_train else "test"
    return Dataset(seed=seed, counts=resolved, samples=samples, split=split)


# ---------------------------------------------------------------- disk format


def _mask_u8(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write P5 images/masks and a sorted-key JSON manifest."""
    root = Path(directory)
    for sub in ("images", "lung", "lesion"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        files = {
            "image": f"images/{s.id}.pgm",
            "lung_mask": f"lung/{s.id}.pgm",
            "lesion_mask": f"lesion/{s.id}.pgm",
        }
        write_pgm(root / files["image"], np.round(s.image * 255).astype(np.uint8))
        write_pgm(root / files["lung_mask"], _mask_u8(s.lung_mask))
        write_pgm(root / files["lesion_mask"], _mask_u8(s.lesion_mask))
        entries.append(
            {
                "id": s.id,
                **files,
                "label": LABELS[s.label],
                "severity": SEVERITIES[s.severity],
                "ggo_fraction": s.ggo_fraction,
            }
        )
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "seed": dataset.seed,
        "counts": dataset.counts,
        "samples": entries,
        "split": dataset.split,
    }
    text = json.dumps(manifest, sort_keys=True, indent=1)
    (root / MANIFEST).write_text(text + "\n", encoding="utf-8")
    return root


def _read_mask(path: Path, sid: str) -> np.ndarray:
    pixels = read_pgm(path)
    if not np.all((pixels == 0) | (pixels == 255)):
        raise DatasetFormatError(f"{sid}: mask {path.name} is not binary")
    return pixels == 255


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetMissingError(f"manifest not found in {root}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetMissingError(f"{path}: unreadable manifest ({err})") from err
    if manifest.get("format") != FORMAT_TAG:
        raise DatasetFormatError(f"{path}: not a {FORMAT_TAG} manifest")

    samples, seen = [], set()
    for entry in manifest["samples"]:
        sid = entry["id"]
        if sid in seen:
            raise DatasetFormatError(f"duplicate sample id {sid}")
        seen.add(sid)
        files = {key: root / entry[key] for key in ("image", "lung_mask", "lesion_mask")}
        for key, fpath in files.items():
            if not fpath.is_file():
                raise DatasetMissingError(f"{sid}: {key} file missing ({fpath})")
        try:
            pixels = read_pgm(files["image"])
            lung = _read_mask(files["lung_mask"], sid)
            lesion = _read_mask(files["lesion_mask"], sid)
        except PGMError as err:
            raise DatasetFormatError(f"{sid}: {err}") from err
        if pixels.shape != (SIZE, SIZE) or lung.shape != pixels.shape or lesion.shape != pixels.shape:
            raise DatasetFormatError(f"{sid}: image/mask shape is not {SIZE}x{SIZE}")
        label = LABELS.index(entry["label"])
        severity = parse_severity(entry["severity"])
        fraction = float(entry["ggo_fraction"])
        if fraction != float(lesion.sum()) / float(lung.sum()):
            raise DatasetFormatError(f"{sid}: ggo_fraction disagrees with masks")
        if (label == 1) != (severity > 0) or (label == 1) != bool(lesion.any()):
            raise DatasetFormatError(f"{sid}: label, severity and lesion mask disagree")
        if np.any(lesion & ~lung):
            raise DatasetFormatError(f"{sid}: lesion extends outside the lung mask")
        samples.append(Sample(sid, pixels / 255.0, label, lung, lesion, fraction, severity))

    split = dict(manifest["split"])
    if set(split) != seen:
        raise DatasetFormatError("split ids do not match sample ids")
    return Dataset(
        seed=int(manifest["seed"]),
        counts={k: int(v) for k, v in manifest["counts"].items()},
        samples=samples,
        split=split,
    )
