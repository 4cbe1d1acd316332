"""The two desk-scale CNNs, their training loop and feature statistics.

DeskNet-A::

    conv(16)+relu -> pool -> conv(32)+relu -> pool -> conv(32)+relu [attr]
    -> pool -> global average pool -> dense(32 -> 2)

DeskNet-B::

    conv(8)+relu -> pool -> conv(24)+relu -> pool -> conv(24)+relu [attr]
    -> conv(24)+relu -> pool -> global average pool -> dense(24 -> 2)

The attribution layer is the third convolution's activation (16x16 spatial).
``forward_capture`` runs the head up to it and ``forward_tail`` the rest, and
``predict`` is literally their composition.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .synth import Sample

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, 64, 64)
SIGMA_FLOOR = 1e-5

# (kind, name, in, out); relu follows every conv
_ARCHS: dict[str, list[tuple]] = {
    "DeskNet-A": [
        ("conv", "conv1", 1, 16), ("pool",),
        ("conv", "conv2", 16, 32), ("pool",),
        ("conv", "conv3", 32, 32), ("attr",),
        ("pool",), ("gap",), ("dense", "fc", 32, 2),
    ],
    "DeskNet-B": [
        ("conv", "conv1", 1, 8), ("pool",),
        ("conv", "conv2", 8, 24), ("pool",),
        ("conv", "conv3", 24, 24), ("attr",),
        ("conv", "conv4", 24, 24), ("pool",), ("gap",), ("dense", "fc", 24, 2),
    ],
}
ARCH_ALIASES = {"A": "DeskNet-A", "B": "DeskNet-B"}


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    """A readable checkpoint that does not fit the requested architecture."""


def resolve_arch(arch: str) -> str:
    arch = ARCH_ALIASES.get(arch, arch)
    if arch not in _ARCHS:
        raise ConfigurationError(f"unknown architecture {arch!r}")
    return arch


@dataclass
class Model:
    arch: str
    seed: int
    params: dict[str, T.Tensor]

    @property
    def layers(self) -> list[tuple]:
        return _ARCHS[self.arch]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        split = self.layers.index(("attr",))
        channels = [layer[3] for layer in self.layers[:split] if layer[0] == "conv"][-1]
        return (channels, 16, 16)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.arch, self.seed, {k: T.Tensor(v.data.copy(), dtype=v.dtype) for k, v in self.params.items()})

    def _run(self, layers: Iterable[tuple], x: T.Tensor) -> T.Tensor:
        p = self.params
        for layer in layers:
            kind = layer[0]
            if kind == "conv":
                x = T.relu(T.conv2d(x, p[f"{layer[1]}.weight"], p[f"{layer[1]}.bias"]))
            elif kind == "pool":
                x = T.maxpool2d(x)
            elif kind == "gap":
                x = T.global_avg_pool(x)
            elif kind == "dense":
                x = T.dense(x, p[f"{layer[1]}.weight"], p[f"{layer[1]}.bias"])
        return x

    def head(self, images: T.Tensor) -> T.Tensor:
        split = self.layers.index(("attr",))
        return self._run(self.layers[:split], images)

    def tail_logits(self, features: T.Tensor) -> T.Tensor:
        split = self.layers.index(("attr",))
        return self._run(self.layers[split + 1:], features)

    def logits(self, images: T.Tensor) -> T.Tensor:
        return self.tail_logits(self.head(images))


def build_model(arch: str = "DeskNet-A", seed: int = 0) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    arch = resolve_arch(arch)
    gen = rng_mod.stream(seed, "init", arch)
    params: dict[str, T.Tensor] = {}
    for layer in _ARCHS[arch]:
        if layer[0] == "conv":
            _, name, c_in, c_out = layer
            shape, fan_in = (c_out, c_in, 3, 3), c_in * 9
        elif layer[0] == "dense":
            _, name, n_in, n_out = layer
            shape, fan_in = (n_out, n_in), n_in
        else:
            continue
        w = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{name}.weight"] = T.Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = T.Tensor(np.zeros(shape[0]), requires_grad=True)
    return Model(arch, seed, params)


def _as_images(model: Model, image) -> T.Tensor:
    if isinstance(image, T.Tensor):
        image = image.data
    arr = np.asarray(image, dtype=model.dtype)
    if arr.shape == INPUT_SHAPE[1:]:
        arr = arr[None]
    if arr.shape[-3:] != INPUT_SHAPE or arr.ndim not in (3, 4):
        raise T.ShapeError(f"expected image of shape {INPUT_SHAPE} (or a batch), got {arr.shape}")
    return T.Tensor(arr, dtype=model.dtype)


def forward_capture(model: Model, image) -> T.Tensor:
    """Attribution-layer activations for one image ``[1,64,64]`` (or a batch)."""
    return model.head(_as_images(model, image))


def capture_single(model: Model, image) -> T.Tensor:
    """``forward_capture`` for exactly one image, returned as ``[C, H, W]``."""
    feats = forward_capture(model, image)
    if feats.data.ndim == 4:
        if feats.shape[0] != 1:
            raise T.ShapeError(f"expected a single image, got a batch of {feats.shape[0]}")
        feats = T.Tensor(feats.data[0], dtype=feats.dtype)
    return feats


def forward_tail(model: Model, features) -> T.Tensor:
    """Class probabilities from (possibly modified) attribution-layer features."""
    features = T.as_tensor(features)
    if features.shape[-3:] != model.feature_shape:
        raise T.ShapeError(f"features {features.shape} do not match {model.feature_shape}")
    return T.softmax(model.tail_logits(features))


def predict(model: Model, image) -> np.ndarray:
    """``[p_negative, p_positive]`` for one image (rows for a batch)."""
    return forward_tail(model, forward_capture(model, image)).data


def predict_batch(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [predict(model, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])[:, None]


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 0.002
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigurationError(f"invalid training config {self}")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def train(model: Model, dataset, config: TrainConfig | None = None) -> TrainHistory:
    """Adam on mean softmax cross-entropy over shuffled mini-batches, in place."""
    config = config or TrainConfig()
    train_set = dataset.train
    labels = np.array([s.label for s in train_set], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ConfigurationError("training split must contain both classes")
    images = stack_images(train_set).astype(model.dtype)
    test_set = dataset.test
    test_images = stack_images(test_set).astype(model.dtype) if test_set else None
    test_labels = np.array([s.label for s in test_set])

    dtype = np.dtype(config.precision)
    for p in model.params.values():
        p.data = p.data.astype(dtype)
    images = images.astype(dtype)
    if test_images is not None:
        test_images = test_images.astype(dtype)

    names = list(model.params)
    state = T.AdamState()
    history = TrainHistory()
    for epoch in range(config.epochs):
        order = rng_mod.stream(config.seed, "epoch", epoch).permutation(len(train_set))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in model.params.values():
                p.zero_grad()
            with T.Tape() as tape:
                loss = T.softmax_cross_entropy(model.logits(T.Tensor(images[idx], dtype=model.dtype)), labels[idx])
            T.backward(loss, tape)
            T.adam_step(
                [model.params[n].data for n in names],
                [model.params[n].grad for n in names],
                state,
                config.learning_rate,
            )
            total += float(loss.data) * len(idx)
            seen += len(idx)
        history.loss.append(total / seen)
        if test_images is not None:
            pred = predict_batch(model, test_images).argmax(axis=1)
            history.test_accuracy.append(float(np.mean(pred == test_labels)))
        log.info(
            "epoch %d loss %.4f test acc %s",
            epoch + 1,
            history.loss[-1],
            f"{history.test_accuracy[-1]:.3f}" if history.test_accuracy else "n/a",
        )
    for p in model.params.values():
        p.zero_grad()
    return history


# ---------------------------------------------------------------- feature stats


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_floor: float = SIGMA_FLOOR

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape


def _floor_in(dtype: np.dtype, floor: float):
    value = np.asarray(floor, dtype=dtype)
    if float(value) < floor:
        value = np.nextafter(value, np.asarray(np.inf, dtype=dtype))
    return value


def estimate_stats(model: Model, images, sigma_floor: float = SIGMA_FLOOR, batch_size: int = 64) -> FeatureStats:
    """Per-element mean and population std of attribution-layer features."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) < 2:
        raise ValueError("estimate_stats needs at least two images")
    feats = np.concatenate(
        [forward_capture(model, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    ).astype(np.float64)
    mu = feats.mean(axis=0)
    sigma = np.sqrt(((feats - mu) ** 2).mean(axis=0))
    dtype = model.dtype
    sigma = np.maximum(sigma.astype(dtype), _floor_in(dtype, sigma_floor))
    return FeatureStats(mu.astype(dtype), sigma, sigma_floor)


def default_stats_images(dataset, limit: int = 500) -> np.ndarray:
    return stack_images(dataset.train[:limit])


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DKNT"
CHECKPOINT_FORMAT = "deskiba-checkpoint"


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Header JSON then raw little-endian float32 parameters in declared order.

    Layout: ``b"DKNT"``, uint32 LE header length, UTF-8 header JSON, payload.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "arch": model.arch,
        "seed": model.seed,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, arch: str | None = None) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 8:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (size,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    stored = header.get("arch")
    if stored not in _ARCHS:
        raise CheckpointError(f"{path}: unknown architecture {stored!r}")
    if arch is not None and resolve_arch(arch) != stored:
        raise ArchitectureMismatch(f"{path}: checkpoint is {stored}, expected {resolve_arch(arch)}")
    expected = build_model(stored, 0)
    declared = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if declared != [(n, t.shape) for n, t in expected.params.items()]:
        raise ArchitectureMismatch(f"{path}: parameter layout does not match {stored}")
    offset = 8 + size
    params = {}
    for name, shape in declared:
        count = int(np.prod(shape))
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        data = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        params[name] = T.Tensor(data.copy(), requires_grad=True)
        offset += 4 * count
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Model(stored, int(header["seed"]), params)
