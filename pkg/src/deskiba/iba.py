"""Per-image information bottleneck attribution.

A mask ``M = sigmoid(alpha)`` (optionally smoothed, then clamped below one)
blends the captured features ``X`` with feature-distributed noise

    X~ = X * M + (1 - M) * eta,        eta ~ N(mu, sigma^2)

and ``alpha`` is fitted by Adam to

    mean_elements KL(P(X~ | X) || N(mu, sigma^2))  +  beta * mean_K CE(tail(X~), target)

In standardized coordinates ``z = (x - mu) / sigma`` the conditional is
``N(m z, (1 - m)^2)`` against a standard normal, which gives the per-element
capacity in closed form:

    KL(m, z) = -ln(1 - m) + ((1 - m)^2 + m^2 z^2 - 1) / 2

Capacity is the readout: summed over channels, converted to bits, resized to
the input resolution and optionally restricted to a region of interest.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .classifier import FeatureStats, Model, capture_single, forward_tail
from .heatmap import Heatmap, bilinear_matrix

LN2 = math.log(2.0)


@dataclass
class BottleneckConfig:
    beta: float = 10.0
    steps: int = 10
    learning_rate: float = 1.0
    samples: int = 10
    alpha_init: float = 5.0
    smoothing_sigma: float = 1.0
    one_minus_m_floor: float = 1e-6
    seed: int = 0
    readout: str = "capacity"  # or "mask"

    def __post_init__(self):
        if self.beta < 0 or self.steps < 0 or self.learning_rate < 0 or self.samples < 1:
            raise ValueError(f"invalid bottleneck config {self}")
        if self.smoothing_sigma < 0 or not 0 < self.one_minus_m_floor < 1:
            raise ValueError(f"invalid bottleneck config {self}")
        if self.readout not in ("capacity", "mask"):
            raise ValueError(f"unknown readout {self.readout!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_matrix(n: int, sigma: float) -> np.ndarray:
    """Row-normalized 1-D Gaussian smoothing operator of size ``n``."""
    if sigma == 0:
        return np.eye(n)
    idx = np.arange(n)
    kernel = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / sigma) ** 2)
    kernel[np.abs(idx[:, None] - idx[None, :]) > math.ceil(3 * sigma)] = 0
    return kernel / kernel.sum(axis=1, keepdims=True)


def mask_from_alpha(alpha: T.Tensor, config: BottleneckConfig) -> T.Tensor:
    m = T.sigmoid(alpha)
    if config.smoothing_sigma > 0:
        h, w = alpha.shape[-2:]
        m = T.spatial_linear(m, gaussian_matrix(h, config.smoothing_sigma), gaussian_matrix(w, config.smoothing_sigma))
    return T.minimum(m, 1.0 - config.one_minus_m_floor)


@dataclass
class MaskState:
    alpha: np.ndarray
    config: BottleneckConfig

    @classmethod
    def initial(cls, shape, config: BottleneckConfig, dtype=np.float32) -> "MaskState":
        return cls(np.full(shape, config.alpha_init, dtype=dtype), config)

    def mask(self) -> np.ndarray:
        return mask_from_alpha(T.Tensor(self.alpha, dtype=self.alpha.dtype), self.config).data


@dataclass
class CapacityMap:
    per_element: np.ndarray  # nats, attribution-layer shape
    reduced: np.ndarray = field(init=False)  # bits, 16x16

    def __post_init__(self):
        self.per_element = np.asarray(self.per_element, dtype=np.float64)
        self.reduced = self.per_element.sum(axis=0) / LN2


# ---------------------------------------------------------------- primitives


def inject_noise(features, mask, eta) -> T.Tensor:
    """``X * M + (1 - M) * eta``; ``eta`` may carry a leading noise-sample axis."""
    features, mask, eta = T.as_tensor(features), T.as_tensor(mask), T.as_tensor(eta)
    if features.shape != mask.shape or eta.shape[-features.data.ndim:] != features.shape:
        raise T.ShapeError(f"inject_noise: shapes {features.shape}, {mask.shape}, {eta.shape}")
    if np.any(mask.data < 0) or np.any(mask.data > 1):
        raise ValueError("inject_noise: mask values must lie in [0, 1]")
    return features * mask + (1.0 - mask) * eta


def sample_noise(stats: FeatureStats, gen: np.random.Generator, count: int | None = None) -> np.ndarray:
    """``eta ~ N(mu, sigma^2)`` per element; ``count`` adds a leading sample axis."""
    shape = stats.shape if count is None else (count, *stats.shape)
    eps = gen.standard_normal(shape)
    return (stats.mu + stats.sigma * eps).astype(stats.mu.dtype)


def capacity_kl(m, x, mu, sigma, one_minus_m_floor: float = 1e-6, sigma_floor: float = 1e-5):
    """KL(P(X~ | X=x) || N(mu, sigma^2)) in nats for mask value ``m``."""
    m, x, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (m, x, mu, sigma))
    if np.any(sigma < sigma_floor * (1 - 1e-6)):
        raise ValueError("capacity_kl: sigma below floor")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("capacity_kl: m outside [0, 1]")
    z = (x - mu) / sigma
    keep = np.maximum(1.0 - m, one_minus_m_floor)
    m = 1.0 - keep
    kl = -np.log(keep) + (keep**2 + m**2 * z**2 - 1.0) / 2.0
    return np.maximum(kl, 0.0)


def _capacity_tensor(mask: T.Tensor, z: np.ndarray) -> T.Tensor:
    keep = 1.0 - mask
    return T.relu(-T.log(keep) + (keep * keep + mask * mask * (z * z) - 1.0) * 0.5)


def iba_objective(
    model: Model,
    features,
    alpha: T.Tensor,
    stats: FeatureStats,
    target_class: int,
    config: BottleneckConfig,
    noise: np.ndarray,
) -> T.Tensor:
    """Scalar bottleneck loss for standard-normal ``noise`` of shape ``[K, C, H, W]``.

    Record on a tape to differentiate with respect to ``alpha``.
    """
    features = T.as_tensor(features)
    if alpha.shape != features.shape or features.shape != stats.shape:
        raise T.ShapeError(f"iba_objective: alpha {alpha.shape}, features {features.shape}, stats {stats.shape}")
    mask = mask_from_alpha(alpha, config)
    eta = (stats.mu + stats.sigma * noise).astype(features.dtype)
    logits = model.tail_logits(inject_noise(features, mask, eta))
    ce = T.softmax_cross_entropy(logits, target_class)
    z = ((features.data - stats.mu) / stats.sigma).astype(features.dtype)
    capacity = T.mean(_capacity_tensor(mask, z))
    return capacity + ce * config.beta


# ---------------------------------------------------------------- optimization


@dataclass
class Diagnostics:
    target_class: int
    p_target: float
    loss_trace: list[float]
    initial_loss: float
    final_loss: float


def optimize_mask(
    model: Model, image, stats: FeatureStats, config: BottleneckConfig | None = None
) -> tuple[MaskState, CapacityMap, Diagnostics]:
    """Fit the mask for one image; deterministic given ``config.seed``.

    ``initial_loss`` and ``final_loss`` use one shared held-out noise draw so
    they are directly comparable; ``loss_trace`` holds the per-step losses.
    """
    config = config or BottleneckConfig()
    features = capture_single(model, image)
    probs = forward_tail(model, features).data
    target = int(np.argmax(probs))

    state = MaskState.initial(features.shape, config, dtype=features.dtype)
    gen = rng_mod.stream(config.seed, "iba")
    held_out = rng_mod.stream(config.seed, "iba-eval").standard_normal((config.samples, *features.shape))

    def evaluate(alpha: np.ndarray) -> float:
        a = T.Tensor(alpha, dtype=alpha.dtype)
        return float(iba_objective(model, features, a, stats, target, config, held_out).data)

    initial = evaluate(state.alpha)
    adam = T.AdamState()
    trace = []
    for _ in range(config.steps):
        alpha = T.Tensor(state.alpha, requires_grad=True, dtype=state.alpha.dtype)
        noise = gen.standard_normal((config.samples, *features.shape))
        with T.Tape() as tape:
            loss = iba_objective(model, features, alpha, stats, target, config, noise)
        T.backward(loss, tape)
        trace.append(float(loss.data))
        T.adam_step([state.alpha], [alpha.grad], adam, config.learning_rate)

    capacity = CapacityMap(capacity_kl(state.mask(), features.data, stats.mu, stats.sigma, config.one_minus_m_floor, stats.sigma_floor))
    diag = Diagnostics(target, float(probs[target]), trace, initial, evaluate(state.alpha))
    return state, capacity, diag


def capacity_heatmap(capacity: CapacityMap, roi_mask=None, size: tuple[int, int] = (64, 64)) -> Heatmap:
    """Channel-summed capacity in bits, bilinearly resized, times the ROI if given."""
    reduced = capacity.reduced
    values = bilinear_matrix(size[0], reduced.shape[0]) @ reduced @ bilinear_matrix(size[1], reduced.shape[1]).T
    values = np.maximum(values, 0.0)
    return _apply_roi(Heatmap(values, "iba"), roi_mask)


def mask_heatmap(state: MaskState, roi_mask=None, size: tuple[int, int] = (64, 64)) -> Heatmap:
    """Alternative readout: channel-mean of the mask itself, resized."""
    m = state.mask().astype(np.float64).mean(axis=0)
    values = bilinear_matrix(size[0], m.shape[0]) @ m @ bilinear_matrix(size[1], m.shape[1]).T
    return _apply_roi(Heatmap(values, "iba"), roi_mask)


def _apply_roi(heatmap: Heatmap, roi_mask) -> Heatmap:
    if roi_mask is None:
        return heatmap
    roi = np.asarray(roi_mask)
    if roi.shape != heatmap.shape:
        raise T.ShapeError(f"ROI mask {roi.shape} does not match heatmap {heatmap.shape}")
    return Heatmap(heatmap.values * (roi != 0), heatmap.method, True, heatmap.config)


def attribute(model: Model, image, stats: FeatureStats, config: BottleneckConfig | None = None, roi_mask=None):
    """Optimize and read out in one call; returns ``(heatmap, state, capacity, diagnostics)``."""
    config = config or BottleneckConfig()
    state, capacity, diag = optimize_mask(model, image, stats, config)
    if config.readout == "mask":
        heat = mask_heatmap(state, roi_mask)
    else:
        heat = capacity_heatmap(capacity, roi_mask)
    heat.config = config.to_dict()
    return heat, state, capacity, diag
