"""Feature-statistics prior for synthesized images.

A fixed, seeded stack of strided convolutions plays the role of a pretrained
CNN's batch-norm layers: its per-channel activation mean and std on real probe
images are the targets that synthesized batches are pulled toward.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from tensor.tensor import Tensor, get_dtype, no_grad
from utils.constants import MIN_PROBE_IMAGES, STD_EPSILON, STD_FLOOR
from utils.errors import ConfigError, CountError, DimensionError

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (8, 16, 32)


@dataclass
class ConvLayer:
    """Convolution whose kernel equals its stride (non-overlapping windows)."""

    weight: np.ndarray  # (C_in * s * s, C_out)
    bias: np.ndarray
    stride: int
    activation: bool = True


@dataclass
class StatExtractor:
    channels: int
    layers: List[ConvLayer] = field(default_factory=list)

    @classmethod
    def build(cls, channels: int, image_size: int, seed: int = 0,
              widths: Sequence[int] = DEFAULT_CHANNELS) -> "StatExtractor":
        rng = np.random.default_rng(seed)
        layers = []
        c_in, size = channels, image_size
        for width in widths:
            stride = 2 if size % 2 == 0 and size >= 2 else 1
            fan_in = c_in * stride * stride
            weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, width))
            bias = rng.normal(0.0, 0.1, width)
            layers.append(ConvLayer(weight=weight, bias=bias, stride=stride))
            c_in, size = width, size // stride
        return cls(channels=channels, layers=layers)

    @classmethod
    def identity(cls, channels: int = 1) -> "StatExtractor":
        """One 1x1 layer that passes pixels straight through."""
        return cls(channels=channels, layers=[ConvLayer(np.eye(channels), np.zeros(channels), 1, activation=False)])

    def features(self, images: Tensor) -> List[Tensor]:
        """Activations of every layer, each shaped (B, h, w, C_out)."""
        if images.ndim != 4 or images.shape[1] != self.channels:
            raise DimensionError(f"extractor expects (B, {self.channels}, H, W) input, got {images.shape}")
        x = images.transpose(0, 2, 3, 1)
        outputs = []
        for layer in self.layers:
            B, H, W, C = x.shape
            s = layer.stride
            if H % s or W % s:
                raise DimensionError(f"feature map {H}x{W} is not divisible by stride {s}")
            # im2col for kernel == stride is a pure reshape
            cols = x.reshape(B, H // s, s, W // s, s, C).transpose(0, 1, 3, 2, 4, 5)
            cols = cols.reshape(B, H // s, W // s, s * s * C)
            x = cols @ Tensor(layer.weight, dtype=images.dtype) + Tensor(layer.bias, dtype=images.dtype)
            if layer.activation:
                x = x.tanh()
            outputs.append(x)
        return outputs


def channel_stats(activation: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-channel mean and (biased) std over batch and spatial positions."""
    flat = activation.reshape(-1, activation.shape[-1])
    mean = flat.mean(axis=0)
    centered = flat - mean
    var = (centered * centered).mean(axis=0)
    return mean, (var + STD_EPSILON).sqrt()


@dataclass
class StatRegularizer:
    extractor: StatExtractor
    target_means: List[np.ndarray]
    target_stds: List[np.ndarray]
    alpha_r: float = 0.01

    def __post_init__(self):
        if self.alpha_r < 0:
            raise ConfigError(f"alpha_r must be nonnegative, got {self.alpha_r}")


def fit_stat_regularizer(probe_images: np.ndarray, extractor_seed: int = 0, alpha_r: float = 0.01,
                         extractor: Optional[StatExtractor] = None) -> StatRegularizer:
    """Record per-layer channel statistics of real probe images as targets."""
    probe = np.asarray(probe_images)
    if probe.ndim != 4:
        raise DimensionError(f"probe images must be (B, C, H, W), got {probe.shape}")
    if probe.shape[0] < MIN_PROBE_IMAGES:
        raise CountError(f"need at least {MIN_PROBE_IMAGES} probe images, got {probe.shape[0]}")
    if extractor is None:
        extractor = StatExtractor.build(probe.shape[1], probe.shape[2], seed=extractor_seed)

    means, stds = [], []
    with no_grad():
        for layer_index, activation in enumerate(extractor.features(Tensor(probe))):
            mean, std = channel_stats(activation)
            std = std.data.copy()
            low = std < STD_FLOOR
            if low.any():
                logger.warning("Layer %d has %d near-constant channels; clamping std to %g",
                               layer_index, int(low.sum()), STD_FLOOR)
                std[low] = STD_FLOOR
            means.append(mean.data.copy())
            stds.append(std)
    return StatRegularizer(extractor=extractor, target_means=means, target_stds=stds, alpha_r=alpha_r)


def stat_penalty(X: Tensor, reg: StatRegularizer) -> Tensor:
    """Sum over layers of ||mean(X) - mean_target|| + ||std(X) - std_target||."""
    total = None
    for activation, mu_t, sigma_t in zip(reg.extractor.features(X), reg.target_means, reg.target_stds):
        mean, std = channel_stats(activation)
        term = (mean - Tensor(mu_t, dtype=X.dtype)).norm(axis=0) + (std - Tensor(sigma_t, dtype=X.dtype)).norm(axis=0)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0, dtype=get_dtype())
