"""
Feature-frame post-processing: frame stacking with subsampling and SpecAugment masking.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """A (time x dim) matrix of feature frames sampled every ``frame_period_ms``."""

    frames: np.ndarray
    frame_period_ms: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"Feature frames must be a (time x dim) matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("Feature frames must be finite")
        if self.frame_period_ms <= 0:
            raise ValueError(f"Frame period must be positive, got {self.frame_period_ms}")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.num_frames


@dataclass(frozen=True)
class SpecAugmentConfig:
    freq_mask_param: int = 27
    num_time_masks: int = 10
    time_mask_param: int = 40
    mask_value: float = 0.0

    def __post_init__(self):
        if min(self.freq_mask_param, self.num_time_masks, self.time_mask_param) < 0:
            raise ValueError("SpecAugment parameters must be non-negative")


@dataclass(frozen=True)
class FrontendConfig:
    stack: int = 4
    stride: int = 3
    spec_augment: SpecAugmentConfig = field(
        default_factory=lambda: SpecAugmentConfig(freq_mask_param=8, num_time_masks=2, time_mask_param=2)
    )
    apply_spec_augment: bool = True


def stack_frames(x: FeatureSequence, stack: int, stride: int) -> FeatureSequence:
    """
    Concatenate each anchor frame with the ``stack - 1`` frames before it.

    Anchors are every ``stride``-th frame with a full window behind them;
    sequences shorter than ``stack`` give an empty result.
    """
    if stack < 1 or stride < 1:
        raise ValueError(f"stack and stride must be at least 1, got stack={stack} stride={stride}")
    anchors = [k * stride for k in range(x.num_frames // stride + 1) if stack - 1 <= k * stride < x.num_frames]
    out_dim = stack * x.dim
    if not anchors:
        return FeatureSequence(np.zeros((0, out_dim)), x.frame_period_ms * stride)
    frames = np.stack([x.frames[a - stack + 1 : a + 1].reshape(-1) for a in anchors])
    return FeatureSequence(frames, x.frame_period_ms * stride)


def spec_augment(x: FeatureSequence, cfg: SpecAugmentConfig, rng: np.random.Generator) -> FeatureSequence:
    """
    Apply one frequency mask and ``cfg.num_time_masks`` time masks.

    Widths are drawn uniformly from ``0..param`` and clamped to the available
    extent. The input is not modified.
    """
    frames = x.frames.copy()
    num_frames, dim = frames.shape

    width = min(int(rng.integers(0, cfg.freq_mask_param + 1)), dim)
    start = int(rng.integers(0, dim - width + 1))
    frames[:, start : start + width] = cfg.mask_value

    for _ in range(cfg.num_time_masks):
        width = min(int(rng.integers(0, cfg.time_mask_param + 1)), num_frames)
        start = int(rng.integers(0, num_frames - width + 1))
        frames[start : start + width, :] = cfg.mask_value

    return FeatureSequence(frames, x.frame_period_ms)


def prepare_asr_input(
    x: FeatureSequence, cfg: FrontendConfig, training: bool = False, rng: Optional[np.random.Generator] = None
) -> FeatureSequence:
    """Stack frames for the audio encoder, masking them when training."""
    stacked = stack_frames(x, cfg.stack, cfg.stride)
    if training and cfg.apply_spec_augment and stacked.num_frames > 0:
        if rng is None:
            raise ValueError("SpecAugment needs a random generator in training mode")
        stacked = spec_augment(stacked, cfg.spec_augment, rng)
    return stacked
