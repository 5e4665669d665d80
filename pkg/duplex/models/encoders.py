"""
Audio encoders.

The streaming encoder sees only past and present frames. The delayed encoder
runs on top of it and may look ``right_context_frames`` ahead; the look-ahead
is granted in its first block only, the remaining blocks are causal, so the
total look-ahead of the cascade is exactly R frames whatever the depth.
"""

import logging
from typing import Iterable, Iterator, Union

import numpy as np

from duplex.models.config import DelayedEncoderConfig, StreamingEncoderConfig
from duplex.models.layers import AttentionBlock, LayerNorm, Linear, causal_mask, lookahead_mask, sinusoid_positions
from duplex.tensor import Array, Module, ShapeError, as_array, no_grad

log = logging.getLogger(__name__)

Frames = Union[np.ndarray, Array]


class StreamingEncoder(Module):
    def __init__(self, cfg: StreamingEncoderConfig, input_dim: int, rng: np.random.Generator):
        self.model_dim = cfg.model_dim
        self.input_proj = Linear(input_dim, cfg.model_dim, rng)
        self.blocks = [AttentionBlock(cfg.model_dim, cfg.num_heads, cfg.ff_dim, rng) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(cfg.model_dim)

    def _check(self, x: Array) -> None:
        if x.ndim != 2 or x.shape[0] == 0:
            raise ShapeError(f"Expected a non-empty (time x dim) input, got {x.shape}")
        if x.shape[1] != self.input_proj.in_dim:
            raise ShapeError(f"Encoder expects {self.input_proj.in_dim}-dim frames, got {x.shape[1]}")

    def __call__(self, x: Frames) -> Array:
        x = as_array(x)
        self._check(x)
        n = x.shape[0]
        h = self.input_proj(x) + sinusoid_positions(n, self.model_dim)
        mask = causal_mask(n)
        for block in self.blocks:
            h = block(h, mask)
        return self.final_norm(h)

    def stream(self, frames: Iterable[np.ndarray]) -> Iterator[np.ndarray]:
        """
        Encode frame by frame, yielding one output vector per input frame.

        Keys and values of earlier positions are cached per block, so every
        step costs one attention row. Outputs equal the full-sequence pass.
        """
        caches: list = [{} for _ in self.blocks]
        with no_grad():
            for t, frame in enumerate(frames):
                row = as_array(np.asarray(frame, dtype=np.float64).reshape(1, -1))
                self._check(row)
                h = self.input_proj(row) + sinusoid_positions(1, self.model_dim, offset=t)
                for block, cache in zip(self.blocks, caches):
                    h = block.step(h, cache)
                yield self.final_norm(h).data[0]


class DelayedEncoder(Module):
    """Cascaded encoder; with ``num_layers=0`` it passes its input through unchanged."""

    def __init__(self, cfg: DelayedEncoderConfig, rng: np.random.Generator):
        self.model_dim = cfg.model_dim
        self.right_context_frames = cfg.right_context_frames
        self.blocks = [AttentionBlock(cfg.model_dim, cfg.num_heads, cfg.ff_dim, rng) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(cfg.model_dim) if cfg.num_layers else None

    def __call__(self, h: Frames) -> Array:
        h = as_array(h)
        if h.ndim != 2 or h.shape[0] == 0 or h.shape[1] != self.model_dim:
            raise ShapeError(f"Delayed encoder expects non-empty (time x {self.model_dim}) input, got {h.shape}")
        if not self.blocks:
            return h
        n = h.shape[0]
        first_mask = lookahead_mask(n, self.right_context_frames)
        mask = causal_mask(n)
        for i, block in enumerate(self.blocks):
            h = block(h, first_mask if i == 0 else mask)
        return self.final_norm(h)
