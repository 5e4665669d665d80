"""
Autoregressive feature-frame decoder.

Each step feeds the previous frame through a two-layer pre-net with dropout,
advances a recurrent cell on the pre-net output and the previous attention
context, attends over the encoder memory and predicts the next frame and a
stop logit. A convolutional post-net refines the whole predicted sequence
with a residual connection.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from duplex.frontend import FeatureSequence
from duplex.models.config import AudioDecoderConfig
from duplex.models.layers import Conv1d, GRUCell, Linear
from duplex.tensor import Array, Module, ShapeError, as_array, attention, concat, dropout, no_grad, relu, tanh
from duplex.tensor.array import sigmoid_values

log = logging.getLogger(__name__)


@dataclass
class DecoderOutput:
    coarse: Array
    frames: Array
    stop_logits: Array


class AudioDecoder(Module):
    def __init__(
        self,
        cfg: AudioDecoderConfig,
        feature_dim: int,
        memory_dim: int,
        rng: np.random.Generator,
        frame_period_ms: int = 10,
    ):
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.memory_dim = memory_dim
        self.frame_period_ms = frame_period_ms
        first, second = cfg.prenet_dims
        self.prenet = [Linear(feature_dim, first, rng), Linear(first, second, rng)]
        self.cell = GRUCell(second + memory_dim, cfg.recurrent_dim, rng)
        self.query = Linear(cfg.recurrent_dim, cfg.attention_dim, rng, bias=False)
        self.memory_keys = Linear(memory_dim, cfg.attention_dim, rng, bias=False)
        self.frame_head = Linear(cfg.recurrent_dim + memory_dim, feature_dim, rng)
        self.stop_head = Linear(cfg.recurrent_dim + memory_dim, 1, rng)
        dims = [feature_dim] + [cfg.postnet_dim] * (cfg.postnet_layers - 1) + [feature_dim]
        self.postnet = [Conv1d(dims[i], dims[i + 1], cfg.postnet_width, rng) for i in range(cfg.postnet_layers)]

    def _check_memory(self, memory) -> Array:
        memory = as_array(memory)
        if memory.ndim != 2 or memory.shape[0] == 0:
            raise ShapeError(f"Decoder memory must be a non-empty (length x dim) array, got {memory.shape}")
        if memory.shape[1] != self.memory_dim:
            raise ShapeError(f"Decoder memory must be {self.memory_dim}-dim, got {memory.shape[1]}")
        return memory

    def _prenet(self, frame: Array, training: bool, rng: Optional[np.random.Generator]) -> Array:
        for layer in self.prenet:
            frame = dropout(relu(layer(frame)), self.cfg.prenet_dropout, training, rng)
        return frame

    def _step(self, prev_frame, state, keys, memory, training, rng):
        hidden, context = state
        hidden = self.cell(concat([self._prenet(prev_frame, training, rng), context], axis=1), hidden)
        mask = np.ones((1, memory.shape[0]), dtype=bool)
        context = attention(self.query(hidden), keys, memory, mask)
        joined = concat([hidden, context], axis=1)
        return self.frame_head(joined), self.stop_head(joined), (hidden, context)

    def _initial_state(self) -> tuple:
        return self.cell.initial_state(), Array(np.zeros((1, self.memory_dim)))

    def _postnet(self, coarse: Array) -> Array:
        h = coarse
        for i, conv in enumerate(self.postnet):
            h = conv(h)
            if i < len(self.postnet) - 1:
                h = tanh(h)
        return coarse + h

    def teacher_forced(
        self, memory, x_target: np.ndarray, training: bool, rng: Optional[np.random.Generator] = None
    ) -> DecoderOutput:
        """
        Predict every target frame from the ground-truth previous frame.

        Pre-net dropout is live whenever ``training`` is true.
        """
        memory = self._check_memory(memory)
        x_target = np.asarray(x_target, dtype=np.float64)
        if x_target.ndim != 2 or x_target.shape[1] != self.feature_dim:
            raise ShapeError(f"Targets must be (time x {self.feature_dim}), got {x_target.shape}")
        keys = self.memory_keys(memory)
        state = self._initial_state()
        prev = np.zeros((1, self.feature_dim))
        frames, stops = [], []
        for t in range(x_target.shape[0]):
            frame, stop, state = self._step(Array(prev), state, keys, memory, training, rng)
            frames.append(frame)
            stops.append(stop)
            prev = x_target[t : t + 1]
        coarse = concat(frames, axis=0)
        stop_logits = concat(stops, axis=0).reshape(len(stops))
        return DecoderOutput(coarse, self._postnet(coarse), stop_logits)

    def infer(self, memory) -> FeatureSequence:
        """Greedy generation until the stop probability passes the threshold or the frame cap is hit."""
        with no_grad():
            memory = self._check_memory(memory)
            keys = self.memory_keys(memory)
            state = self._initial_state()
            prev = Array(np.zeros((1, self.feature_dim)))
            frames = []
            for _ in range(self.cfg.max_decode_frames):
                frame, stop, state = self._step(prev, state, keys, memory, False, None)
                frames.append(frame)
                prev = frame
                if sigmoid_values(stop.data[0, 0]) > self.cfg.stop_threshold:
                    break
            refined = self._postnet(concat(frames, axis=0))
        return FeatureSequence(refined.data, self.frame_period_ms)
