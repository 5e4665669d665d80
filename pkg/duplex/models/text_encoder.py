import logging

import numpy as np

from duplex.corpus.vocabulary import BLANK_ID, TokenSequence, VocabularyError
from duplex.models.config import TextEncoderConfig
from duplex.models.layers import Conv1d, Embedding, GRUCell
from duplex.tensor import Array, Module, concat, relu

log = logging.getLogger(__name__)


class TextEncoder(Module):
    """Token embedding, a stack of convolutions and one bidirectional recurrent layer."""

    def __init__(self, cfg: TextEncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.embedding = Embedding(vocab_size, cfg.embed_dim, rng)
        self.convs = [Conv1d(cfg.embed_dim, cfg.embed_dim, cfg.conv_width, rng) for _ in range(cfg.num_conv_layers)]
        self.forward_cell = GRUCell(cfg.embed_dim, cfg.recurrent_dim, rng)
        self.backward_cell = GRUCell(cfg.embed_dim, cfg.recurrent_dim, rng)
        self.output_dim = cfg.output_dim

    def _run(self, cell: GRUCell, h: Array, order) -> list:
        state = cell.initial_state()
        states = {}
        for t in order:
            state = cell(h[t : t + 1], state)
            states[t] = state
        return [states[t] for t in sorted(states)]

    def __call__(self, y: TokenSequence) -> Array:
        """One ``output_dim`` vector per token; both directions see the whole transcript."""
        ids = np.asarray(y, dtype=np.int64)
        if ids.size == 0:
            raise VocabularyError("Cannot encode an empty transcript")
        if np.any(ids == BLANK_ID) or np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise VocabularyError(f"Transcript holds ids outside 1..{self.vocab_size - 1}: {list(y)}")
        h = self.embedding(ids)
        for conv in self.convs:
            h = relu(conv(h))
        n = len(ids)
        forward = self._run(self.forward_cell, h, range(n))
        backward = self._run(self.backward_cell, h, reversed(range(n)))
        return concat([concat(forward, axis=0), concat(backward, axis=0)], axis=1)
