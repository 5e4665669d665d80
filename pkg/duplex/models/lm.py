"""
External language model: a causal transformer over token ids.

The blank id doubles as the begin-of-sequence symbol on the input side; the
output distribution covers the non-blank labels only, so label ``k`` is
predicted at index ``k - 1``.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from duplex.corpus.vocabulary import BLANK_ID, TokenSequence, VocabularyError
from duplex.models.config import ExternalLMConfig
from duplex.models.layers import AttentionBlock, Embedding, LayerNorm, Linear, causal_mask, sinusoid_positions
from duplex.tensor import (
    Array,
    Module,
    getitem,
    load_checkpoint,
    log_softmax,
    no_grad,
    save_checkpoint,
    select_prefix,
    sum_,
)

log = logging.getLogger(__name__)

ELM_PREFIX = "elm."


class ContextLengthError(ValueError):
    """Raised when a transcript does not fit in the language model context."""

    pass


class ExternalLM(Module):
    def __init__(self, cfg: ExternalLMConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embedding = Embedding(vocab_size, cfg.model_dim, rng)
        self.blocks = [AttentionBlock(cfg.model_dim, cfg.num_heads, cfg.ff_dim, rng) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(cfg.model_dim)
        self.head = Linear(cfg.model_dim, vocab_size - 1, rng)

    def next_token_logprobs(self, inputs: np.ndarray) -> Array:
        """Log-distribution over the next label after every input position."""
        n = len(inputs)
        h = self.embedding(inputs) + sinusoid_positions(n, self.cfg.model_dim)
        mask = causal_mask(n)
        for block in self.blocks:
            h = block(h, mask)
        return log_softmax(self.head(self.final_norm(h)), axis=-1)

    def _inputs(self, y: TokenSequence) -> np.ndarray:
        ids = np.asarray(y, dtype=np.int64)
        if ids.size == 0:
            raise VocabularyError("Cannot score an empty transcript")
        if np.any(ids == BLANK_ID) or np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise VocabularyError(f"Transcript holds ids outside 1..{self.vocab_size - 1}")
        if ids.size > self.cfg.context_length:
            raise ContextLengthError(f"Transcript of length {ids.size} exceeds context {self.cfg.context_length}")
        return np.concatenate([[BLANK_ID], ids[:-1]])

    def sequence_logprob(self, y: TokenSequence) -> Array:
        """Differentiable total log-probability, used for training."""
        logprobs = self.next_token_logprobs(self._inputs(y))
        return sum_(getitem(logprobs, (np.arange(len(y)), np.asarray(y) - 1)))

    def elm_logprob(self, y: TokenSequence) -> tuple[float, np.ndarray]:
        """Total log-probability and the per-token increments that sum to it."""
        with no_grad():
            logprobs = self.next_token_logprobs(self._inputs(y))
        increments = logprobs.data[np.arange(len(y)), np.asarray(y) - 1]
        return float(increments.sum()), increments

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.state_dict(ELM_PREFIX))

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], cfg: ExternalLMConfig, vocab_size: int) -> "ExternalLM":
        lm = cls(cfg, vocab_size, np.random.default_rng(0))
        lm.load_state_dict(select_prefix(load_checkpoint(path), [ELM_PREFIX]), prefix=ELM_PREFIX)
        return lm


class ElmScorer:
    """
    Next-label scores for decoding, cached per prefix.

    Prefixes longer than the model context are scored on their most recent
    ``context_length - 1`` labels.
    """

    def __init__(self, lm: ExternalLM, max_cache: Optional[int] = 100_000):
        self.lm = lm
        self.max_cache = max_cache
        self._cache: dict = {}

    def next_logprobs(self, prefix: TokenSequence) -> np.ndarray:
        key = tuple(prefix)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        window = key[-(self.lm.cfg.context_length - 1) :] if key else ()
        inputs = np.asarray((BLANK_ID,) + window, dtype=np.int64)
        with no_grad():
            scores = self.lm.next_token_logprobs(inputs).data[-1]
        if self.max_cache is not None and len(self._cache) >= self.max_cache:
            self._cache.clear()
        self._cache[key] = scores
        return scores
