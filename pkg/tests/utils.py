"""Helper functions for tests"""

import functools
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from duplex.corpus.splits import CorpusSplits
from duplex.corpus.synth import CorpusSpec
from duplex.frontend import FeatureSequence, FrontendConfig, SpecAugmentConfig
from duplex.models.config import (
    AudioDecoderConfig,
    DelayedEncoderConfig,
    ExternalLMConfig,
    HatConfig,
    ModelConfig,
    StreamingEncoderConfig,
    TextEncoderConfig,
)
from duplex.tensor import Array, backward, no_grad

FD_STEP = 1e-6
FD_TOLERANCE = 1e-5


def tiny_model_config(num_layers: int = 1, right_context_frames: int = 2) -> ModelConfig:
    """A model small enough for finite differences and brute-force decoding."""
    return ModelConfig(
        frontend=FrontendConfig(
            stack=2,
            stride=1,
            spec_augment=SpecAugmentConfig(freq_mask_param=2, num_time_masks=1, time_mask_param=1),
        ),
        streaming=StreamingEncoderConfig(num_layers=num_layers, model_dim=8, num_heads=2, ff_dim=12),
        delayed=DelayedEncoderConfig(
            num_layers=num_layers, model_dim=8, num_heads=2, ff_dim=12, right_context_frames=right_context_frames
        ),
        text=TextEncoderConfig(embed_dim=6, num_conv_layers=1, conv_width=3, recurrent_dim=4),
        audio_decoder=AudioDecoderConfig(
            prenet_dims=(6, 6),
            prenet_dropout=0.5,
            recurrent_dim=8,
            attention_dim=6,
            postnet_layers=2,
            postnet_dim=6,
            postnet_width=3,
            max_decode_frames=10,
        ),
        hat=HatConfig(embed_dim=4, context_size=2, pred_dim=6, joint_dim=6),
    )


def tiny_lm_config(context_length: int = 8) -> ExternalLMConfig:
    return ExternalLMConfig(num_layers=1, num_heads=1, model_dim=4, ff_dim=8, context_length=context_length)


def tiny_corpus_spec(seed: int = 0, **overrides) -> CorpusSpec:
    values = dict(
        vocab_size=8,
        sentence_length=(2, 4),
        frames_per_token=(2, 3),
        feature_dim=4,
        num_paired=12,
        num_audio_only=12,
        num_text_only=40,
        num_test_clean=4,
        num_test_other=4,
        seed=seed,
    )
    values.update(overrides)
    return CorpusSpec(**values)


def random_features(rng: np.random.Generator, num_frames: int, dim: int) -> FeatureSequence:
    return FeatureSequence(rng.normal(size=(num_frames, dim)), 10)


def random_transcript(rng: np.random.Generator, vocab_size: int, length: int) -> tuple:
    return tuple(int(t) for t in rng.integers(1, vocab_size, size=length))


def count_utterances(splits: CorpusSplits) -> dict:
    return {name: len(records) for name, records in splits.by_name().items()}


# Finite differences


def gradient_error(
    loss_fn: Callable[[], Array],
    params: Sequence[Array],
    num_coordinates: int = 12,
    h: float = FD_STEP,
    seed: int = 0,
) -> float:
    """
    Largest relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` must be deterministic: it is called once under the tape and
    twice per probed coordinate under ``no_grad``. Coordinates are drawn at
    random from all parameters that receive a gradient.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    reached = {id(leaf) for leaf in backward(loss)}
    candidates = [p for p in params if id(p) in reached]
    if not candidates:
        raise AssertionError("The loss does not depend on any of the given parameters")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_coordinates):
        p = candidates[int(rng.integers(len(candidates)))]
        index = tuple(int(rng.integers(n)) for n in p.shape)
        original = p.data.copy()
        with no_grad():
            shifted = original.copy()
            shifted[index] += h
            p.data = shifted
            upper = loss_fn().item()
            shifted = original.copy()
            shifted[index] -= h
            p.data = shifted
            lower = loss_fn().item()
        p.data = original
        numeric = (upper - lower) / (2 * h)
        analytic = float(p.grad[index])
        # gradients below the floor are compared absolutely
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        worst = max(worst, error)
    return worst


def input_gradient_error(fn: Callable[[Array], Array], x: np.ndarray, h: float = FD_STEP) -> float:
    """Like ``gradient_error`` for every entry of one input array."""
    leaf = Array(x, requires_grad=True)
    backward(fn(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    worst = 0.0
    for index in np.ndindex(*x.shape):
        upper, lower = x.copy(), x.copy()
        upper[index] += h
        lower[index] -= h
        with no_grad():
            numeric = (fn(Array(upper)).item() - fn(Array(lower)).item()) / (2 * h)
        error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), 1e-3)
        worst = max(worst, error)
    return worst


# Brute-force oracles


def alignment_logprob_brute_force(log_blank: np.ndarray, log_emit: np.ndarray) -> float:
    """Log-sum over every monotonic alignment, enumerated explicitly."""
    num_frames, num_nodes = log_blank.shape
    num_labels = num_nodes - 1
    # the last step is always the blank out of the final node
    slots = num_frames - 1 + num_labels
    scores = []
    for positions in itertools.combinations(range(slots), num_labels):
        t, u, score = 0, 0, 0.0
        for slot in range(slots):
            if slot in positions:
                score += log_emit[t, u]
                u += 1
            else:
                score += log_blank[t, u]
                t += 1
        scores.append(score + log_blank[t, u])
    return float(np.logaddexp.reduce(scores))


def edit_cost_brute_force(ref: Sequence[int], hyp: Sequence[int]) -> tuple[int, int]:
    """Smallest (edit cost, insertions plus deletions) over all alignments, by exhaustive recursion."""

    @functools.lru_cache(maxsize=None)
    def best(i: int, j: int) -> tuple[int, int]:
        if i == len(ref):
            return len(hyp) - j, len(hyp) - j
        if j == len(hyp):
            return len(ref) - i, len(ref) - i
        diagonal = best(i + 1, j + 1)
        deletion = best(i + 1, j)
        insertion = best(i, j + 1)
        return min(
            (diagonal[0] + (ref[i] != hyp[j]), diagonal[1]),
            (deletion[0] + 1, deletion[1] + 1),
            (insertion[0] + 1, insertion[1] + 1),
        )

    return best(0, 0)


def exhaustive_decode(
    score_fn: Callable[[tuple], float], num_labels: int, max_length: int
) -> tuple[tuple, float]:
    """Best label sequence of length ``0..max_length`` under ``score_fn``."""
    best: Optional[tuple] = None
    best_score = -np.inf
    for length in range(max_length + 1):
        for y in itertools.product(range(1, num_labels + 1), repeat=length):
            score = score_fn(y)
            if score > best_score:
                best, best_score = y, score
    return best, best_score
