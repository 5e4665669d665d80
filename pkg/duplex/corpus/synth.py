"""
Synthetic audio channel.

Every token owns a fixed block of feature frames drawn once from a seeded
Gaussian. An utterance is the concatenation of its tokens' blocks, scaled by a
per-utterance speaker gain and corrupted with i.i.d. Gaussian noise.
"""

import functools
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from duplex.corpus.vocabulary import BLANK_ID, TokenSequence, Vocabulary, VocabularyError
from duplex.frontend import FeatureSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 60
    zipf_exponent: float = 1.5
    text_zipf_exponent: float = 0.6
    sentence_length: Tuple[int, int] = (4, 9)
    frames_per_token: Tuple[int, int] = (2, 5)
    feature_dim: int = 16
    frame_period_ms: int = 10
    noise_sigma: float = 0.1
    other_noise_sigma: float = 0.3
    speaker_gain: Tuple[float, float] = (0.8, 1.2)
    num_paired: int = 200
    num_audio_only: int = 2000
    num_text_only: int = 10000
    num_test_clean: int = 100
    num_test_other: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("sentence_length", "frames_per_token", "speaker_gain"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        sizes = (self.num_paired, self.num_audio_only, self.num_text_only, self.num_test_clean, self.num_test_other)
        if min(sizes) <= 0:
            raise ValueError(f"Split sizes must be positive, got {sizes}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.other_noise_sigma <= self.noise_sigma:
            raise ValueError("The test-other analog needs a strictly larger noise_sigma than test-clean")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the blank and one token")
        if not 1 <= self.sentence_length[0] <= self.sentence_length[1]:
            raise ValueError(f"Invalid sentence_length range {self.sentence_length}")
        if not 1 <= self.frames_per_token[0] <= self.frames_per_token[1]:
            raise ValueError(f"Invalid frames_per_token range {self.frames_per_token}")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.synthetic(self.vocab_size)


class PrototypeTable:
    """Deterministic per-token feature blocks for one corpus specification."""

    def __init__(self, durations: np.ndarray, prototypes: list):
        self.durations = durations
        self.prototypes = prototypes

    @classmethod
    def from_spec(cls, spec: CorpusSpec) -> "PrototypeTable":
        rng = np.random.default_rng([spec.seed, 0])
        low, high = spec.frames_per_token
        durations = rng.integers(low, high + 1, size=spec.vocab_size)
        durations[BLANK_ID] = 0
        prototypes = [rng.normal(0.0, 1.0, size=(int(d), spec.feature_dim)) for d in durations]
        table = cls(durations, prototypes)
        table.assert_distinct()
        return table

    def assert_distinct(self, atol: float = 1e-6) -> None:
        """Check that no two tokens share a prototype block."""
        for i in range(1, len(self.prototypes)):
            for j in range(i + 1, len(self.prototypes)):
                a, b = self.prototypes[i], self.prototypes[j]
                if a.shape == b.shape and np.allclose(a, b, atol=atol):
                    raise AssertionError(f"Tokens {i} and {j} have indistinguishable prototypes")

    def block(self, token: int) -> np.ndarray:
        if token == BLANK_ID or not 0 <= token < len(self.prototypes):
            raise VocabularyError(f"No prototype for token id {token}")
        return self.prototypes[token]

    def num_frames(self, y: TokenSequence) -> int:
        return int(sum(self.durations[t] for t in y))


@functools.lru_cache(maxsize=8)
def prototype_table(spec: CorpusSpec) -> PrototypeTable:
    return PrototypeTable.from_spec(spec)


def synthesize_utterance(
    y: TokenSequence,
    spec: CorpusSpec,
    speaker_rng: np.random.Generator,
    noise_sigma: Optional[float] = None,
) -> FeatureSequence:
    """
    Render a transcript as feature frames.

    Args:
        y (TokenSequence): Non-empty transcript.
        spec (CorpusSpec): Corpus specification owning the prototype table.
        speaker_rng (np.random.Generator): Source of the speaker gain and the noise.
        noise_sigma (float | None): Overrides ``spec.noise_sigma`` (the test-other analog).

    Raises:
        ValueError: If the transcript is empty.
        VocabularyError: If a token id has no prototype.
    """
    if len(y) == 0:
        raise ValueError("Cannot synthesize an empty transcript")
    table = prototype_table(spec)
    clean = np.concatenate([table.block(int(t)) for t in y], axis=0)
    sigma = spec.noise_sigma if noise_sigma is None else noise_sigma
    gain = speaker_rng.uniform(*spec.speaker_gain)
    noise = speaker_rng.normal(0.0, 1.0, size=clean.shape) * sigma
    return FeatureSequence(gain * clean + noise, spec.frame_period_ms)


def zipf_distribution(num_labels: int, exponent: float) -> np.ndarray:
    """Probabilities over label ids ``1..num_labels``, rank equal to id."""
    weights = np.arange(1, num_labels + 1, dtype=np.float64) ** -exponent
    return weights / weights.sum()


def sample_transcript(rng: np.random.Generator, probs: np.ndarray, length_range: Tuple[int, int]) -> TokenSequence:
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    return tuple(int(i) + 1 for i in rng.choice(len(probs), size=length, p=probs))
