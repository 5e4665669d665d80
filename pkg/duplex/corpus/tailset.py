import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from duplex.corpus.splits import Utterance, unigram_frequencies
from duplex.corpus.synth import CorpusSpec, synthesize_utterance
from duplex.corpus.vocabulary import TokenSequence

log = logging.getLogger(__name__)

# Tail-set configuration of the full-scale setup: 10k transcripts, tau 1e-5.
REFERENCE_TAU = 1e-5
REFERENCE_SIZE = 10_000


class EmptyTailSetError(UserWarning):
    """No transcript of the text-only pool contains a qualifying token."""

    pass


@dataclass(frozen=True)
class TailSetConfig:
    tau: float = 1e-3
    target_size: int = 100

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.target_size < 1:
            raise ValueError(f"target_size must be at least 1, got {self.target_size}")


def tail_tokens(paired_texts: Sequence[TokenSequence], text_only: Sequence[TokenSequence], tau: float) -> set:
    """Tokens rarer than ``tau`` in the paired pool but more common than ``tau`` in the text pool."""
    paired = unigram_frequencies(paired_texts)
    unpaired = unigram_frequencies(text_only)
    return {token for token, freq in unpaired.items() if freq > tau and paired.get(token, 0.0) < tau}


def is_tail_transcript(y: TokenSequence, qualifying: set) -> bool:
    return any(token in qualifying for token in y)


def build_tail_set(
    paired_texts: Sequence[TokenSequence],
    text_only: Sequence[TokenSequence],
    cfg: TailSetConfig,
    spec: CorpusSpec,
) -> list:
    """
    Sample up to ``cfg.target_size`` text-only transcripts that contain a tail token.

    Sampling is uniform without replacement; every selected transcript is
    paired with features synthesized at the test-clean noise level.

    Raises:
        EmptyTailSetError: If no transcript qualifies.
    """
    qualifying = tail_tokens(paired_texts, text_only, cfg.tau)
    candidates = [y for y in text_only if is_tail_transcript(y, qualifying)]
    if not candidates:
        raise EmptyTailSetError(
            f"No text-only transcript contains a token with frequency below {cfg.tau} in the paired pool "
            f"and above it in the text-only pool"
        )
    log.info(f"{len(qualifying)} tail tokens, {len(candidates)} qualifying transcripts")
    if len(candidates) < cfg.target_size:
        log.warning(f"Only {len(candidates)} qualifying transcripts, fewer than the requested {cfg.target_size}")

    rng = np.random.default_rng([spec.seed, 3])
    picked = rng.choice(len(candidates), size=min(cfg.target_size, len(candidates)), replace=False)
    tail = []
    for i, index in enumerate(sorted(int(k) for k in picked)):
        y = candidates[index]
        features = synthesize_utterance(y, spec, np.random.default_rng([spec.seed, 4, i]))
        tail.append(Utterance(f"TAIL-{i:06d}", y, features))
    return tail
