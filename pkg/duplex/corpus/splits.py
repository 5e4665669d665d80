import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import rich.progress

from duplex.corpus.synth import CorpusSpec, sample_transcript, synthesize_utterance, zipf_distribution
from duplex.corpus.vocabulary import TokenSequence
from duplex.frontend import FeatureSequence

log = logging.getLogger(__name__)

SPLIT_NAMES = ("S", "U_A", "U_T", "test_clean", "test_other")


@dataclass
class Utterance:
    """One corpus record. ``hidden_tokens`` keeps the U_A truth in memory only."""

    id: str
    tokens: Optional[TokenSequence]
    features: Optional[FeatureSequence]
    hidden_tokens: Optional[TokenSequence] = None


@dataclass
class CorpusSplits:
    paired: list = field(default_factory=list)
    audio_only: list = field(default_factory=list)
    text_only: list = field(default_factory=list)
    test_clean: list = field(default_factory=list)
    test_other: list = field(default_factory=list)
    tail: list = field(default_factory=list)

    def by_name(self) -> dict:
        return {
            "S": self.paired,
            "U_A": self.audio_only,
            "U_T": self.text_only,
            "test_clean": self.test_clean,
            "test_other": self.test_other,
            "tail": self.tail,
        }


def generate_splits(spec: CorpusSpec, hide_progress: bool = True) -> CorpusSplits:
    """
    Draw every split of the synthetic corpus from ``spec``.

    S, U_A and the test sets share the paired-domain token distribution; U_T
    uses the flatter ``text_zipf_exponent`` so that tokens rare in S are
    common in U_T. U_A transcripts are generated, kept as ``hidden_tokens``
    and never written out.
    """
    num_labels = spec.vocab_size - 1
    paired_probs = zipf_distribution(num_labels, spec.zipf_exponent)
    text_probs = zipf_distribution(num_labels, spec.text_zipf_exponent)

    plan = [
        ("S", "S", spec.num_paired, paired_probs, spec.noise_sigma),
        ("U_A", "UA", spec.num_audio_only, paired_probs, spec.noise_sigma),
        ("U_T", "UT", spec.num_text_only, text_probs, None),
        ("test_clean", "TC", spec.num_test_clean, paired_probs, spec.noise_sigma),
        ("test_other", "TO", spec.num_test_other, paired_probs, spec.other_noise_sigma),
    ]
    splits = {}
    with rich.progress.Progress(
        "[bold blue]{task.description}",
        rich.progress.BarColumn(bar_width=None),
        "[magenta]{task.completed} of {task.total}",
        transient=True,
        disable=hide_progress,
    ) as progress:
        for index, (name, prefix, size, probs, sigma) in enumerate(plan):
            task = progress.add_task(f"Generating {name}", total=size)
            text_rng = np.random.default_rng([spec.seed, 1, index])
            records = []
            for i in range(size):
                tokens = sample_transcript(text_rng, probs, spec.sentence_length)
                features = None
                if sigma is not None:
                    # one generator per utterance keeps generation order-independent
                    speaker_rng = np.random.default_rng([spec.seed, 2, index, i])
                    features = synthesize_utterance(tokens, spec, speaker_rng, noise_sigma=sigma)
                utt_id = f"{prefix}-{i:06d}"
                if name == "U_A":
                    records.append(Utterance(utt_id, None, features, hidden_tokens=tokens))
                else:
                    records.append(Utterance(utt_id, tokens, features))
                progress.update(task, advance=1)
            splits[name] = records
            log.debug(f"Generated {size} records for split '{name}'")

    return CorpusSplits(
        paired=splits["S"],
        audio_only=splits["U_A"],
        text_only=splits["U_T"],
        test_clean=splits["test_clean"],
        test_other=splits["test_other"],
    )


def unigram_frequencies(texts: Iterable[TokenSequence]) -> dict:
    """Relative frequency of every observed token; unobserved tokens are absent (frequency 0)."""
    counts: Counter = Counter()
    for text in texts:
        counts.update(text)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("Cannot compute unigram frequencies of an empty collection")
    return {token: count / total for token, count in counts.items()}


def redraw_hidden_transcripts(spec: CorpusSpec, audio_only: list) -> int:
    """
    Re-attach the U_A truth to records loaded from disk.

    Transcripts come from their own generator stream, so they are redrawn
    without synthesizing audio. Returns the number of records restored.
    """
    text_rng = np.random.default_rng([spec.seed, 1, 1])
    probs = zipf_distribution(spec.vocab_size - 1, spec.zipf_exponent)
    truth = {}
    for i in range(spec.num_audio_only):
        truth[f"UA-{i:06d}"] = sample_transcript(text_rng, probs, spec.sentence_length)
    restored = 0
    for utt in audio_only:
        if utt.id in truth:
            utt.hidden_tokens = truth[utt.id]
            restored += 1
    return restored
