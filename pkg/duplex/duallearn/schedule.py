import logging
from dataclasses import dataclass, field
from typing import Optional

from duplex.corpus.splits import CorpusSplits
from duplex.duallearn.losses import TaskWeights, TriBatch
from duplex.utils import make_rng

log = logging.getLogger(__name__)

# Generator streams of one training run
PAIRED_STREAM, AUDIO_STREAM, TEXT_STREAM, AUGMENT_STREAM = 10, 11, 12, 13


@dataclass
class TrainConfig:
    third_size: int = 4
    pretrain_steps: int = 1500
    dual_steps: int = 1500
    lr: float = 1e-3
    warmup_steps: int = 100
    checkpoint_every: int = 500
    log_every: int = 50
    pseudo_beam_size: int = 4
    pseudo_refresh_every: int = 1
    pseudo_workers: int = 1
    accuracy_probe_size: int = 20
    alternating: bool = False
    weights: TaskWeights = field(default_factory=TaskWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = TaskWeights(**self.weights)
        if self.third_size < 1:
            raise ValueError("third_size must be at least 1")
        if min(self.pretrain_steps, self.dual_steps) < 0:
            raise ValueError("Step counts must be non-negative")
        if self.pseudo_workers < 1:
            raise ValueError("pseudo_workers must be at least 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be at least 1")


def alternating_third(step: int) -> str:
    """Negative control: each step trains on one third only, cycling S, U_A, U_T."""
    return ("paired", "audio_only", "text_only")[step % 3]


class TriBatchSampler:
    """
    Draws equal thirds from the three pools, each pool from its own generator.

    Utterances without features (missing feature files) are left out of the
    audio pools.
    """

    def __init__(self, splits: CorpusSplits, third_size: int, seed: int):
        self.paired = [u for u in splits.paired if u.features is not None and u.tokens]
        self.audio_only = [u for u in splits.audio_only if u.features is not None]
        self.text_only = [u for u in splits.text_only if u.tokens]
        for name, pool in (("S", self.paired), ("U_A", self.audio_only), ("U_T", self.text_only)):
            if len(pool) < third_size:
                raise ValueError(f"Pool {name} holds {len(pool)} usable records, fewer than third_size {third_size}")
        self.third_size = third_size
        self.rngs = {
            "paired": make_rng(seed, PAIRED_STREAM),
            "audio_only": make_rng(seed, AUDIO_STREAM),
            "text_only": make_rng(seed, TEXT_STREAM),
        }

    def _draw(self, name: str, pool: list) -> list:
        picked = self.rngs[name].choice(len(pool), size=self.third_size, replace=False)
        return [pool[int(i)] for i in picked]

    def sample(self) -> TriBatch:
        paired = self._draw("paired", self.paired)
        audio = self._draw("audio_only", self.audio_only)
        text = self._draw("text_only", self.text_only)
        return TriBatch(
            paired=[(u.features, u.tokens) for u in paired],
            audio_only=[u.features for u in audio],
            text_only=[u.tokens for u in text],
            ids={
                "paired": [u.id for u in paired],
                "audio_only": [u.id for u in audio],
                "text_only": [u.id for u in text],
            },
        )

    def get_state(self) -> dict:
        return {name: rng.bit_generator.state for name, rng in self.rngs.items()}

    def set_state(self, state: Optional[dict]) -> None:
        for name, value in (state or {}).items():
            self.rngs[name].bit_generator.state = value
