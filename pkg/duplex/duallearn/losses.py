"""
The ten training losses and their composition into one batch objective.

Paired third (S):      L_S = (asr_streaming + asr_delay) / 2 + tts + text_recon + audio_recon
Audio-only third (U_A): L_A = u_tts + u_audio_recon
Text-only third (U_T):  L_T = (u_asr_streaming + u_asr_delay) / 2 + u_text_recon

Pseudo-labels are produced under ``no_grad`` in inference mode, so no
gradient reaches the model that produced them. Reconstruction is scored with
the loss matching its target: transducer likelihood for text, MSE for audio.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Callable, Optional

import numpy as np

from duplex.corpus.vocabulary import TokenSequence
from duplex.decode import FusionConfig, beam_search
from duplex.frontend import FeatureSequence
from duplex.hat import hat_loss
from duplex.models.duplex import DuplexModel
from duplex.tensor import Array, ShapeError, concat, log_sigmoid, mean, mul, neg, no_grad

log = logging.getLogger(__name__)

PAIRED_LOSSES = ("asr_streaming", "asr_delay", "tts", "text_recon", "audio_recon")
AUDIO_ONLY_LOSSES = ("u_tts", "u_audio_recon")
TEXT_ONLY_LOSSES = ("u_asr_streaming", "u_asr_delay", "u_text_recon")
LOSS_NAMES = PAIRED_LOSSES + AUDIO_ONLY_LOSSES + TEXT_ONLY_LOSSES

RECON_LOSSES = frozenset({"text_recon", "u_text_recon", "audio_recon", "u_audio_recon"})
DUAL_LOSSES = frozenset({"u_asr_streaming", "u_asr_delay", "u_tts"})
SUPERVISED_LOSSES = frozenset({"asr_streaming", "asr_delay", "tts"})
ASR_LOSSES = frozenset({"asr_streaming", "asr_delay", "u_asr_streaming", "u_asr_delay"})

THIRDS = {"paired": PAIRED_LOSSES, "audio_only": AUDIO_ONLY_LOSSES, "text_only": TEXT_ONLY_LOSSES}


class AblationMode(str, Enum):
    ALL = "all"
    DL = "dl"
    RECON = "recon"
    SUPERVISED = "supervised"

    @classmethod
    def from_name(cls, name: str) -> "AblationMode":
        name = name.lower()
        if name == "baseline":
            return cls.SUPERVISED
        try:
            return cls(name)
        except ValueError:
            raise LookupError(f"Unknown mode '{name}'. Choose from baseline, all, dl, recon")

    @property
    def losses(self) -> frozenset:
        if self is AblationMode.ALL:
            return frozenset(LOSS_NAMES)
        if self is AblationMode.DL:
            return frozenset(LOSS_NAMES) - RECON_LOSSES
        if self is AblationMode.RECON:
            return frozenset(LOSS_NAMES) - DUAL_LOSSES
        return SUPERVISED_LOSSES

    @property
    def run_label(self) -> str:
        return "BASELINE" if self is AblationMode.SUPERVISED else f"E-{self.name}"


@dataclass
class TaskWeights:
    """Per-loss multipliers; the ASR pairs are additionally halved."""

    asr_streaming: float = 1.0
    asr_delay: float = 1.0
    tts: float = 1.0
    text_recon: float = 1.0
    audio_recon: float = 1.0
    u_tts: float = 1.0
    u_audio_recon: float = 1.0
    u_asr_streaming: float = 1.0
    u_asr_delay: float = 1.0
    u_text_recon: float = 1.0

    def __getitem__(self, name: str) -> float:
        return getattr(self, name)

    def factor(self, name: str) -> float:
        return self[name] * (0.5 if name in ASR_LOSSES else 1.0)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TriBatch:
    """One step's batch: equal thirds from S, U_A and U_T."""

    paired: list
    audio_only: list
    text_only: list
    ids: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {len(self.paired), len(self.audio_only), len(self.text_only)}
        if len(sizes) != 1:
            raise ValueError(
                f"Batch thirds differ in size: paired={len(self.paired)} "
                f"audio_only={len(self.audio_only)} text_only={len(self.text_only)}"
            )

    @property
    def third_size(self) -> int:
        return len(self.paired)

    def all_ids(self) -> list:
        return [utt_id for part in ("paired", "audio_only", "text_only") for utt_id in self.ids.get(part, [])]


@dataclass
class LossBreakdown:
    total: Array
    components: dict
    aggregates: dict
    skipped: Counter


# Loss functions


def mse(prediction: Array, target: np.ndarray) -> Array:
    diff = prediction - np.asarray(target, dtype=np.float64)
    return mean(mul(diff, diff))


def stop_bce(stop_logits: Array) -> Array:
    """Binary cross-entropy of the stop head against a target that fires on the last frame only."""
    targets = np.zeros(stop_logits.shape)
    targets[-1] = 1.0
    log_p = log_sigmoid(stop_logits)
    log_not_p = log_sigmoid(neg(stop_logits))
    return neg(mean(mul(log_p, targets) + mul(log_not_p, 1.0 - targets)))


def loss_supervised_asr(
    model: DuplexModel, x: FeatureSequence, y: TokenSequence, training: bool, rng: Optional[np.random.Generator]
) -> Optional[tuple]:
    """
    Transducer losses of both encoder paths sharing the decoder.

    Returns None when ``x`` is too short for frame stacking.
    """
    frames = model.asr_input(x, training=training, rng=rng)
    if frames.shape[0] == 0:
        return None
    streaming = model.encode_streaming(frames)
    delayed = model.encode_delayed(streaming)
    return hat_loss(model.hat.lattice(streaming, y), y), hat_loss(model.hat.lattice(delayed, y), y)


def loss_supervised_tts(
    model: DuplexModel, x: FeatureSequence, y: TokenSequence, training: bool, rng: Optional[np.random.Generator]
) -> Array:
    """Post-net MSE plus the stop-token cross-entropy (weight 1)."""
    out = model.dec_a.teacher_forced(model.encode_text(y), x.frames, training, rng)
    return mse(out.frames, x.frames) + stop_bce(out.stop_logits)


def loss_text_recon(model: DuplexModel, y: TokenSequence) -> Array:
    """Text encoder, text-to-audio bridge, transducer decoder scored against ``y``."""
    bridged = model.bridge.bridge_text_to_audio(model.encode_text(y))
    return hat_loss(model.hat.lattice(bridged, y), y)


def loss_audio_recon(
    model: DuplexModel, x: FeatureSequence, training: bool, rng: Optional[np.random.Generator]
) -> Optional[Array]:
    """Cascaded audio encoder, audio-to-text bridge, teacher-forced audio decoder scored by MSE."""
    frames = model.asr_input(x, training=training, rng=rng)
    if frames.shape[0] == 0:
        return None
    encoded = model.encode_delayed(model.encode_streaming(frames))
    out = model.dec_a.teacher_forced(model.bridge.bridge_audio_to_text(encoded), x.frames, training, rng)
    return mse(out.frames, x.frames)


def loss_unsup_asr(model, x_hat, y, training, rng) -> Optional[tuple]:
    return loss_supervised_asr(model, x_hat, y, training, rng)


def loss_unsup_tts(model, x, y_hat, training, rng) -> Array:
    return loss_supervised_tts(model, x, y_hat, training, rng)


# Pseudo-labels


def pseudo_label_text(model: DuplexModel, y: TokenSequence) -> Optional[FeatureSequence]:
    """Synthesized features for an unpaired transcript; None when too short for the ASR front end."""
    with no_grad():
        x_hat = model.dec_a.infer(model.encode_text(y))
    if x_hat.num_frames < model.cfg.frontend.stack:
        return None
    return x_hat


def pseudo_label_audio(model: DuplexModel, x: FeatureSequence, fusion: FusionConfig) -> Optional[TokenSequence]:
    """Top beam-search transcript of the cascaded path; None when empty or undecodable."""
    try:
        enc = model.encode_audio(x, delayed=True)
    except ShapeError:
        return None
    tokens = beam_search(model.hat, enc, fusion)[0].tokens
    return tokens or None


class PseudoLabelCache:
    """
    Pseudo-labels by utterance id, regenerated once they are ``refresh_every`` steps old.

    With ``refresh_every=1`` every request produces a fresh label.
    """

    def __init__(self, refresh_every: int = 1):
        if refresh_every < 1:
            raise ValueError("refresh_every must be at least 1")
        self.refresh_every = refresh_every
        self._entries: dict = {}

    def get(self, key: str, step: int, produce: Callable):
        entry = self._entries.get(key)
        if entry is not None and step - entry[0] < self.refresh_every:
            return entry[1]
        value = produce()
        if self.refresh_every > 1:
            self._entries[key] = (step, value)
        return value

    def clear(self) -> None:
        self._entries.clear()


class PseudoLabeler:
    """
    Pseudo-label source for the unsupervised thirds.

    ``prefetch`` produces a batch's labels on worker threads before the
    gradient step; the model must not be updated while it runs.
    """

    def __init__(self, fusion: FusionConfig, cache: Optional[PseudoLabelCache] = None):
        self.fusion = fusion
        self.cache = cache or PseudoLabelCache()
        self._primed: dict = {}

    def _lookup(self, key: str, step: int, produce: Callable):
        if (key, step) in self._primed:
            return self._primed.pop((key, step))
        return self.cache.get(key, step, produce)

    def audio(self, model: DuplexModel, key: str, x: FeatureSequence, step: int) -> Optional[TokenSequence]:
        return self._lookup(f"U_A:{key}", step, lambda: pseudo_label_audio(model, x, self.fusion))

    def text(self, model: DuplexModel, key: str, y: TokenSequence, step: int) -> Optional[FeatureSequence]:
        return self._lookup(f"U_T:{key}", step, lambda: pseudo_label_text(model, y))

    def prefetch(self, model: DuplexModel, batch: TriBatch, step: int, workers: int, audio: bool, text: bool) -> None:
        jobs = []
        if audio:
            for key, x in zip(batch.ids.get("audio_only", []), batch.audio_only):
                jobs.append((f"U_A:{key}", lambda x=x: pseudo_label_audio(model, x, self.fusion)))
        if text:
            for key, y in zip(batch.ids.get("text_only", []), batch.text_only):
                jobs.append((f"U_T:{key}", lambda y=y: pseudo_label_text(model, y)))
        self._primed.clear()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key: pool.submit(self.cache.get, key, step, produce) for key, produce in jobs}
        for key, future in futures.items():
            self._primed[(key, step)] = future.result()


# Composition


def active_losses(mode: AblationMode, weights: TaskWeights, thirds=("paired", "audio_only", "text_only")) -> set:
    allowed = {name for third in thirds for name in THIRDS[third]}
    return {name for name in mode.losses if weights[name] != 0.0 and name in allowed}


def compose_losses(
    model: DuplexModel,
    batch: TriBatch,
    mode: AblationMode,
    weights: TaskWeights,
    training: bool,
    rng: Optional[np.random.Generator],
    labeler: PseudoLabeler,
    step: int = 0,
    thirds=("paired", "audio_only", "text_only"),
) -> LossBreakdown:
    """
    Evaluate the batch objective.

    Every loss is averaged over the items of its third that produced it and
    the averages are summed with their weights, the ASR pairs halved. Items
    that cannot be scored (too-short audio, empty pseudo-labels) are skipped
    and counted.
    """
    active = active_losses(mode, weights, thirds)
    terms: dict = {name: [] for name in LOSS_NAMES}
    skipped: Counter = Counter()
    ids = batch.ids

    for i, (x, y) in enumerate(batch.paired):
        if active & {"asr_streaming", "asr_delay"}:
            pair = loss_supervised_asr(model, x, y, training, rng)
            if pair is None:
                skipped["short_audio"] += 1
            else:
                terms["asr_streaming"].append(pair[0])
                terms["asr_delay"].append(pair[1])
        if "tts" in active:
            terms["tts"].append(loss_supervised_tts(model, x, y, training, rng))
        if "text_recon" in active:
            terms["text_recon"].append(loss_text_recon(model, y))
        if "audio_recon" in active:
            recon = loss_audio_recon(model, x, training, rng)
            if recon is None:
                skipped["short_audio"] += 1
            else:
                terms["audio_recon"].append(recon)

    audio_ids = ids.get("audio_only", [str(i) for i in range(len(batch.audio_only))])
    for key, x in zip(audio_ids, batch.audio_only):
        if "u_tts" in active:
            y_hat = labeler.audio(model, key, x, step)
            if y_hat is None:
                skipped["empty_pseudo_transcript"] += 1
                log.debug(f"Empty pseudo-transcript for '{key}'")
            else:
                terms["u_tts"].append(loss_unsup_tts(model, x, y_hat, training, rng))
        if "u_audio_recon" in active:
            recon = loss_audio_recon(model, x, training, rng)
            if recon is None:
                skipped["short_audio"] += 1
            else:
                terms["u_audio_recon"].append(recon)

    text_ids = ids.get("text_only", [str(i) for i in range(len(batch.text_only))])
    for key, y in zip(text_ids, batch.text_only):
        if active & {"u_asr_streaming", "u_asr_delay"}:
            x_hat = labeler.text(model, key, y, step)
            pair = loss_unsup_asr(model, x_hat, y, training, rng) if x_hat is not None else None
            if pair is None:
                skipped["short_pseudo_audio"] += 1
                log.debug(f"Pseudo-audio for '{key}' too short to encode")
            else:
                terms["u_asr_streaming"].append(pair[0])
                terms["u_asr_delay"].append(pair[1])
        if "u_text_recon" in active:
            terms["u_text_recon"].append(loss_text_recon(model, y))

    total: Array = Array(0.0)
    components: dict = {}
    aggregates = {"L_S": 0.0, "L_A": 0.0, "L_T": 0.0}
    third_of = {name: third for third, names in THIRDS.items() for name in names}
    aggregate_of = {"paired": "L_S", "audio_only": "L_A", "text_only": "L_T"}
    for name in LOSS_NAMES:
        if name not in active or not terms[name]:
            continue
        reduced = mean(concat([value.reshape(1) for value in terms[name]], axis=0))
        components[name] = reduced.item()
        weighted = mul(reduced, weights.factor(name))
        total = total + weighted
        aggregates[aggregate_of[third_of[name]]] += weighted.item()
    return LossBreakdown(total, components, aggregates, skipped)

