import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from duplex.frontend import FeatureSequence, prepare_asr_input
from duplex.hat import HatDecoder
from duplex.models.audio_decoder import AudioDecoder
from duplex.models.bridge import Bridge
from duplex.models.config import ModelConfig
from duplex.models.encoders import DelayedEncoder, StreamingEncoder
from duplex.models.text_encoder import TextEncoder
from duplex.tensor import Array, Module, load_checkpoint, no_grad, save_checkpoint, select_prefix

log = logging.getLogger(__name__)

COMPONENT_PREFIXES = ("enc_s.", "enc_d.", "enc_t.", "dec_a.", "bridge.", "hat.")
ASR_PREFIXES = ("enc_s.", "enc_d.", "hat.")
TTS_PREFIXES = ("enc_t.", "dec_a.")


class DuplexModel(Module):
    """
    The joint ASR/TTS model.

    Attribute names are the checkpoint prefixes, so components can be loaded
    selectively, e.g. the ASR and TTS halves from a supervised run.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        vocab_size: int,
        feature_dim: int,
        frame_period_ms: int = 10,
        seed: int = 0,
    ):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        rng = np.random.default_rng([seed, 100])
        audio_dim = cfg.streaming.model_dim
        text_dim = cfg.text.output_dim
        self.enc_s = StreamingEncoder(cfg.streaming, cfg.frontend.stack * feature_dim, rng)
        self.enc_d = DelayedEncoder(cfg.delayed, rng)
        self.enc_t = TextEncoder(cfg.text, vocab_size, rng)
        self.dec_a = AudioDecoder(cfg.audio_decoder, feature_dim, text_dim, rng, frame_period_ms=frame_period_ms)
        self.bridge = Bridge(audio_dim, text_dim, rng)
        self.hat = HatDecoder(cfg.hat, vocab_size, audio_dim, rng)

    def asr_input(
        self, x: FeatureSequence, training: bool = False, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        """Stacked (and, when training, masked) frames for the streaming encoder."""
        return prepare_asr_input(x, self.cfg.frontend, training=training, rng=rng).frames

    def encode_streaming(self, frames) -> Array:
        return self.enc_s(frames)

    def encode_delayed(self, h) -> Array:
        return self.enc_d(h)

    def encode_text(self, y) -> Array:
        return self.enc_t(y)

    def encode_audio(self, x: FeatureSequence, delayed: bool = True) -> np.ndarray:
        """Inference-time encoding of raw features along the streaming or cascaded path."""
        with no_grad():
            h = self.encode_streaming(self.asr_input(x))
            if delayed:
                h = self.encode_delayed(h)
        return h.data

    def parameter_counts(self) -> dict[str, int]:
        return {prefix.rstrip("."): getattr(self, prefix.rstrip(".")).num_parameters() for prefix in COMPONENT_PREFIXES}

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
        tensors = self.state_dict()
        if extra:
            tensors.update(extra)
        return save_checkpoint(path, tensors)

    def load(self, path_or_tensors, prefixes=COMPONENT_PREFIXES) -> list[str]:
        """Load the components named by ``prefixes`` from a checkpoint file or tensor map."""
        tensors = path_or_tensors if isinstance(path_or_tensors, dict) else load_checkpoint(path_or_tensors)
        loaded = []
        for prefix in prefixes:
            component = getattr(self, prefix.rstrip("."))
            loaded += component.load_state_dict(select_prefix(tensors, [prefix]), prefix=prefix)
        return loaded
