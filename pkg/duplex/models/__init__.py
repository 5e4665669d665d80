# DuplexModel is imported from duplex.models.duplex, which depends on duplex.hat.
from duplex.models.audio_decoder import AudioDecoder, DecoderOutput
from duplex.models.bridge import Bridge
from duplex.models.config import (
    DELAY_MS,
    AudioDecoderConfig,
    DelayedEncoderConfig,
    ExternalLMConfig,
    HatConfig,
    ModelConfig,
    StreamingEncoderConfig,
    TextEncoderConfig,
    right_context_frames_for,
)
from duplex.models.encoders import DelayedEncoder, StreamingEncoder
from duplex.models.lm import ContextLengthError, ElmScorer, ExternalLM
from duplex.models.text_encoder import TextEncoder
