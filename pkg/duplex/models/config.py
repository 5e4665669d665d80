"""Hyperparameters of every network. Input and output sizes are wired by ``DuplexModel``."""

from dataclasses import dataclass, field
from typing import Tuple

from duplex.frontend import FrontendConfig

# Look-ahead of the cascaded encoder in the full-scale system.
DELAY_MS = 900


def right_context_frames_for(frame_period_ms: int, delay_ms: int = DELAY_MS) -> int:
    """Number of encoder frames covering ``delay_ms`` of right context."""
    if frame_period_ms <= 0:
        raise ValueError(f"Frame period must be positive, got {frame_period_ms}")
    return int(round(delay_ms / frame_period_ms))


@dataclass(frozen=True)
class StreamingEncoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    right_context_frames: int = 0

    def __post_init__(self):
        if self.right_context_frames != 0:
            raise ValueError("The streaming encoder has left context only (right_context_frames must be 0)")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class DelayedEncoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    right_context_frames: int = 6

    def __post_init__(self):
        if self.right_context_frames < 0:
            raise ValueError("right_context_frames must be non-negative")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class TextEncoderConfig:
    embed_dim: int = 32
    num_conv_layers: int = 3
    conv_width: int = 5
    recurrent_dim: int = 16

    def __post_init__(self):
        if self.conv_width % 2 == 0:
            raise ValueError(f"conv_width must be odd, got {self.conv_width}")

    @property
    def output_dim(self) -> int:
        # forward and backward states are concatenated
        return 2 * self.recurrent_dim


@dataclass(frozen=True)
class AudioDecoderConfig:
    prenet_dims: Tuple[int, int] = (32, 32)
    prenet_dropout: float = 0.5
    recurrent_dim: int = 64
    attention_dim: int = 32
    postnet_layers: int = 3
    postnet_dim: int = 32
    postnet_width: int = 5
    max_decode_frames: int = 60
    stop_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "prenet_dims", tuple(self.prenet_dims))
        if len(self.prenet_dims) != 2:
            raise ValueError("The pre-net has exactly two layers")
        if not 0.0 <= self.prenet_dropout < 1.0:
            raise ValueError(f"prenet_dropout must be in [0, 1), got {self.prenet_dropout}")
        if self.postnet_layers < 1:
            raise ValueError("postnet_layers must be at least 1")
        if self.max_decode_frames < 1:
            raise ValueError("max_decode_frames must be at least 1")


@dataclass(frozen=True)
class HatConfig:
    embed_dim: int = 32
    context_size: int = 2
    pred_dim: int = 64
    joint_dim: int = 64


@dataclass(frozen=True)
class ExternalLMConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 128
    context_length: int = 32

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.context_length < 2:
            raise ValueError("context_length must be at least 2")


@dataclass(frozen=True)
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    streaming: StreamingEncoderConfig = field(default_factory=StreamingEncoderConfig)
    delayed: DelayedEncoderConfig = field(default_factory=DelayedEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    audio_decoder: AudioDecoderConfig = field(default_factory=AudioDecoderConfig)
    hat: HatConfig = field(default_factory=HatConfig)

    def __post_init__(self):
        if self.delayed.model_dim != self.streaming.model_dim:
            raise ValueError(
                "Both encoder paths feed the same transducer joint: "
                f"delayed.model_dim {self.delayed.model_dim} != streaming.model_dim {self.streaming.model_dim}"
            )
