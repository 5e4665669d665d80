import numpy as np

from duplex.models.layers import Linear
from duplex.tensor import Array, Module


class Bridge(Module):
    """The two linear maps between the audio and the text embedding spaces."""

    def __init__(self, audio_dim: int, text_dim: int, rng: np.random.Generator):
        self.audio_to_text = Linear(audio_dim, text_dim, rng)
        self.text_to_audio = Linear(text_dim, audio_dim, rng)

    def bridge_audio_to_text(self, h) -> Array:
        return self.audio_to_text(h)

    def bridge_text_to_audio(self, h) -> Array:
        return self.text_to_audio(h)
