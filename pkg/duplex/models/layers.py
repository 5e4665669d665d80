"""
Building blocks shared by the networks. Sequences are (time x dim) arrays;
batches are handled by the callers, one utterance at a time.
"""

import logging
import math
from typing import Optional

import numpy as np

from duplex.tensor import (
    Array,
    Module,
    Parameter,
    ShapeError,
    as_array,
    attention,
    concat,
    getitem,
    layer_norm,
    relu,
    reshape,
    sigmoid,
    tanh,
)

log = logging.getLogger(__name__)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Optional[tuple] = None) -> np.ndarray:
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=shape or (fan_in, fan_out))


def causal_mask(n: int) -> np.ndarray:
    """``mask[i, j]`` is true when position i may see position j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def lookahead_mask(n: int, right_context: int) -> np.ndarray:
    """Full left context plus ``right_context`` future positions."""
    offsets = np.arange(n)[None, :] - np.arange(n)[:, None]
    return offsets <= right_context


def sinusoid_positions(n: int, dim: int, offset: int = 0) -> np.ndarray:
    positions = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : dim // 2]
    return table


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(glorot(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Array:
        x = as_array(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear layer expects last dimension {self.in_dim}, got {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(num_embeddings, dim)))

    def __call__(self, ids) -> Array:
        return getitem(self.table, np.asarray(ids, dtype=np.int64))


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x) -> Array:
        return layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden_dim, rng)
        self.outer = Linear(hidden_dim, dim, rng)

    def __call__(self, x) -> Array:
        return self.outer(relu(self.inner(x)))


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with separate key/value projection."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, memory_dim: Optional[int] = None):
        if dim % num_heads:
            raise ShapeError(f"dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(memory_dim or dim, dim, rng)
        self.value = Linear(memory_dim or dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def project_memory(self, memory) -> tuple[Array, Array]:
        return self.key(memory), self.value(memory)

    def attend(self, x, keys: Array, values: Array, mask: np.ndarray) -> Array:
        q = self.query(x)
        head_dim = q.shape[-1] // self.num_heads
        heads = []
        for h in range(self.num_heads):
            columns = (slice(None), slice(h * head_dim, (h + 1) * head_dim))
            heads.append(attention(getitem(q, columns), getitem(keys, columns), getitem(values, columns), mask))
        return self.output(concat(heads, axis=1) if len(heads) > 1 else heads[0])

    def __call__(self, x, mask: np.ndarray, memory=None) -> Array:
        keys, values = self.project_memory(x if memory is None else memory)
        return self.attend(x, keys, values, mask)


class AttentionBlock(Module):
    """Pre-norm self-attention block followed by a position-wise feed-forward layer."""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, rng: np.random.Generator):
        self.attn_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.ff_norm = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def __call__(self, x, mask: np.ndarray) -> Array:
        x = x + self.attn(self.attn_norm(x), mask)
        return x + self.ff(self.ff_norm(x))

    def step(self, x_row: Array, cache: dict) -> Array:
        """Process one new position given the keys and values of all earlier ones."""
        normed = self.attn_norm(x_row)
        k, v = self.attn.project_memory(normed)
        cache["keys"] = k if "keys" not in cache else concat([cache["keys"], k], axis=0)
        cache["values"] = v if "values" not in cache else concat([cache["values"], v], axis=0)
        mask = np.ones((1, cache["keys"].shape[0]), dtype=bool)
        x_row = x_row + self.attn.attend(normed, cache["keys"], cache["values"], mask)
        return x_row + self.ff(self.ff_norm(x_row))


class GRUCell(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        self.input_map = Linear(input_dim, 3 * hidden_dim, rng)
        self.hidden_map = Linear(hidden_dim, 3 * hidden_dim, rng)

    def initial_state(self) -> Array:
        return Array(np.zeros((1, self.hidden_dim)))

    def __call__(self, x, h: Array) -> Array:
        n = self.hidden_dim
        gx = self.input_map(x)
        gh = self.hidden_map(h)
        reset = sigmoid(gx[:, :n] + gh[:, :n])
        update = sigmoid(gx[:, n : 2 * n] + gh[:, n : 2 * n])
        candidate = tanh(gx[:, 2 * n :] + reset * gh[:, 2 * n :])
        return (1.0 - update) * candidate + update * h


class Conv1d(Module):
    """Same-padded convolution over time, computed as a product of unfolded windows."""

    def __init__(self, in_dim: int, out_dim: int, width: int, rng: np.random.Generator):
        if width % 2 == 0:
            raise ShapeError(f"Convolution width must be odd, got {width}")
        self.width = width
        self.in_dim = in_dim
        self.weight = Parameter(glorot(rng, width * in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim))

    def __call__(self, x) -> Array:
        x = as_array(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"Conv1d expects (time x {self.in_dim}), got {x.shape}")
        num_frames = x.shape[0]
        pad = self.width // 2
        padded = concat([np.zeros((pad, self.in_dim)), x, np.zeros((pad, self.in_dim))], axis=0) if pad else x
        index = np.arange(num_frames)[:, None] + np.arange(self.width)[None, :]
        windows = reshape(getitem(padded, index), (num_frames, self.width * self.in_dim))
        return windows @ self.weight + self.bias
