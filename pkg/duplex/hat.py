"""
Hybrid autoregressive transducer (HAT) decoder.

The prediction network embeds the last ``context_size`` labels (blank-padded)
and never sees acoustics. The joint network combines one encoder frame with a
prediction vector and factorises the outgoing mass of every lattice node into
a blank probability ``b = sigmoid(blank head)`` and a label distribution
``(1 - b) * softmax(label head)``. Dropping the blank head and the acoustics
leaves the internal language model.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from duplex.corpus.vocabulary import BLANK_ID, TokenSequence, VocabularyError
from duplex.models.config import HatConfig
from duplex.models.layers import Embedding, Linear
from duplex.tensor import (
    Array,
    Module,
    ShapeError,
    as_array,
    getitem,
    log_sigmoid,
    log_softmax,
    neg,
    no_grad,
    record,
    reshape,
    tanh,
)

log = logging.getLogger(__name__)


class LatticeError(ValueError):
    """Raised when a lattice admits no alignment."""

    pass


class PredictionContractError(ValueError):
    """Raised when the prediction network is advanced with the blank."""

    pass


@dataclass(frozen=True, eq=False)
class PredictionState:
    """Summary of the emitted labels: the last few labels and their prediction vector."""

    context: tuple
    vector: np.ndarray


@dataclass
class EmissionLattice:
    """Per-node blank logits (T x U+1) and label log-distributions (T x U+1 x K)."""

    blank_logits: Array
    label_logprobs: Array

    @classmethod
    def from_probabilities(cls, blank_prob: np.ndarray, label_logprobs: np.ndarray) -> "EmissionLattice":
        blank_prob = np.asarray(blank_prob, dtype=np.float64)
        if np.any(blank_prob <= 0.0) or np.any(blank_prob >= 1.0):
            raise ValueError("Blank probabilities must lie strictly inside (0, 1)")
        return cls(Array(np.log(blank_prob) - np.log1p(-blank_prob)), Array(label_logprobs))

    @property
    def num_frames(self) -> int:
        return self.blank_logits.shape[0]

    @property
    def blank_prob(self) -> np.ndarray:
        return np.exp(-np.logaddexp(0.0, -self.blank_logits.data))


def _forward_variables(log_blank: np.ndarray, log_emit: np.ndarray) -> np.ndarray:
    num_frames, num_nodes = log_blank.shape
    alpha = np.full((num_frames, num_nodes), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(num_frames):
        for u in range(num_nodes):
            if t == 0 and u == 0:
                continue
            from_below = alpha[t - 1, u] + log_blank[t - 1, u] if t > 0 else -np.inf
            from_left = alpha[t, u - 1] + log_emit[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(from_below, from_left)
    return alpha


def _backward_variables(log_blank: np.ndarray, log_emit: np.ndarray) -> np.ndarray:
    num_frames, num_nodes = log_blank.shape
    beta = np.full((num_frames, num_nodes), -np.inf)
    beta[-1, -1] = log_blank[-1, -1]
    for t in reversed(range(num_frames)):
        for u in reversed(range(num_nodes)):
            if t == num_frames - 1 and u == num_nodes - 1:
                continue
            via_blank = log_blank[t, u] + beta[t + 1, u] if t < num_frames - 1 else -np.inf
            via_label = log_emit[t, u] + beta[t, u + 1] if u < num_nodes - 1 else -np.inf
            beta[t, u] = np.logaddexp(via_blank, via_label)
    return beta


def transducer_nll(log_blank, log_emit) -> Array:
    """
    Negative log of the total probability of all monotonic alignments.

    ``log_blank[t, u]`` scores the blank step out of node (t, u) and
    ``log_emit[t, u]`` the emission of label u+1 from it. A path ends with the
    blank out of the final node (T-1, U).
    """
    log_blank, log_emit = as_array(log_blank), as_array(log_emit)
    num_frames, num_nodes = log_blank.shape
    if log_emit.shape != (num_frames, num_nodes - 1):
        raise ShapeError(f"Emission scores {log_emit.shape} do not match blank scores {log_blank.shape}")
    if num_frames == 0:
        raise LatticeError("A lattice without frames cannot emit any transcript (probability 0)")
    lb, le = log_blank.data, log_emit.data
    alpha = _forward_variables(lb, le)
    beta = _backward_variables(lb, le)
    log_total = alpha[-1, -1] + lb[-1, -1]

    def transducer_nll_backward(g):
        beta_next = np.full_like(beta, -np.inf)
        beta_next[:-1, :] = beta[1:, :]
        beta_next[-1, -1] = 0.0
        grad_blank = -np.exp(alpha + lb + beta_next - log_total)
        grad_emit = -np.exp(alpha[:, :-1] + le + beta[:, 1:] - log_total)
        return g * grad_blank, g * grad_emit

    return record(-log_total, (log_blank, log_emit), transducer_nll_backward)


def hat_loss(lattice: EmissionLattice, y: TokenSequence) -> Array:
    """Transducer negative log-likelihood of ``y`` under ``lattice``."""
    num_labels = len(y)
    num_frames, num_nodes = lattice.blank_logits.shape
    if num_nodes != num_labels + 1:
        raise ShapeError(f"Lattice has {num_nodes} label positions, transcript needs {num_labels + 1}")
    log_blank = log_sigmoid(lattice.blank_logits)
    if num_labels == 0:
        return transducer_nll(log_blank, Array(np.zeros((num_frames, 0))))
    log_stay = log_sigmoid(neg(lattice.blank_logits))
    ids = np.asarray(y, dtype=np.int64)
    chosen = getitem(lattice.label_logprobs, (slice(None), np.arange(num_labels), ids - 1))
    log_emit = getitem(log_stay, (slice(None), slice(0, num_labels))) + chosen
    return transducer_nll(log_blank, log_emit)


def _log_softmax_values(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


class HatDecoder(Module):
    def __init__(self, cfg: HatConfig, vocab_size: int, encoder_dim: int, rng: np.random.Generator):
        self.context_size = cfg.context_size
        self.vocab_size = vocab_size
        self.encoder_dim = encoder_dim
        self.embedding = Embedding(vocab_size, cfg.embed_dim, rng)
        self.prediction = Linear(cfg.context_size * cfg.embed_dim, cfg.pred_dim, rng)
        self.enc_proj = Linear(encoder_dim, cfg.joint_dim, rng)
        self.pred_proj = Linear(cfg.pred_dim, cfg.joint_dim, rng, bias=False)
        self.blank_head = Linear(cfg.joint_dim, 1, rng)
        self.label_head = Linear(cfg.joint_dim, vocab_size - 1, rng)

    @property
    def num_labels(self) -> int:
        return self.vocab_size - 1

    # Prediction network

    def _check_labels(self, y: Sequence[int]) -> np.ndarray:
        ids = np.asarray(y, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise VocabularyError(f"Label ids outside the vocabulary of size {self.vocab_size}")
        if np.any(ids == BLANK_ID):
            raise PredictionContractError("The blank cannot be part of a label history")
        return ids

    def _contexts(self, y: Sequence[int]) -> np.ndarray:
        padded = np.concatenate([np.full(self.context_size, BLANK_ID), self._check_labels(y)]).astype(np.int64)
        return np.stack([padded[u : u + self.context_size] for u in range(len(y) + 1)])

    def _predict(self, contexts: np.ndarray) -> Array:
        embedded = self.embedding(contexts)
        flat = reshape(embedded, (contexts.shape[0], embedded.shape[1] * embedded.shape[2]))
        return tanh(self.prediction(flat))

    def prediction_vectors(self, y: TokenSequence) -> Array:
        """Prediction vectors after each prefix of ``y`` (U+1 rows)."""
        return self._predict(self._contexts(y))

    def _state(self, context: tuple) -> PredictionState:
        with no_grad():
            vector = self._predict(np.asarray([context], dtype=np.int64)).data[0]
        return PredictionState(context, vector)

    def initial_state(self) -> PredictionState:
        return self._state((BLANK_ID,) * self.context_size)

    def step_prediction(self, state: PredictionState, label: int) -> PredictionState:
        if label == BLANK_ID:
            raise PredictionContractError("The prediction network only advances on non-blank labels")
        self._check_labels([label])
        return self._state((state.context + (int(label),))[-self.context_size :])

    # Joint network

    def lattice(self, enc, y: TokenSequence) -> EmissionLattice:
        enc = as_array(enc)
        if enc.ndim != 2 or enc.shape[1] != self.encoder_dim:
            raise ShapeError(f"Joint expects (time x {self.encoder_dim}) encodings, got {enc.shape}")
        num_frames, num_nodes = enc.shape[0], len(y) + 1
        acoustic = self.enc_proj(enc)
        linguistic = self.pred_proj(self.prediction_vectors(y))
        joint_dim = acoustic.shape[1]
        hidden = tanh(reshape(acoustic, (num_frames, 1, joint_dim)) + reshape(linguistic, (1, num_nodes, joint_dim)))
        blank_logits = reshape(self.blank_head(hidden), (num_frames, num_nodes))
        return EmissionLattice(blank_logits, log_softmax(self.label_head(hidden), axis=-1))

    def project_encoder(self, enc) -> np.ndarray:
        """Acoustic half of the joint for every frame, for decoding."""
        with no_grad():
            return self.enc_proj(enc).data

    def joint_scores(self, acoustic_row: np.ndarray, state: PredictionState) -> tuple:
        """Log blank probability, log non-blank probability and label log-distribution of one node."""
        with no_grad():
            hidden = np.tanh(acoustic_row + self.pred_proj(state.vector[None, :]).data[0])
            blank_logit = float(self.blank_head(hidden[None, :]).data[0, 0])
            labels = _log_softmax_values(self.label_head(hidden[None, :]).data[0])
        return -np.logaddexp(0.0, -blank_logit), -np.logaddexp(0.0, blank_logit), labels

    def joint(self, enc_frame: np.ndarray, state: PredictionState) -> tuple:
        """Blank probability and label log-probabilities for one encoder frame and prediction state."""
        log_blank, _, labels = self.joint_scores(self.project_encoder(np.asarray(enc_frame)[None, :])[0], state)
        return float(np.exp(log_blank)), labels

    # Internal language model

    def _silent_acoustics(self) -> np.ndarray:
        return self.project_encoder(np.zeros((1, self.encoder_dim)))[0]

    def ilm_next_logprobs(self, state: PredictionState) -> np.ndarray:
        return self.joint_scores(self._silent_acoustics(), state)[2]

    def ilm_logprob(self, y: TokenSequence) -> tuple[float, np.ndarray]:
        """Label log-probability of ``y`` with the acoustics replaced by zeros and the blank head ignored."""
        with no_grad():
            linguistic = self.pred_proj(self.prediction_vectors(y)).data
            hidden = np.tanh(self._silent_acoustics()[None, :] + linguistic)
            labels = _log_softmax_values(self.label_head(hidden).data)
        ids = np.asarray(y, dtype=np.int64)
        increments = labels[np.arange(len(y)), ids - 1]
        return float(increments.sum()), increments
