"""Tests covering the HAT lattice, its loss and the internal language model."""

import itertools
import unittest

import numpy as np

from duplex.hat import (
    EmissionLattice,
    HatDecoder,
    LatticeError,
    PredictionContractError,
    hat_loss,
    transducer_nll,
)
from duplex.models import HatConfig
from duplex.tensor import ShapeError

from .utils import FD_TOLERANCE, alignment_logprob_brute_force, gradient_error, input_gradient_error


def tiny_hat(vocab_size: int = 4, seed: int = 0) -> HatDecoder:
    cfg = HatConfig(embed_dim=4, context_size=2, pred_dim=6, joint_dim=6)
    return HatDecoder(cfg, vocab_size, 8, np.random.default_rng(seed))


class TestTransducerLoss(unittest.TestCase):
    def test_matches_alignment_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            num_frames = int(rng.integers(1, 5))
            num_labels = int(rng.integers(0, 5))
            log_blank = rng.normal(size=(num_frames, num_labels + 1))
            log_emit = rng.normal(size=(num_frames, num_labels))
            expected = -alignment_logprob_brute_force(log_blank, log_emit)
            self.assertAlmostEqual(transducer_nll(log_blank, log_emit).item(), expected, delta=1e-9)

    def test_single_frame_single_label(self):
        lattice = EmissionLattice.from_probabilities(np.full((1, 2), 0.5), np.zeros((1, 2, 1)))
        # emit then blank out of the final node
        self.assertAlmostEqual(hat_loss(lattice, (1,)).item(), -np.log(0.25), delta=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        log_emit = rng.normal(size=(3, 2))
        error = input_gradient_error(lambda lb: transducer_nll(lb, log_emit), rng.normal(size=(3, 3)))
        assert error < FD_TOLERANCE

    def test_no_frames(self):
        with self.assertRaises(LatticeError):
            transducer_nll(np.zeros((0, 3)), np.zeros((0, 2)))
        lattice = EmissionLattice.from_probabilities(np.full((0, 2), 0.5), np.zeros((0, 2, 1)))
        with self.assertRaises(LatticeError):
            hat_loss(lattice, (1,))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            transducer_nll(np.zeros((2, 3)), np.zeros((2, 3)))
        lattice = EmissionLattice.from_probabilities(np.full((2, 2), 0.5), np.zeros((2, 2, 1)))
        with self.assertRaises(ShapeError):
            hat_loss(lattice, (1, 1))

    def test_blank_probability_range(self):
        with self.assertRaises(ValueError):
            EmissionLattice.from_probabilities(np.ones((1, 1)), np.zeros((1, 1, 1)))


class TestHatDecoder(unittest.TestCase):
    def setUp(self):
        self.hat = tiny_hat()
        self.enc = np.random.default_rng(2).normal(size=(3, 8))

    def test_lattice_shapes(self):
        lattice = self.hat.lattice(self.enc, (1, 3))
        assert lattice.blank_logits.shape == (3, 3)
        assert lattice.label_logprobs.shape == (3, 3, 3)
        assert np.all((lattice.blank_prob > 0) & (lattice.blank_prob < 1))

    def test_joint_matches_lattice(self):
        y = (2, 1)
        lattice = self.hat.lattice(self.enc, y)
        state = self.hat.initial_state()
        for u in range(len(y) + 1):
            blank, labels = self.hat.joint(self.enc[1], state)
            self.assertAlmostEqual(blank, lattice.blank_prob[1, u], delta=1e-12)
            np.testing.assert_allclose(labels, lattice.label_logprobs.data[1, u], atol=1e-12)
            if u < len(y):
                state = self.hat.step_prediction(state, y[u])

    def test_parameter_gradient(self):
        y = (1, 3, 3)
        error = gradient_error(lambda: hat_loss(self.hat.lattice(self.enc, y), y), self.hat.parameters(), 20)
        assert error < FD_TOLERANCE

    def test_encoder_gradient(self):
        y = (2,)
        error = input_gradient_error(lambda e: hat_loss(self.hat.lattice(e, y), y), self.enc)
        assert error < FD_TOLERANCE

    def test_probability_mass(self):
        """Over all transcripts the transducer defines a proper distribution."""
        hat = tiny_hat(vocab_size=3, seed=4)
        # a strong blank keeps the mass of transcripts longer than six negligible
        hat.blank_head.bias.data = np.array([7.0])
        enc = np.random.default_rng(5).normal(size=(2, 8))
        total = 0.0
        for length in range(7):
            for y in itertools.product((1, 2), repeat=length):
                total += np.exp(-hat_loss(hat.lattice(enc, y), y).item())
        self.assertAlmostEqual(total, 1.0, delta=1e-7)

    def test_prediction_state_is_deterministic_and_ordered(self):
        def run(labels):
            state = self.hat.initial_state()
            for label in labels:
                state = self.hat.step_prediction(state, label)
            return state

        first, again = run((1, 3)), run((1, 3))
        assert first.context == again.context
        np.testing.assert_array_equal(first.vector, again.vector)
        swapped = run((3, 1))
        assert swapped.context != first.context
        assert not np.allclose(swapped.vector, first.vector)

    def test_blank_never_advances_prediction(self):
        with self.assertRaises(PredictionContractError):
            self.hat.step_prediction(self.hat.initial_state(), 0)
        with self.assertRaises(PredictionContractError):
            self.hat.lattice(self.enc, (1, 0))


class TestInternalLM(unittest.TestCase):
    def setUp(self):
        self.hat = tiny_hat()
        self.y = (3, 1, 1, 2)

    def test_increments(self):
        total, increments = self.hat.ilm_logprob(self.y)
        self.assertAlmostEqual(float(increments.sum()), total, delta=1e-12)
        state = self.hat.initial_state()
        for u, label in enumerate(self.y):
            scores = self.hat.ilm_next_logprobs(state)
            self.assertAlmostEqual(float(np.logaddexp.reduce(scores)), 0.0, delta=1e-12)
            self.assertAlmostEqual(float(scores[label - 1]), float(increments[u]), delta=1e-12)
            state = self.hat.step_prediction(state, label)

    def test_independent_of_acoustics(self):
        total, increments = self.hat.ilm_logprob(self.y)
        self.hat.lattice(np.random.default_rng(7).normal(size=(4, 8)), self.y)
        self.hat.enc_proj.weight.data = np.random.default_rng(8).normal(size=self.hat.enc_proj.weight.shape)
        again, again_increments = self.hat.ilm_logprob(self.y)
        assert again == total
        np.testing.assert_array_equal(again_increments, increments)

    def test_uniform_label_head(self):
        self.hat.label_head.weight.data = np.zeros(self.hat.label_head.weight.shape)
        self.hat.label_head.bias.data = np.zeros(self.hat.label_head.bias.shape)
        total, increments = self.hat.ilm_logprob(self.y)
        # three non-blank labels
        self.assertAlmostEqual(total, -len(self.y) * np.log(3), delta=1e-12)
        np.testing.assert_allclose(increments, -np.log(3), atol=1e-12)

    def test_blank_in_history(self):
        with self.assertRaises(PredictionContractError):
            self.hat.ilm_logprob((1, 0, 2))


if __name__ == "__main__":
    unittest.main()
