"""Tests covering the encoders, the audio decoder, the bridge and the external language model."""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from duplex.corpus import VocabularyError
from duplex.frontend import FeatureSequence
from duplex.models import (
    AudioDecoder,
    AudioDecoderConfig,
    Bridge,
    ContextLengthError,
    DelayedEncoder,
    DelayedEncoderConfig,
    ElmScorer,
    ExternalLM,
    ModelConfig,
    StreamingEncoder,
    StreamingEncoderConfig,
    TextEncoder,
    TextEncoderConfig,
    right_context_frames_for,
)
from duplex.models.duplex import ASR_PREFIXES, COMPONENT_PREFIXES, DuplexModel
from duplex.tensor import ParameterError, ShapeError

from .utils import random_features, tiny_lm_config, tiny_model_config


class TestConfig(unittest.TestCase):
    def test_right_context_frames(self):
        assert right_context_frames_for(10) == 90
        assert right_context_frames_for(30) == 30
        with self.assertRaises(ValueError):
            right_context_frames_for(0)

    def test_validation(self):
        with self.assertRaises(ValueError):
            StreamingEncoderConfig(right_context_frames=1)
        with self.assertRaises(ValueError):
            StreamingEncoderConfig(model_dim=10, num_heads=4)
        with self.assertRaises(ValueError):
            TextEncoderConfig(conv_width=4)
        with self.assertRaises(ValueError):
            AudioDecoderConfig(prenet_dropout=1.0)
        with self.assertRaises(ValueError):
            ModelConfig(streaming=StreamingEncoderConfig(model_dim=8, num_heads=2))


class TestStreamingEncoder(unittest.TestCase):
    def setUp(self):
        cfg = StreamingEncoderConfig(num_layers=2, model_dim=8, num_heads=2, ff_dim=12)
        self.encoder = StreamingEncoder(cfg, 6, np.random.default_rng(0))
        self.x = np.random.default_rng(1).normal(size=(10, 6))

    def test_output_depends_on_past_only(self):
        reference = self.encoder(self.x).data
        for cut in range(1, 10):
            perturbed = self.x.copy()
            perturbed[cut:] += np.random.default_rng(cut).normal(size=perturbed[cut:].shape)
            out = self.encoder(perturbed).data
            np.testing.assert_allclose(out[:cut], reference[:cut], atol=1e-12)
            assert not np.allclose(out[cut], reference[cut])

    def test_stream_matches_full_pass(self):
        full = self.encoder(self.x).data
        streamed = np.stack(list(self.encoder.stream(self.x)))
        np.testing.assert_allclose(streamed, full, atol=1e-9)

    def test_rejects_bad_input(self):
        with self.assertRaises(ShapeError):
            self.encoder(np.zeros((0, 6)))
        with self.assertRaises(ShapeError):
            self.encoder(np.zeros((3, 5)))


class TestDelayedEncoder(unittest.TestCase):
    def setUp(self):
        self.h = np.random.default_rng(2).normal(size=(12, 8))

    def test_lookahead_is_bounded(self):
        for depth in (1, 3):
            cfg = DelayedEncoderConfig(num_layers=depth, model_dim=8, num_heads=2, ff_dim=12, right_context_frames=2)
            encoder = DelayedEncoder(cfg, np.random.default_rng(3))
            reference = encoder(self.h).data
            perturbed = self.h.copy()
            perturbed[7] += 1.0
            out = encoder(perturbed).data
            # position t sees inputs up to t + 2 whatever the depth
            np.testing.assert_allclose(out[:5], reference[:5], atol=1e-12)
            assert not np.allclose(out[5], reference[5])

    def test_zero_layers_is_identity(self):
        cfg = DelayedEncoderConfig(num_layers=0, model_dim=8, num_heads=2, ff_dim=12)
        encoder = DelayedEncoder(cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(encoder(self.h).data, self.h)
        assert encoder.num_parameters() == 0


class TestTextEncoder(unittest.TestCase):
    def setUp(self):
        cfg = TextEncoderConfig(embed_dim=6, num_conv_layers=1, conv_width=3, recurrent_dim=4)
        self.encoder = TextEncoder(cfg, 8, np.random.default_rng(0))

    def test_shape_and_bidirectionality(self):
        out = self.encoder((1, 2, 3, 4, 5)).data
        assert out.shape == (5, 8)
        changed = self.encoder((1, 2, 3, 4, 7)).data
        # the conv window cannot reach position 0, the backward recurrence can
        assert not np.allclose(out[0], changed[0])

    def test_rejects_invalid_transcripts(self):
        for y in [(), (1, 0, 2), (8,), (-1,)]:
            with self.assertRaises(VocabularyError):
                self.encoder(y)


class TestBridge(unittest.TestCase):
    def test_affine(self):
        bridge = Bridge(8, 6, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
        zero = np.zeros((3, 8))
        lhs = bridge.bridge_audio_to_text(a + b).data - bridge.bridge_audio_to_text(b).data
        rhs = bridge.bridge_audio_to_text(a).data - bridge.bridge_audio_to_text(zero).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        assert bridge.bridge_text_to_audio(rng.normal(size=(4, 6))).shape == (4, 8)


class TestAudioDecoder(unittest.TestCase):
    def setUp(self):
        cfg = tiny_model_config().audio_decoder
        self.decoder = AudioDecoder(cfg, 4, 8, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.memory = rng.normal(size=(5, 8))
        self.target = rng.normal(size=(7, 4))

    def test_teacher_forced_shapes(self):
        out = self.decoder.teacher_forced(self.memory, self.target, training=False)
        assert out.frames.shape == (7, 4)
        assert out.coarse.shape == (7, 4)
        assert out.stop_logits.shape == (7,)

    def test_dropout_only_when_training(self):
        first = self.decoder.teacher_forced(self.memory, self.target, training=False).frames.data
        second = self.decoder.teacher_forced(self.memory, self.target, training=False).frames.data
        np.testing.assert_array_equal(first, second)
        noisy = self.decoder.teacher_forced(self.memory, self.target, True, np.random.default_rng(5)).frames.data
        again = self.decoder.teacher_forced(self.memory, self.target, True, np.random.default_rng(5)).frames.data
        np.testing.assert_array_equal(noisy, again)
        assert not np.allclose(noisy, first)
        with self.assertRaises(ParameterError):
            self.decoder.teacher_forced(self.memory, self.target, training=True)

    def test_infer_respects_frame_cap(self):
        out = self.decoder.infer(self.memory)
        assert isinstance(out, FeatureSequence)
        assert 1 <= out.num_frames <= 10
        assert out.dim == 4

    def test_rejects_bad_memory(self):
        with self.assertRaises(ShapeError):
            self.decoder.infer(np.zeros((0, 8)))
        with self.assertRaises(ShapeError):
            self.decoder.teacher_forced(np.zeros((3, 7)), self.target, training=False)


class TestDuplexModel(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = Path(tempfile.mkdtemp())
        self.model = DuplexModel(tiny_model_config(), 8, 4, seed=0)

    def tearDown(self):
        if self.tmp_dir.is_dir():
            shutil.rmtree(self.tmp_dir)

    def test_components(self):
        counts = self.model.parameter_counts()
        assert set(counts) == {prefix.rstrip(".") for prefix in COMPONENT_PREFIXES}
        assert all(n > 0 for n in counts.values())

    def test_encode_audio(self):
        x = random_features(np.random.default_rng(0), 9, 4)
        streaming = self.model.encode_audio(x, delayed=False)
        delayed = self.model.encode_audio(x, delayed=True)
        # stack 2, stride 1
        assert streaming.shape == delayed.shape == (8, 8)

    def test_selective_load(self):
        path = self.model.save(self.tmp_dir / "model.dlxa")
        other = DuplexModel(tiny_model_config(), 8, 4, seed=1)
        before = other.enc_t.state_dict()
        loaded = other.load(path, ASR_PREFIXES)
        assert loaded and all(name.startswith(ASR_PREFIXES) for name in loaded)
        for name, value in self.model.enc_s.state_dict().items():
            np.testing.assert_array_equal(other.enc_s.state_dict()[name], value.astype(np.float32))
        for name, value in before.items():
            np.testing.assert_array_equal(other.enc_t.state_dict()[name], value)


class TestExternalLM(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = Path(tempfile.mkdtemp())
        self.lm = ExternalLM(tiny_lm_config(context_length=6), 8, np.random.default_rng(0))

    def tearDown(self):
        if self.tmp_dir.is_dir():
            shutil.rmtree(self.tmp_dir)

    def test_increments_sum_to_total(self):
        y = (3, 1, 4, 1, 5)
        total, increments = self.lm.elm_logprob(y)
        assert len(increments) == len(y)
        self.assertAlmostEqual(float(increments.sum()), total, delta=1e-12)
        self.assertAlmostEqual(self.lm.sequence_logprob(y).item(), total, delta=1e-12)
        assert total < 0

    def test_next_label_distribution(self):
        scorer = ElmScorer(self.lm)
        y = (2, 7, 7, 1)
        _, increments = self.lm.elm_logprob(y)
        for i in range(len(y)):
            scores = scorer.next_logprobs(y[:i])
            assert scores.shape == (7,)
            self.assertAlmostEqual(float(np.logaddexp.reduce(scores)), 0.0, delta=1e-12)
            self.assertAlmostEqual(float(scores[y[i] - 1]), float(increments[i]), delta=1e-9)

    def test_long_prefix_uses_recent_context(self):
        scorer = ElmScorer(self.lm)
        long_prefix = (1, 2, 3, 4, 5, 6, 7, 1, 2)
        np.testing.assert_allclose(scorer.next_logprobs(long_prefix), scorer.next_logprobs(long_prefix[-5:]))

    def test_errors(self):
        with self.assertRaises(ContextLengthError):
            self.lm.elm_logprob((1,) * 7)
        with self.assertRaises(VocabularyError):
            self.lm.elm_logprob(())
        with self.assertRaises(VocabularyError):
            self.lm.elm_logprob((0, 1))

    def test_checkpoint(self):
        path = self.lm.save(self.tmp_dir / "elm.dlxa")
        restored = ExternalLM.from_checkpoint(path, self.lm.cfg, 8)
        total, _ = self.lm.elm_logprob((1, 2, 3))
        self.assertAlmostEqual(restored.elm_logprob((1, 2, 3))[0], total, delta=1e-4)


if __name__ == "__main__":
    unittest.main()
