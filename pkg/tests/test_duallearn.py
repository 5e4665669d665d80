"""Tests covering the training losses, their composition and the training loop."""

import csv
import json
import shutil
import tempfile
import unittest
from collections import Counter
from pathlib import Path

import numpy as np

from duplex.corpus import generate_splits
from duplex.decode import FusionConfig
from duplex.duallearn import (
    LOSS_NAMES,
    AblationMode,
    DualTrainer,
    LMTrainConfig,
    PseudoLabelCache,
    PseudoLabeler,
    TaskWeights,
    TrainConfig,
    TrainingDivergedError,
    TriBatch,
    TriBatchSampler,
    active_losses,
    alternating_third,
    compose_losses,
    pseudo_label_accuracy,
    pseudo_label_audio,
    pseudo_label_text,
    pretrain_then_dual,
    train_external_lm,
)
from duplex.duallearn.losses import loss_audio_recon, loss_supervised_tts, loss_text_recon, mse, stop_bce
from duplex.duallearn.trainer import CURVE_COLUMNS
from duplex.frontend import FeatureSequence
from duplex.models.duplex import DuplexModel
from duplex.tensor import backward, load_checkpoint

from .utils import (
    FD_TOLERANCE,
    gradient_error,
    input_gradient_error,
    tiny_corpus_spec,
    tiny_lm_config,
    tiny_model_config,
)


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(
        third_size=2,
        pretrain_steps=2,
        dual_steps=2,
        lr=1e-2,
        warmup_steps=1,
        checkpoint_every=2,
        log_every=1,
        pseudo_beam_size=2,
        accuracy_probe_size=2,
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestAblationMode(unittest.TestCase):
    def test_loss_sets(self):
        assert AblationMode.ALL.losses == set(LOSS_NAMES)
        assert AblationMode.SUPERVISED.losses == {"asr_streaming", "asr_delay", "tts"}
        assert not AblationMode.DL.losses & {"text_recon", "u_text_recon", "audio_recon", "u_audio_recon"}
        assert not AblationMode.RECON.losses & {"u_asr_streaming", "u_asr_delay", "u_tts"}
        assert len(AblationMode.DL.losses) == 6
        assert len(AblationMode.RECON.losses) == 7

    def test_names(self):
        assert AblationMode.from_name("baseline") is AblationMode.SUPERVISED
        assert AblationMode.from_name("DL") is AblationMode.DL
        assert AblationMode.SUPERVISED.run_label == "BASELINE"
        assert AblationMode.RECON.run_label == "E-RECON"
        with self.assertRaises(LookupError):
            AblationMode.from_name("everything")

    def test_active_losses(self):
        weights = TaskWeights(u_tts=0.0)
        assert "u_tts" not in active_losses(AblationMode.ALL, weights)
        assert active_losses(AblationMode.ALL, TaskWeights(), ("audio_only",)) == {"u_tts", "u_audio_recon"}
        assert [alternating_third(step) for step in range(4)] == ["paired", "audio_only", "text_only", "paired"]

    def test_weight_factors(self):
        weights = TaskWeights(tts=3.0)
        assert weights.factor("asr_delay") == 0.5
        assert weights.factor("tts") == 3.0
        assert set(weights.as_dict()) == set(LOSS_NAMES)


class TestLossFunctions(unittest.TestCase):
    def setUp(self):
        self.model = DuplexModel(tiny_model_config(), 8, 4, seed=0)
        rng = np.random.default_rng(0)
        self.x = FeatureSequence(rng.normal(size=(6, 4)), 10)
        self.y = (1, 5, 2)

    def test_mse_and_stop_gradients(self):
        target = np.random.default_rng(1).normal(size=(3, 2))
        assert input_gradient_error(lambda p: mse(p, target), np.zeros((3, 2))) < FD_TOLERANCE
        assert input_gradient_error(stop_bce, np.random.default_rng(2).normal(size=4)) < FD_TOLERANCE
        self.assertAlmostEqual(stop_bce(np.array([-50.0, 50.0])).item(), 0.0, delta=1e-12)

    def test_text_recon_gradient(self):
        error = gradient_error(lambda: loss_text_recon(self.model, self.y), self.model.parameters(), 10)
        assert error < FD_TOLERANCE

    def test_tts_gradient(self):
        error = gradient_error(
            lambda: loss_supervised_tts(self.model, self.x, self.y, False, None), self.model.parameters(), 10
        )
        assert error < FD_TOLERANCE

    def test_audio_recon_gradient(self):
        error = gradient_error(lambda: loss_audio_recon(self.model, self.x, False, None), self.model.parameters(), 10)
        assert error < FD_TOLERANCE

    def test_audio_recon_has_no_stop_term(self):
        frames = self.model.asr_input(self.x, training=False, rng=None)
        encoded = self.model.encode_delayed(self.model.encode_streaming(frames))
        memory = self.model.bridge.bridge_audio_to_text(encoded)
        out = self.model.dec_a.teacher_forced(memory, self.x.frames, False, None)
        expected = mse(out.frames, self.x.frames).item()
        self.assertAlmostEqual(loss_audio_recon(self.model, self.x, False, None).item(), expected, delta=1e-12)

    def test_short_audio(self):
        assert loss_audio_recon(self.model, FeatureSequence(np.ones((1, 4)), 10), False, None) is None


class TestComposition(unittest.TestCase):
    def setUp(self):
        self.model = DuplexModel(tiny_model_config(), 8, 4, seed=0)
        self.splits = generate_splits(tiny_corpus_spec())
        self.batch = TriBatchSampler(self.splits, 2, seed=0).sample()

    def labeler(self) -> PseudoLabeler:
        return PseudoLabeler(FusionConfig(beam_size=2))

    def compose(self, mode=AblationMode.ALL, weights=None, **kwargs):
        weights = weights or TaskWeights()
        return compose_losses(self.model, self.batch, mode, weights, False, None, self.labeler(), **kwargs)

    def test_aggregates(self):
        breakdown = self.compose()
        c = breakdown.components
        expected_s = 0.5 * (c["asr_streaming"] + c["asr_delay"]) + c["tts"] + c["text_recon"] + c["audio_recon"]
        expected_a = c.get("u_tts", 0.0) + c["u_audio_recon"]
        expected_t = 0.5 * (c.get("u_asr_streaming", 0.0) + c.get("u_asr_delay", 0.0)) + c["u_text_recon"]
        self.assertAlmostEqual(breakdown.aggregates["L_S"], expected_s, delta=1e-12)
        self.assertAlmostEqual(breakdown.aggregates["L_A"], expected_a, delta=1e-12)
        self.assertAlmostEqual(breakdown.aggregates["L_T"], expected_t, delta=1e-12)
        self.assertAlmostEqual(breakdown.total.item(), expected_s + expected_a + expected_t, delta=1e-12)

    def test_components_are_means(self):
        c = self.compose().components
        text = [loss_text_recon(self.model, y).item() for _, y in self.batch.paired]
        tts = [loss_supervised_tts(self.model, x, y, False, None).item() for x, y in self.batch.paired]
        self.assertAlmostEqual(c["text_recon"], float(np.mean(text)), delta=1e-12)
        self.assertAlmostEqual(c["tts"], float(np.mean(tts)), delta=1e-12)

    def test_weights_scale_components(self):
        base = self.compose()
        doubled = self.compose(weights=TaskWeights(tts=2.0))
        self.assertAlmostEqual(doubled.total.item() - base.total.item(), base.components["tts"], delta=1e-10)

    def test_zero_unsupervised_weights_match_supervised(self):
        zeros = {name: 0.0 for name in LOSS_NAMES if name not in AblationMode.SUPERVISED.losses}
        everything = self.compose(AblationMode.ALL, TaskWeights(**zeros))
        supervised = self.compose(AblationMode.SUPERVISED)
        assert everything.total.item() == supervised.total.item()
        assert everything.components == supervised.components

    def force_pseudo_labels(self) -> None:
        """Keep pseudo-transcripts non-empty and pseudo-audio long enough to encode."""
        self.model.hat.blank_head.bias.data[:] = -3.0
        self.model.hat.label_head.bias.data[0] = 10.0
        self.model.dec_a.stop_head.bias.data[:] = -30.0

    def touched_components(self, breakdown) -> set:
        self.model.zero_grad()
        backward(breakdown.total)
        return {
            name
            for name in ("enc_s", "enc_d", "enc_t", "dec_a", "bridge", "hat")
            if any(p.grad is not None and np.any(p.grad != 0) for p in getattr(self.model, name).parameters())
        }

    def test_gradient_coverage(self):
        self.force_pseudo_labels()
        supervised = {"asr_streaming", "asr_delay", "tts"}
        dual = {"u_asr_streaming", "u_asr_delay", "u_tts"}
        recon = {"text_recon", "u_text_recon", "audio_recon", "u_audio_recon"}
        speech_and_text = {"enc_s", "enc_d", "enc_t", "dec_a", "hat"}
        expected = {
            AblationMode.SUPERVISED: (supervised, speech_and_text),
            AblationMode.DL: (supervised | dual, speech_and_text),
            AblationMode.RECON: (supervised | recon, speech_and_text | {"bridge"}),
            AblationMode.ALL: (supervised | dual | recon, speech_and_text | {"bridge"}),
        }
        for mode, (losses, components) in expected.items():
            assert active_losses(mode, TaskWeights()) == losses, mode
            breakdown = self.compose(mode)
            assert set(breakdown.components) == losses, mode
            assert all(breakdown.components[name] != 0.0 for name in losses), mode
            assert not breakdown.skipped, mode
            assert self.touched_components(breakdown) == components, mode

    def test_pseudo_audio_does_not_train_speech_decoder(self):
        self.force_pseudo_labels()
        weights = TaskWeights(**{name: 0.0 for name in LOSS_NAMES if name not in ("u_asr_streaming", "u_asr_delay")})
        breakdown = self.compose(AblationMode.ALL, weights)
        assert set(breakdown.components) == {"u_asr_streaming", "u_asr_delay"}
        assert self.touched_components(breakdown) == {"enc_s", "enc_d", "hat"}

    def test_pseudo_transcripts_do_not_train_recognizer(self):
        self.force_pseudo_labels()
        weights = TaskWeights(**{name: 0.0 for name in LOSS_NAMES if name != "u_tts"})
        breakdown = self.compose(AblationMode.ALL, weights)
        assert set(breakdown.components) == {"u_tts"}
        assert self.touched_components(breakdown) == {"enc_t", "dec_a"}

    def test_single_third(self):
        breakdown = self.compose(thirds=("audio_only",))
        assert set(breakdown.components) <= {"u_tts", "u_audio_recon"}
        assert breakdown.aggregates["L_S"] == 0.0 and breakdown.aggregates["L_T"] == 0.0

    def test_short_audio_is_skipped(self):
        x_short = FeatureSequence(np.ones((1, 4)), 10)
        batch = TriBatch(paired=[(x_short, (1, 2))], audio_only=[x_short], text_only=[(3,)])
        breakdown = compose_losses(self.model, batch, AblationMode.RECON, TaskWeights(), False, None, self.labeler())
        assert breakdown.skipped == Counter(short_audio=3)
        assert "asr_streaming" not in breakdown.components
        assert "tts" in breakdown.components

    def test_unequal_thirds(self):
        with self.assertRaises(ValueError):
            TriBatch(paired=[], audio_only=[None], text_only=[(1,)])


class TestPseudoLabels(unittest.TestCase):
    def setUp(self):
        self.model = DuplexModel(tiny_model_config(), 8, 4, seed=0)
        self.splits = generate_splits(tiny_corpus_spec())
        self.fusion = FusionConfig(beam_size=2)

    def test_cache(self):
        calls = []

        def produce():
            calls.append(1)
            return len(calls)

        with self.assertRaises(ValueError):
            PseudoLabelCache(0)
        fresh = PseudoLabelCache(1)
        assert [fresh.get("a", step, produce) for step in range(3)] == [1, 2, 3]
        calls.clear()
        stale = PseudoLabelCache(3)
        assert [stale.get("a", step, produce) for step in range(5)] == [1, 1, 1, 2, 2]

    def test_prefetch_matches_sequential(self):
        batch = TriBatchSampler(self.splits, 2, seed=1).sample()
        labeler = PseudoLabeler(self.fusion)
        labeler.prefetch(self.model, batch, 0, workers=2, audio=True, text=True)
        for key, x in zip(batch.ids["audio_only"], batch.audio_only):
            assert labeler.audio(self.model, key, x, 0) == pseudo_label_audio(self.model, x, self.fusion)
        for key, y in zip(batch.ids["text_only"], batch.text_only):
            primed = labeler.text(self.model, key, y, 0)
            again = pseudo_label_text(self.model, y)
            assert (primed is None) == (again is None)
            if primed is not None:
                np.testing.assert_array_equal(primed.frames, again.frames)

    def test_accuracy(self):
        accuracy = pseudo_label_accuracy(self.model, self.splits.audio_only[:3], self.fusion)
        assert 0.0 <= accuracy <= 1.0
        with self.assertRaises(ValueError):
            pseudo_label_accuracy(self.model, self.splits.paired[:3], self.fusion)


class TestSampler(unittest.TestCase):
    def setUp(self):
        self.splits = generate_splits(tiny_corpus_spec())

    def test_deterministic(self):
        first = TriBatchSampler(self.splits, 3, seed=4).sample()
        second = TriBatchSampler(self.splits, 3, seed=4).sample()
        assert first.ids == second.ids
        assert first.third_size == 3
        assert len(first.all_ids()) == 9

    def test_state(self):
        sampler = TriBatchSampler(self.splits, 2, seed=0)
        sampler.sample()
        state = sampler.get_state()
        expected = sampler.sample().ids
        sampler.sample()
        sampler.set_state(state)
        assert sampler.sample().ids == expected

    def test_missing_features_are_excluded(self):
        for utt in self.splits.paired[:10]:
            utt.features = None
        sampler = TriBatchSampler(self.splits, 2, seed=0)
        assert {u.id for u in sampler.paired} == {u.id for u in self.splits.paired[10:]}
        with self.assertRaises(ValueError):
            TriBatchSampler(self.splits, 3, seed=0)

    def test_config(self):
        cfg = TrainConfig(weights={"tts": 0.5})
        assert isinstance(cfg.weights, TaskWeights) and cfg.weights.tts == 0.5
        with self.assertRaises(ValueError):
            TrainConfig(third_size=0)
        with self.assertRaises(ValueError):
            TrainConfig(pseudo_workers=0)


class TestDualTrainer(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = Path(tempfile.mkdtemp())
        self.splits = generate_splits(tiny_corpus_spec())

    def tearDown(self):
        if self.tmp_dir.is_dir():
            shutil.rmtree(self.tmp_dir)

    def trainer(self, run_dir: Path, mode=AblationMode.ALL, **overrides) -> DualTrainer:
        model = DuplexModel(tiny_model_config(), 8, 4, seed=0)
        return DualTrainer(model, self.splits, tiny_train_config(**overrides), mode, run_dir, seed=0)

    def test_run_writes_curves_and_checkpoints(self):
        run_dir = self.tmp_dir / "run"
        final = self.trainer(run_dir).run()
        assert final == run_dir / "model.dlxa"
        assert (run_dir / "checkpoints" / "step-000002.dlxa").is_file()
        assert (run_dir / "checkpoints" / "step-000002.json").is_file()
        with open(run_dir / "losses.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == CURVE_COLUMNS
        assert [row["phase"] for row in rows] == ["pretrain", "pretrain", "dual", "dual"]
        assert [int(row["step"]) for row in rows] == [0, 1, 2, 3]
        assert all(np.isfinite(float(row["total"])) for row in rows)
        # the supervised phase leaves the unsupervised columns empty
        assert rows[0]["u_text_recon"] == "" and rows[3]["u_text_recon"] != ""
        assert rows[3]["pseudo_accuracy"] != ""

    def test_supervised_training_lowers_loss(self):
        run_dir = self.tmp_dir / "smoke"
        cfg = tiny_train_config(pretrain_steps=100, dual_steps=100, lr=5e-3, warmup_steps=10, checkpoint_every=1000)
        final = pretrain_then_dual(
            self.splits, tiny_model_config(), cfg, AblationMode.SUPERVISED, run_dir, seed=0, vocab_size=8, feature_dim=4
        )
        assert final.is_file()
        with open(run_dir / "losses.csv", newline="") as fh:
            totals = [float(row["total"]) for row in csv.DictReader(fh)]
        assert len(totals) == 200
        assert np.mean(totals[-50:]) < np.mean(totals[:50]), (np.mean(totals[:50]), np.mean(totals[-50:]))

    def test_resume_repeats_uninterrupted_run(self):
        first_dir = self.tmp_dir / "first"
        self.trainer(first_dir).run()
        second_dir = self.tmp_dir / "second"
        shutil.copytree(first_dir, second_dir)
        trainer = self.trainer(second_dir)
        assert trainer.resume(second_dir / "checkpoints" / "step-000002.dlxa") == 2
        trainer.run()
        expected = load_checkpoint(first_dir / "model.dlxa")
        resumed = load_checkpoint(second_dir / "model.dlxa")
        assert set(expected) == set(resumed)
        for name, value in expected.items():
            np.testing.assert_array_equal(resumed[name], value)
        assert (first_dir / "losses.csv").read_text() == (second_dir / "losses.csv").read_text()

    def test_resume_checks_mode(self):
        run_dir = self.tmp_dir / "run"
        self.trainer(run_dir).run()
        with self.assertRaises(ValueError):
            self.trainer(run_dir, AblationMode.DL).resume(run_dir / "checkpoints" / "step-000002.dlxa")
        with self.assertRaises(LookupError):
            self.trainer(run_dir).resume(run_dir / "model-missing.dlxa")

    def test_divergence_is_dumped(self):
        run_dir = self.tmp_dir / "run"
        trainer = self.trainer(run_dir, pretrain_steps=1, dual_steps=0)
        weight = trainer.model.enc_s.input_proj.weight
        weight.data = np.full(weight.shape, np.nan)
        with self.assertRaises(TrainingDivergedError) as context:
            trainer.run()
        assert context.exception.step == 0
        dump = json.loads((run_dir / "divergence.json").read_text())
        assert dump["step"] == 0
        assert len(dump["batch_ids"]) == 6
        assert not (run_dir / "model.dlxa").exists()


class TestExternalLMTraining(unittest.TestCase):
    def test_likelihood_improves(self):
        texts = [(1, 2, 3, 1, 2, 3)] * 6 + [(1, 2, 3) * 4]
        cfg = LMTrainConfig(model=tiny_lm_config(), steps=40, batch_size=4, lr=2e-2, warmup_steps=1)
        untrained = train_external_lm(texts, LMTrainConfig(model=tiny_lm_config(), steps=0), 8, seed=0)
        trained = train_external_lm(texts, cfg, 8, seed=0)
        y = (1, 2, 3, 1, 2, 3)
        assert trained.elm_logprob(y)[0] > untrained.elm_logprob(y)[0] + 1.0

    def test_needs_text(self):
        with self.assertRaises(ValueError):
            train_external_lm([()], LMTrainConfig(model=tiny_lm_config(), steps=1), 8, seed=0)
        with self.assertRaises(ValueError):
            LMTrainConfig(batch_size=0)


if __name__ == "__main__":
    unittest.main()
