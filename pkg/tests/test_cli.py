"""Tests covering the command line interface."""

import shutil
import tempfile
import unittest
from pathlib import Path

import yaml
from click.testing import CliRunner

from duplex.__main__ import duplex_cli
from duplex.config import ExperimentConfig
from duplex.corpus import generate_splits, write_corpus
from duplex.evalkit import WerReport, record_result
from duplex.evalkit.report import RESULTS_FILE, TABLES_FILE
from duplex.models.duplex import DuplexModel

from .utils import tiny_corpus_spec, tiny_model_config

TINY_CORPUS = {
    "vocab_size": 8,
    "sentence_length": [2, 4],
    "frames_per_token": [2, 3],
    "feature_dim": 4,
    "num_paired": 6,
    "num_audio_only": 6,
    "num_text_only": 20,
    "num_test_clean": 3,
    "num_test_other": 3,
}


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp_dir = Path(tempfile.mkdtemp())
        self.runner = CliRunner()

    def tearDown(self):
        if self.tmp_dir.is_dir():
            shutil.rmtree(self.tmp_dir)

    def invoke(self, *args):
        return self.runner.invoke(duplex_cli, ["--hide-progress", *args])

    def test_help(self):
        result = self.invoke("--help")
        assert result.exit_code == 0
        assert "make-corpus" in result.output

    def test_make_corpus(self):
        spec = self.tmp_dir / "experiment.yml"
        spec.write_text(yaml.dump({"corpus": TINY_CORPUS}))
        out = self.tmp_dir / "corpus"
        result = self.invoke("make-corpus", "--spec", str(spec), "-o", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "corpus.json").is_file()
        for name in ("S", "U_A", "U_T", "test_clean", "test_other"):
            assert (out / f"{name}.jsonl").is_file()

    def test_make_corpus_unknown_key(self):
        spec = self.tmp_dir / "corpus.yml"
        spec.write_text(yaml.dump({"vocab_size": 8, "bogus": 1}))
        result = self.invoke("make-corpus", "--spec", str(spec), "-o", str(self.tmp_dir / "corpus"))
        assert result.exit_code == 1

    def test_report(self):
        run_dir = self.tmp_dir / "run"
        record_result(run_dir / RESULTS_FILE, "E-ALL", "test_clean", "no_lm", WerReport(1, 0, 0, 10))
        result = self.invoke("report", "--run-dir", str(run_dir))
        assert result.exit_code == 0, result.output
        assert "E-ALL" in (run_dir / TABLES_FILE).read_text()

    def test_missing_corpus(self):
        empty = self.tmp_dir / "empty"
        empty.mkdir()
        assert self.invoke("make-tailset", "--corpus", str(empty)).exit_code == 1
        ckpt = self.tmp_dir / "model.dlxa"
        ckpt.write_bytes(b"")
        result = self.invoke("eval", "--ckpt", str(ckpt), "--corpus", str(empty))
        assert result.exit_code == 1

    def test_decode_warns_about_alpha_without_lm(self):
        config = self.tmp_dir / "experiment.yml"
        config.write_text(yaml.dump(ExperimentConfig(model=tiny_model_config()).to_dict()))
        spec = tiny_corpus_spec()
        write_corpus(generate_splits(spec), spec, self.tmp_dir / "corpus")
        ckpt = DuplexModel(tiny_model_config(), spec.vocab_size, spec.feature_dim, seed=0).save(self.tmp_dir / "m.dlxa")
        out = self.tmp_dir / "hyps.jsonl"
        manifest = self.tmp_dir / "corpus" / "test_clean.jsonl"
        args = ["decode", "-c", str(config), "--ckpt", str(ckpt), "--manifest", str(manifest), "-a", "0.5"]
        with self.assertLogs(level="WARNING") as logs:
            result = self.invoke(*args, "-o", str(out))
        assert result.exit_code == 0, result.output
        assert out.is_file()
        assert any("external LM" in line for line in logs.output)

    def test_invalid_mode(self):
        result = self.invoke("train", "--mode", "bogus", "-o", str(self.tmp_dir / "run"))
        assert result.exit_code == 2


if __name__ == "__main__":
    unittest.main()
