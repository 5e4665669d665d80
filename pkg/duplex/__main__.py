#!/usr/bin/env python
"""duplex: dual learning of streaming speech recognition and synthesis on a synthetic corpus."""

import logging
import os
import sys
from pathlib import Path

import rich
import rich.console
import rich.logging
import rich.traceback
import rich_click as click

from duplex import __version__
from duplex.utils import duplex_logo

# Set up logging as the root logger
# Submodules should all traverse back to this
log = logging.getLogger()

# Set up nicer formatting of click cli help messages
click.rich_click.MAX_WIDTH = 100
click.rich_click.USE_RICH_MARKUP = True
click.rich_click.COMMAND_GROUPS = {
    "duplex": [
        {
            "name": "Data",
            "commands": ["make-corpus", "make-tailset"],
        },
        {
            "name": "Training",
            "commands": ["train", "train-lm"],
        },
        {
            "name": "Evaluation",
            "commands": ["decode", "eval", "sweep", "report", "experiment"],
        },
    ],
}

# Set up rich stderr console
stderr = rich.console.Console(stderr=True)
stdout = rich.console.Console()

# Set up the rich traceback
rich.traceback.install(console=stderr, width=200, word_wrap=True, extra_lines=1)

MODE_CHOICES = ["baseline", "all", "dl", "recon"]
CONDITION_CHOICES = ["no_lm", "shallow_fusion", "internal_lm"]


# Define a custom click group class to sort options and commands in the help message
class CustomRichGroup(click.RichGroup):
    def format_options(self, ctx, formatter) -> None:
        from rich_click.rich_help_rendering import get_rich_options

        self.format_commands(ctx, formatter)
        get_rich_options(self, ctx, formatter)


def run_duplex():
    # print the duplex header if environment variable is not set
    if os.environ.get("_DUPLEX_COMPLETE") is None:
        stderr.print("\n")
        for line in duplex_logo:
            stderr.print(line, highlight=False)
        stderr.print(f"\n[grey39]    duplex version {__version__}", highlight=False)
        stderr.print("\n")
    # Launch the click cli
    duplex_cli(auto_envvar_prefix="DUPLEX")


@click.group(context_settings=dict(help_option_names=["-h", "--help"]), cls=CustomRichGroup)
@click.version_option(__version__)
@click.option(
    "-v",
    "--verbose",
    is_flag=True,
    default=False,
    help="Print verbose output to the console.",
)
@click.option("--hide-progress", is_flag=True, default=False, help="Don't show progress bars.")
@click.option("-l", "--log-file", help="Save a verbose log to a file.", metavar="<filename>")
@click.pass_context
def duplex_cli(ctx, verbose, hide_progress, log_file):
    """
    duplex trains a joint streaming ASR and TTS model with dual learning on a synthetic corpus and scores it.
    """
    # Set the base logger to output DEBUG
    log.setLevel(logging.DEBUG)

    # Set up logs to the console
    log.addHandler(
        rich.logging.RichHandler(
            level=logging.DEBUG if verbose else logging.INFO,
            console=rich.console.Console(stderr=True),
            show_time=False,
            show_path=verbose,  # True if verbose, false otherwise
            markup=True,
        )
    )

    # don't show rich debug logging in verbose mode
    rich_logger = logging.getLogger("rich")
    rich_logger.setLevel(logging.INFO)

    # Set up logs to a file if we asked for one
    if log_file:
        log_fh = logging.FileHandler(log_file, encoding="utf-8")
        log_fh.setLevel(logging.DEBUG)
        log_fh.setFormatter(logging.Formatter("[%(asctime)s] %(name)-20s [%(levelname)-7s]  %(message)s"))
        log.addHandler(log_fh)

    ctx.obj = {
        "verbose": verbose,
        "hide_progress": hide_progress or verbose,  # Always hide progress bar with verbose logging
    }


def _corpus_spec_for(path):
    """Corpus spec of the corpus directory holding ``path`` (a directory or one of its manifests)."""
    from duplex.corpus import load_spec

    path = Path(path)
    return load_spec(path if path.is_dir() else path.parent)


def _load_utterances(corpus, manifest, testset):
    from duplex.corpus import read_manifest

    if manifest is None:
        if corpus is None:
            raise LookupError("Give either --manifest or --corpus")
        manifest = Path(corpus) / f"{testset}.jsonl"
        if not manifest.is_file():
            raise LookupError(f"Corpus '{corpus}' has no '{testset}' manifest")
    spec = _corpus_spec_for(manifest)
    utterances, _ = read_manifest(manifest, spec.frame_period_ms)
    return spec, utterances


def _load_model(ckpt, cfg, spec):
    from duplex.models.duplex import DuplexModel

    model = DuplexModel(cfg.model, spec.vocab_size, spec.feature_dim, spec.frame_period_ms)
    model.load(ckpt)
    return model


def _load_lm(lm, cfg, spec):
    from duplex.models.lm import ExternalLM

    if lm is None:
        return None
    return ExternalLM.from_checkpoint(lm, cfg.lm.model, spec.vocab_size)


config_option = click.option(
    "-c",
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help=r"Experiment configuration file. [dim]\[default: built-in desk-scale settings][/]",
    metavar="<file>",
)


# duplex make-corpus
@duplex_cli.command("make-corpus")
@click.pass_context
@click.option(
    "-s",
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="YAML file with the corpus settings, or an experiment file with a `corpus` section.",
    metavar="<file>",
)
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True, help="Output corpus directory.")
def command_make_corpus(ctx, spec, out):
    """
    Generate the synthetic corpus (S, U_A, U_T and the two test sets).
    """
    from duplex.config import build_dataclass
    from duplex.corpus import CorpusSpec, generate_splits, write_corpus
    from duplex.utils import load_yaml

    try:
        content = load_yaml(spec) if spec is not None else {}
        if "corpus" in content:
            content = content["corpus"]
        corpus_spec = build_dataclass(CorpusSpec, content, "corpus")
        splits = generate_splits(corpus_spec, hide_progress=ctx.obj["hide_progress"])
        write_corpus(splits, corpus_spec, out)
        log.info(f"Corpus written to [magenta]'{out}'")
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex make-tailset
@duplex_cli.command("make-tailset")
@click.pass_context
@click.option("--corpus", type=click.Path(exists=True, file_okay=False), required=True, help="Corpus directory.")
@click.option("-t", "--tau", type=float, default=1e-3, show_default=True, help="Frequency threshold.")
@click.option("-n", "--size", type=int, default=100, show_default=True, help="Number of tail transcripts.")
def command_make_tailset(ctx, corpus, tau, size):
    """
    Add a tail test set: transcripts with tokens rare in S but frequent in U_T.
    """
    from duplex.corpus import TailSetConfig, build_tail_set, load_corpus, write_manifest

    try:
        spec, splits = load_corpus(corpus)
        tail = build_tail_set(
            [u.tokens for u in splits.paired], [u.tokens for u in splits.text_only], TailSetConfig(tau, size), spec
        )
        path = write_manifest(Path(corpus) / "tail.jsonl", tail, "tail")
        log.info(f"Wrote {len(tail)} tail utterances to [magenta]'{path}'")
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex train
@duplex_cli.command("train")
@click.pass_context
@config_option
@click.option(
    "-m", "--mode", type=click.Choice(MODE_CHOICES), default="baseline", show_default=True, help="Loss set."
)
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True, help="Run directory.")
@click.option(
    "--corpus",
    type=click.Path(exists=True, file_okay=False),
    default=None,
    help="Corpus directory. Generated from the configuration when not given.",
)
@click.option(
    "--init", type=click.Path(exists=True, dir_okay=False), default=None, help="Initialize from a checkpoint."
)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None, help="Resume a checkpoint.")
def command_train(ctx, config, mode, out, corpus, init, resume):
    """
    Supervised pre-training on S followed by dual training in the chosen mode.
    """
    from duplex.config import load_config
    from duplex.corpus import corpus_content_hash, generate_splits, load_corpus
    from duplex.duallearn import AblationMode, pretrain_then_dual
    from duplex.utils import write_run_manifest

    try:
        cfg = load_config(config)
        ablation = AblationMode.from_name(mode)
        if corpus is not None:
            spec, splits = load_corpus(corpus)
            corpus_hash = corpus_content_hash(corpus)
        else:
            spec, splits = cfg.corpus, generate_splits(cfg.corpus, hide_progress=ctx.obj["hide_progress"])
            corpus_hash = None
        write_run_manifest(
            out, cfg.to_dict(), seed=cfg.seed, mode=ablation.run_label, corpus_hash=corpus_hash, init=init
        )
        pretrain_then_dual(
            splits,
            cfg.model,
            cfg.train,
            ablation,
            out,
            cfg.seed,
            spec.vocab_size,
            spec.feature_dim,
            spec.frame_period_ms,
            init=init,
            resume=resume,
            hide_progress=ctx.obj["hide_progress"],
        )
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex train-lm
@duplex_cli.command("train-lm")
@click.pass_context
@config_option
@click.option("--corpus", type=click.Path(exists=True, file_okay=False), required=True, help="Corpus directory.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True, help="Output checkpoint file.")
def command_train_lm(ctx, config, corpus, out):
    """
    Train the external language model on the unpaired text pool U_T.
    """
    from duplex.config import load_config
    from duplex.corpus import load_corpus
    from duplex.duallearn import train_external_lm

    try:
        cfg = load_config(config)
        spec, splits = load_corpus(corpus)
        lm = train_external_lm(
            [u.tokens for u in splits.text_only], cfg.lm, spec.vocab_size, cfg.seed, ctx.obj["hide_progress"]
        )
        lm.save(out)
        log.info(f"External LM saved to [magenta]'{out}'")
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex decode
@duplex_cli.command("decode")
@click.pass_context
@config_option
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True, help="Model checkpoint.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True, help="Split manifest.")
@click.option("--lm", type=click.Path(exists=True, dir_okay=False), default=None, help="External LM checkpoint.")
@click.option("-a", "--alpha", type=float, default=0.0, show_default=True, help="External LM weight.")
@click.option("-b", "--beta", type=float, default=0.0, show_default=True, help="Internal LM weight.")
@click.option("--beam", type=int, default=8, show_default=True, help="Beam size.")
@click.option("--workers", type=int, default=1, show_default=True, help="Decoding threads.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True, help="Output JSON lines file.")
def command_decode(ctx, config, ckpt, manifest, lm, alpha, beta, beam, workers, out):
    """
    Decode a manifest and write one hypothesis record per utterance.
    """
    from duplex.config import load_config
    from duplex.decode import FusionConfig
    from duplex.evalkit import evaluate, write_decode_records

    try:
        cfg = load_config(config)
        spec, utterances = _load_utterances(None, manifest, None)
        model = _load_model(ckpt, cfg, spec)
        if alpha > 0 and lm is None:
            log.warning(f"--alpha {alpha:g} has no effect without an external LM (--lm); decoding without fusion")
        fusion = FusionConfig(alpha=alpha, beta=beta, beam_size=beam)
        result = evaluate(
            model, utterances, fusion, _load_lm(lm, cfg, spec), workers, hide_progress=ctx.obj["hide_progress"]
        )
        write_decode_records(out, result.records)
        log.info(f"Decoded {len(result.records)} utterances to [magenta]'{out}'")
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex eval
@duplex_cli.command("eval")
@click.pass_context
@config_option
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True, help="Model checkpoint.")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False), default=None, help="Corpus directory.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None, help="Split manifest.")
@click.option("--testset", type=str, default="test_clean", show_default=True, help="Split to score.")
@click.option("--lm", type=click.Path(exists=True, dir_okay=False), default=None, help="External LM checkpoint.")
@click.option(
    "--condition",
    type=click.Choice(CONDITION_CHOICES),
    default="no_lm",
    show_default=True,
    help="Decoding condition; fusion weights come from the configuration.",
)
@click.option("--label", type=str, default=None, help="Row label in the results file, e.g. E-ALL.")
@click.option("--run-dir", type=click.Path(file_okay=False), default=None, help="Record the result in this directory.")
@click.option("--workers", type=int, default=1, show_default=True, help="Decoding threads.")
def command_eval(ctx, config, ckpt, corpus, manifest, testset, lm, condition, label, run_dir, workers):
    """
    Score a checkpoint on a test set (corpus-pooled WER).
    """
    from duplex.config import load_config
    from duplex.evalkit import evaluate, record_result
    from duplex.evalkit.experiment import decoding_conditions
    from duplex.evalkit.report import RESULTS_FILE

    try:
        cfg = load_config(config)
        spec, utterances = _load_utterances(corpus, manifest, testset)
        fusion = decoding_conditions(cfg.fusion)[condition]
        elm = _load_lm(lm, cfg, spec)
        if fusion.alpha > 0 and elm is None:
            raise LookupError(f"Condition '{condition}' needs an external LM (--lm)")
        result = evaluate(
            _load_model(ckpt, cfg, spec), utterances, fusion, elm, workers, hide_progress=ctx.obj["hide_progress"]
        )
        report = result.report
        stdout.print(
            f"WER {report.wer:.2f}% (S={report.substitutions} D={report.deletions} I={report.insertions} "
            f"N={report.ref_tokens}), {result.skipped} skipped"
        )
        if run_dir is not None:
            record_result(Path(run_dir) / RESULTS_FILE, label or Path(ckpt).parent.name, testset, condition, report)
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


def _parse_grid(value):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise click.BadParameter(f"Expected comma-separated numbers, got '{value}'")


# duplex sweep
@duplex_cli.command("sweep")
@click.pass_context
@config_option
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True, help="Model checkpoint.")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False), default=None, help="Corpus directory.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None, help="Split manifest.")
@click.option("--testset", type=str, default="test_clean", show_default=True, help="Split to score.")
@click.option("--lm", type=click.Path(exists=True, dir_okay=False), required=True, help="External LM checkpoint.")
@click.option("--alphas", type=str, default=None, help="Comma-separated external LM weights.")
@click.option("--betas", type=str, default=None, help="Comma-separated internal LM weights.")
@click.option("--workers", type=int, default=1, show_default=True, help="Decoding threads.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True, help="Output CSV matrix.")
def command_sweep(ctx, config, ckpt, corpus, manifest, testset, lm, alphas, betas, workers, out):
    """
    Evaluate on an alpha/beta grid of fusion weights and write the WER matrix.
    """
    from duplex.config import load_config
    from duplex.evalkit import sweep

    try:
        cfg = load_config(config)
        spec, utterances = _load_utterances(corpus, manifest, testset)
        grid = sweep(
            _load_model(ckpt, cfg, spec),
            utterances,
            _load_lm(lm, cfg, spec),
            _parse_grid(alphas) or cfg.sweep.alphas,
            _parse_grid(betas) or cfg.sweep.betas,
            beam_size=cfg.sweep.beam_size,
            workers=workers,
            hide_progress=ctx.obj["hide_progress"],
        )
        grid.to_csv(out)
        alpha, beta, best = grid.best()
        log.info(f"Best WER {best:.2f} at alpha={alpha:g} beta={beta:g}; grid written to [magenta]'{out}'")
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex report
@duplex_cli.command("report")
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True, help="Run directory.")
def command_report(run_dir):
    """
    Render the result tables of a run directory.
    """
    from duplex.evalkit import report_tables

    try:
        report_tables(run_dir, console=stdout)
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


# duplex experiment
@duplex_cli.command("experiment")
@click.pass_context
@config_option
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True, help="Experiment directory.")
@click.option("--workers", type=int, default=1, show_default=True, help="Decoding threads.")
@click.option("--no-sweeps", is_flag=True, default=False, help="Skip the alpha/beta sweeps.")
def command_experiment(ctx, config, out, workers, no_sweeps):
    """
    Run the full BASELINE / E-ALL / E-DL / E-RECON comparison over the configured seeds.
    """
    from duplex.config import load_config
    from duplex.evalkit.experiment import run_experiment

    try:
        cfg = load_config(config)
        summary = run_experiment(
            cfg, out, workers=workers, sweeps=not no_sweeps, hide_progress=ctx.obj["hide_progress"], console=stdout
        )
        for key, value in sorted(summary.relative_improvement.items()):
            log.info(f"Relative improvement {key}: {value:.1f}%")
    except (UserWarning, LookupError, ValueError) as e:
        log.error(e)
        sys.exit(1)


if __name__ == "__main__":
    run_duplex()
