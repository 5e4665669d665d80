"""
The end-to-end comparison: corpus, supervised and dual-learning runs over
several seeds, external LM, evaluation under three decoding conditions,
fusion sweeps and the result tables.

Layout of an experiment directory::

    corpus/                       synthetic corpus with the tail set
    elm.dlxa                      external LM
    seed-<n>/pretrain/            supervised initialization shared by all runs of the seed
    seed-<n>/<label>/             one run per model (BASELINE, E-ALL, E-DL, E-RECON)
    seed-<n>/results.csv          per-seed evaluations
    results.csv, tables.md        median over seeds
    sweeps/<label>-<testset>.csv  alpha/beta grids
    summary.json
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import rich.console

from duplex.config import ExperimentConfig
from duplex.corpus.io import corpus_content_hash, write_corpus
from duplex.corpus.splits import CorpusSplits, generate_splits
from duplex.corpus.tailset import EmptyTailSetError, build_tail_set
from duplex.decode import FusionConfig
from duplex.duallearn.losses import AblationMode
from duplex.duallearn.trainer import pretrain_then_dual, train_external_lm
from duplex.evalkit.evaluate import evaluate, ilm_gap_closing_ratio, sweep
from duplex.evalkit.report import MODEL_ROWS, RESULTS_FILE, read_results, record_result, report_tables
from duplex.evalkit.wer import WerReport, relative_improvement
from duplex.models.duplex import DuplexModel
from duplex.models.lm import ElmScorer
from duplex.utils import write_run_manifest

log = logging.getLogger(__name__)

MODES = {label: AblationMode.from_name(name) for label, name in zip(MODEL_ROWS, ("baseline", "all", "dl", "recon"))}
TESTSET_SPLITS = ("test_clean", "test_other", "tail")


@dataclass
class ExperimentSummary:
    relative_improvement: dict = field(default_factory=dict)
    ablation_ordering: dict = field(default_factory=dict)
    ilm_gap_closing: dict = field(default_factory=dict)
    fusion_helps: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)


def decoding_conditions(fusion: FusionConfig) -> dict:
    """No LM, shallow fusion at the configured alpha, and fusion with internal LM subtraction."""
    return {
        "no_lm": replace(fusion, alpha=0.0, beta=0.0),
        "shallow_fusion": replace(fusion, beta=0.0),
        "internal_lm": fusion,
    }


def testsets_of(splits: CorpusSplits) -> dict:
    sets = {"test_clean": splits.test_clean, "test_other": splits.test_other, "tail": splits.tail}
    return {name: utts for name, utts in sets.items() if utts}


def load_model(path: Union[str, Path], cfg: ExperimentConfig) -> DuplexModel:
    model = DuplexModel(cfg.model, cfg.corpus.vocab_size, cfg.corpus.feature_dim, cfg.corpus.frame_period_ms)
    model.load(path)
    return model


def evaluate_run(
    model: DuplexModel,
    label: str,
    splits: CorpusSplits,
    fusion: FusionConfig,
    elm: Optional[ElmScorer],
    results_path: Path,
    workers: int = 1,
    hide_progress: bool = True,
) -> dict:
    """Evaluate one model on every test set under every decoding condition and record the cells."""
    reports = {}
    for testset, utterances in testsets_of(splits).items():
        for condition, condition_fusion in decoding_conditions(fusion).items():
            if condition_fusion.alpha > 0 and elm is None:
                log.debug(f"No external LM; skipping {condition} for {label}")
                continue
            result = evaluate(model, utterances, condition_fusion, elm, workers=workers, hide_progress=hide_progress)
            record_result(results_path, label, testset, condition, result.report)
            reports[(testset, condition)] = result.report
            log.info(f"{label} {testset} {condition}: WER {result.report.wer:.2f}")
    return reports


def median_results(per_seed: list, results_path: Path) -> None:
    """
    Write the median over seeds of every cell.

    With an even number of seeds the lower median is taken, so every cell
    is the result of an actual run.
    """
    cells = {}
    for results in per_seed:
        for key, row in results.items():
            cells.setdefault(key, []).append(row)
    for (model, testset, condition), rows in sorted(cells.items()):
        ordered = sorted(rows, key=lambda r: float(r["wer"]))
        chosen = ordered[(len(ordered) - 1) // 2]
        report = WerReport(int(chosen["S"]), int(chosen["D"]), int(chosen["I"]), int(chosen["ref_tokens"]))
        record_result(results_path, model, testset, condition, report)


def build_corpus(cfg: ExperimentConfig, out_dir: Path, hide_progress: bool = True) -> CorpusSplits:
    splits = generate_splits(cfg.corpus, hide_progress=hide_progress)
    try:
        splits.tail = build_tail_set(
            [u.tokens for u in splits.paired], [u.tokens for u in splits.text_only], cfg.tail, cfg.corpus
        )
    except EmptyTailSetError as e:
        log.warning(f"No tail set: {e}")
    write_corpus(splits, cfg.corpus, out_dir)
    log.info(f"Corpus written to [magenta]'{out_dir}'")
    return splits


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Union[str, Path],
    labels: tuple = MODEL_ROWS,
    workers: int = 1,
    sweeps: bool = True,
    hide_progress: bool = True,
    console: Optional[rich.console.Console] = None,
) -> ExperimentSummary:
    """
    Run the whole comparison and write its tables.

    Per seed, one supervised pre-training run initializes every model; each
    model then trains ``dual_steps`` more steps in its mode, BASELINE staying
    supervised.
    """
    out_dir = Path(out_dir)
    splits = build_corpus(cfg, out_dir / "corpus", hide_progress=hide_progress)
    write_run_manifest(
        out_dir, cfg.to_dict(), seeds=list(cfg.seeds), corpus_hash=corpus_content_hash(out_dir / "corpus")
    )

    elm_model = train_external_lm(
        [u.tokens for u in splits.text_only], cfg.lm, cfg.corpus.vocab_size, cfg.seed, hide_progress=hide_progress
    )
    elm_model.save(out_dir / "elm.dlxa")
    elm = ElmScorer(elm_model)

    summary = ExperimentSummary()
    per_seed = []
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed-{seed}"
        pretrain_cfg = replace(cfg.train, dual_steps=0)
        init = pretrain_then_dual(
            splits,
            cfg.model,
            pretrain_cfg,
            AblationMode.SUPERVISED,
            seed_dir / "pretrain",
            seed,
            cfg.corpus.vocab_size,
            cfg.corpus.feature_dim,
            cfg.corpus.frame_period_ms,
            hide_progress=hide_progress,
        )
        dual_cfg = replace(cfg.train, pretrain_steps=0)
        for label in labels:
            checkpoint = pretrain_then_dual(
                splits,
                cfg.model,
                dual_cfg,
                MODES[label],
                seed_dir / label,
                seed,
                cfg.corpus.vocab_size,
                cfg.corpus.feature_dim,
                cfg.corpus.frame_period_ms,
                init=init,
                hide_progress=hide_progress,
            )
            summary.runs[f"{seed}/{label}"] = str(checkpoint)
            model = load_model(checkpoint, cfg)
            evaluate_run(
                model, label, splits, cfg.fusion, elm, seed_dir / RESULTS_FILE, workers, hide_progress=hide_progress
            )
        per_seed.append(read_results(seed_dir / RESULTS_FILE))

    median_results(per_seed, out_dir / RESULTS_FILE)
    medians = read_results(out_dir / RESULTS_FILE)
    summarize(medians, summary)

    if sweeps:
        first = cfg.seeds[0]
        grids = {}
        for label in cfg.sweep.models:
            key = f"{first}/{label}"
            if key not in summary.runs:
                continue
            model = load_model(summary.runs[key], cfg)
            for testset in cfg.sweep.testsets:
                utterances = testsets_of(splits).get(testset)
                if not utterances:
                    continue
                grid = sweep(
                    model,
                    utterances,
                    elm,
                    cfg.sweep.alphas,
                    cfg.sweep.betas,
                    beam_size=cfg.sweep.beam_size,
                    workers=workers,
                    hide_progress=hide_progress,
                )
                grid.to_csv(out_dir / "sweeps" / f"{label}-{testset}.csv")
                grids[(label, testset)] = grid
                summary.fusion_helps[f"{label}/{testset}"] = grid.best()[2] <= grid.cell(0.0, 0.0)
        summary.ilm_gap_closing = gap_closing(grids, cfg)

    (out_dir / "summary.json").write_text(json.dumps(summary.__dict__, indent=2, sort_keys=True) + "\n")
    report_tables(out_dir, console=console)
    return summary


def summarize(medians: dict, summary: ExperimentSummary) -> None:
    """Relative improvements over BASELINE and the observed ablation ordering, without LM."""

    def no_lm(label: str, testset: str) -> Optional[float]:
        row = medians.get((label, testset, "no_lm"))
        return float(row["wer"]) if row is not None else None

    for testset in TESTSET_SPLITS:
        base = no_lm("BASELINE", testset)
        if not base:
            continue
        for label in MODEL_ROWS[1:]:
            value = no_lm(label, testset)
            if value is None:
                continue
            summary.relative_improvement[f"{label}/{testset}"] = relative_improvement(base, value)
        dl, recon, full = no_lm("E-DL", testset), no_lm("E-RECON", testset), no_lm("E-ALL", testset)
        summary.ablation_ordering[testset] = {
            "E-ALL better than BASELINE": full is not None and full < base,
            "E-DL better than BASELINE": dl is not None and dl < base,
            "E-RECON worse than BASELINE": recon is not None and recon > base,
        }
        improvement = summary.relative_improvement.get(f"E-ALL/{testset}")
        if improvement is not None:
            log.info(f"{testset}: E-ALL relative WER improvement over BASELINE {improvement:.1f}%")


def gap_closing(grids: dict, cfg: ExperimentConfig) -> dict:
    ratios = {}
    alpha, beta = cfg.fusion.alpha, cfg.fusion.beta
    for testset in cfg.sweep.testsets:
        base, dual = grids.get(("BASELINE", testset)), grids.get(("E-ALL", testset))
        if base is None or dual is None:
            continue
        if alpha not in base.alphas or beta not in base.betas or 0.0 not in base.betas:
            log.warning(f"Operating point alpha={alpha} beta={beta} is not on the sweep grid")
            continue
        try:
            ratios[testset] = ilm_gap_closing_ratio(base, dual, alpha, beta)
        except ValueError as e:
            log.info(f"ILM gap on {testset} not measurable: {e}")
            continue
        log.info(f"{testset}: internal LM subtraction closes {100 * ratios[testset]:.1f}% of the fusion gap")
    return ratios
