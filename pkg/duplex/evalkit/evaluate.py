"""
Corpus-level evaluation and the alpha/beta fusion sweep.

Every test utterance is decoded with the cascaded (delayed) encoder path and
scored against its reference; error counts and reference lengths are pooled
over the set before the rate is taken.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import rich.progress

from duplex.decode import DecodeInputError, FusionConfig, Hypothesis, beam_search
from duplex.evalkit.wer import WerReport, pooled, wer
from duplex.models.duplex import DuplexModel
from duplex.models.lm import ElmScorer, ExternalLM
from duplex.tensor import ShapeError

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(round(0.05 * i, 3) for i in range(9))
DEFAULT_BETAS = tuple(round(0.025 * i, 3) for i in range(9))


@dataclass
class SweepConfig:
    alphas: tuple = DEFAULT_ALPHAS
    betas: tuple = DEFAULT_BETAS
    testsets: tuple = ("test_clean", "tail")
    models: tuple = ("BASELINE", "E-ALL")
    beam_size: int = 8

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.betas = tuple(float(b) for b in self.betas)
        self.testsets = tuple(self.testsets)
        self.models = tuple(self.models)
        if not self.alphas or not self.betas:
            raise ValueError("Sweep grids must not be empty")
        if min(self.alphas + self.betas) < 0:
            raise ValueError("Sweep weights must be non-negative")


@dataclass
class EvaluationResult:
    report: WerReport
    utterances: list = field(default_factory=list)
    records: list = field(default_factory=list)
    skipped: int = 0


def decode_utterance(
    model: DuplexModel,
    features,
    fusion: FusionConfig,
    elm: Optional[ElmScorer] = None,
    delayed: bool = True,
) -> Optional[Hypothesis]:
    """Top hypothesis for one utterance; None when the audio is too short to encode."""
    try:
        enc = model.encode_audio(features, delayed=delayed)
        return beam_search(model.hat, enc, fusion, elm)[0]
    except (ShapeError, DecodeInputError) as e:
        log.debug(f"Nothing to decode: {e}")
        return None


def evaluate(
    model: DuplexModel,
    utterances: Sequence,
    fusion: FusionConfig,
    elm: Optional[Union[ExternalLM, ElmScorer]] = None,
    workers: int = 1,
    delayed: bool = True,
    hide_progress: bool = True,
) -> EvaluationResult:
    """
    Decode and score a test set.

    Utterances without features (missing feature files) or without a
    reference are skipped and counted. An utterance that cannot be encoded
    scores as an empty hypothesis. Decoding runs on ``workers`` threads;
    results keep the input order.
    """
    if isinstance(elm, ExternalLM):
        elm = ElmScorer(elm)
    usable = []
    skipped = 0
    for utt in utterances:
        if utt.features is None or not utt.tokens:
            log.debug(f"Skipping '{utt.id}': no features or no reference")
            skipped += 1
        else:
            usable.append(utt)
    if skipped:
        log.warning(f"Skipped {skipped} of {len(utterances)} utterances without features or reference")

    with rich.progress.Progress(
        "[bold blue]{task.description}",
        rich.progress.BarColumn(bar_width=None),
        "[magenta]{task.completed} of {task.total}",
        transient=True,
        disable=hide_progress,
    ) as progress:
        task = progress.add_task("Decoding", total=len(usable))

        def run(utt):
            hyp = decode_utterance(model, utt.features, fusion, elm, delayed=delayed)
            progress.update(task, advance=1)
            return hyp

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            hyps = list(pool.map(run, usable))

    per_utterance = []
    records = []
    for utt, hyp in zip(usable, hyps):
        tokens = hyp.tokens if hyp is not None else ()
        report = wer(utt.tokens, tokens)
        per_utterance.append((utt.id, report))
        record = hyp.to_record(utt.id) if hyp is not None else {"id": utt.id, "hyp_tokens": []}
        record["ref_tokens"] = list(utt.tokens)
        record.update({"S": report.substitutions, "D": report.deletions, "I": report.insertions})
        records.append(record)
    return EvaluationResult(pooled(r for _, r in per_utterance), per_utterance, records, skipped)


def write_decode_records(path: Union[str, Path], records: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return path


@dataclass
class SweepGrid:
    """Pooled WER for every (alpha, beta) pair; ``wer[i, j]`` belongs to ``alphas[i]``, ``betas[j]``."""

    alphas: list
    betas: list
    wer: np.ndarray
    reports: dict = field(default_factory=dict)

    def cell(self, alpha: float, beta: float) -> float:
        return float(self.wer[self.alphas.index(alpha), self.betas.index(beta)])

    def best(self) -> tuple[float, float, float]:
        i, j = np.unravel_index(int(np.argmin(self.wer)), self.wer.shape)
        return self.alphas[i], self.betas[j], float(self.wer[i, j])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha\\beta"] + [f"{b:g}" for b in self.betas])
            for alpha, row in zip(self.alphas, self.wer):
                writer.writerow([f"{alpha:g}"] + [f"{value:.6f}" for value in row])
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "SweepGrid":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        betas = [float(b) for b in rows[0][1:]]
        alphas = [float(row[0]) for row in rows[1:]]
        values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        return cls(alphas, betas, values)


def sweep(
    model: DuplexModel,
    utterances: Sequence,
    elm: Optional[Union[ExternalLM, ElmScorer]],
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    betas: Sequence[float] = DEFAULT_BETAS,
    beam_size: int = 8,
    workers: int = 1,
    hide_progress: bool = True,
) -> SweepGrid:
    """Full decode of the test set at every grid point; no rescoring shortcuts."""
    if not alphas or not betas:
        raise ValueError("Sweep grids must not be empty")
    if isinstance(elm, ExternalLM):
        elm = ElmScorer(elm)
    values = np.zeros((len(alphas), len(betas)))
    reports = {}
    for i, alpha in enumerate(alphas):
        for j, beta in enumerate(betas):
            fusion = FusionConfig(alpha=alpha, beta=beta, beam_size=beam_size)
            result = evaluate(model, utterances, fusion, elm, workers=workers, hide_progress=hide_progress)
            reports[(alpha, beta)] = result.report
            values[i, j] = result.report.wer
            log.debug(f"alpha={alpha:g} beta={beta:g}: WER {values[i, j]:.2f}")
    return SweepGrid(list(alphas), list(betas), values, reports)


def ilm_gap_closing_ratio(base: SweepGrid, dual: SweepGrid, alpha: float, beta: float) -> float:
    """
    Share of the shallow-fusion gap between two models that ILM subtraction removes.

    The gap is measured at (alpha, 0) and again at (alpha, beta); 1 means
    subtracting the internal LM closes it completely, 0 that it leaves it as is.
    """
    gap_fusion = base.cell(alpha, 0.0) - dual.cell(alpha, 0.0)
    if gap_fusion == 0:
        raise ValueError("The two models tie under shallow fusion; there is no gap to close")
    gap_ilm = base.cell(alpha, beta) - dual.cell(alpha, beta)
    return (gap_fusion - gap_ilm) / gap_fusion
