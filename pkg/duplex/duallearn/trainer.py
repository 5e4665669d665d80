"""
The optimisation loop: supervised pre-training on S followed by dual training on batch thirds.

A run directory holds ``losses.csv``, numbered checkpoints under
``checkpoints/`` with a JSON sidecar carrying the generator states, the final
``model.dlxa`` and, when training blows up, ``divergence.json``.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import rich.progress

from duplex.corpus.splits import CorpusSplits
from duplex.decode import FusionConfig
from duplex.duallearn.losses import (
    LOSS_NAMES,
    AblationMode,
    LossBreakdown,
    PseudoLabeler,
    PseudoLabelCache,
    TaskWeights,
    TriBatch,
    active_losses,
    compose_losses,
    pseudo_label_audio,
)
from duplex.duallearn.schedule import AUGMENT_STREAM, TrainConfig, TriBatchSampler, alternating_third
from duplex.evalkit.wer import pooled, wer
from duplex.models.config import ExternalLMConfig, ModelConfig
from duplex.models.duplex import DuplexModel
from duplex.models.lm import ExternalLM
from duplex.tensor import (
    Adam,
    NonFiniteError,
    backward,
    concat,
    load_checkpoint,
    mean,
    neg,
    save_checkpoint,
    select_prefix,
)
from duplex.utils import make_rng

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["step", "phase", "lr", "total", "L_S", "L_A", "L_T", *LOSS_NAMES, "skipped", "pseudo_accuracy"]
LM_STREAM = 20
ALL_THIRDS = ("paired", "audio_only", "text_only")


class TrainingDivergedError(FloatingPointError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, message: str, batch_ids: list, step: int):
        super().__init__(message)
        self.batch_ids = batch_ids
        self.step = step


def compose_step(
    model: DuplexModel,
    optimizer: Adam,
    batch: TriBatch,
    mode: AblationMode,
    weights: TaskWeights,
    rng: Optional[np.random.Generator],
    labeler: PseudoLabeler,
    step: int = 0,
    thirds=ALL_THIRDS,
) -> LossBreakdown:
    """
    One optimisation step on a TriBatch.

    Raises:
        TrainingDivergedError: If the loss or any gradient is not finite. The
            parameters are left as they were before the step.
    """
    optimizer.zero_grad()
    try:
        breakdown = compose_losses(model, batch, mode, weights, True, rng, labeler, step=step, thirds=thirds)
        total = breakdown.total.item()
        if not np.isfinite(total):
            raise NonFiniteError(f"loss is {total}")
        if backward(breakdown.total):
            optimizer.step()
    except NonFiniteError as e:
        raise TrainingDivergedError(f"Training diverged at step {step}: {e}", batch.all_ids(), step) from e
    return breakdown


@dataclass
class RunState:
    """What a checkpoint sidecar stores beside the tensors."""

    step: int = 0
    mode: str = AblationMode.SUPERVISED.value
    initialized: bool = False
    sampler: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)


def _to_storage_precision(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


class DualTrainer:
    """
    Drives both training phases of one run.

    Args:
        model (DuplexModel): The model to train, updated in place.
        splits (CorpusSplits): Corpus the batch thirds are drawn from.
        cfg (TrainConfig): Step counts, optimiser and pseudo-labelling settings.
        mode (AblationMode): Loss set of the dual phase.
        run_dir (Path): Where curves and checkpoints are written.
        seed (int): Seed of the batch and augmentation generators.
        initialized (bool): Whether the model was loaded from a supervised run.
        hide_progress (bool): Don't show the progress bar.
    """

    def __init__(
        self,
        model: DuplexModel,
        splits: CorpusSplits,
        cfg: TrainConfig,
        mode: AblationMode,
        run_dir: Union[str, Path],
        seed: int,
        initialized: bool = False,
        hide_progress: bool = True,
    ):
        self.model = model
        self.cfg = cfg
        self.mode = mode
        self.run_dir = Path(run_dir)
        self.seed = seed
        self.initialized = initialized
        self.hide_progress = hide_progress
        self.sampler = TriBatchSampler(splits, cfg.third_size, seed)
        self.augment_rng = make_rng(seed, AUGMENT_STREAM)
        self.optimizer = Adam(dict(model.named_parameters()), lr=cfg.lr, warmup_steps=cfg.warmup_steps)
        self.labeler = PseudoLabeler(
            FusionConfig(beam_size=cfg.pseudo_beam_size), PseudoLabelCache(cfg.pseudo_refresh_every)
        )
        self.probe = [u for u in splits.audio_only if u.hidden_tokens and u.features is not None]
        self.probe = self.probe[: cfg.accuracy_probe_size]
        self.step = 0
        self.curve_path = self.run_dir / "losses.csv"

    @property
    def total_steps(self) -> int:
        return self.cfg.pretrain_steps + self.cfg.dual_steps

    def phase_of(self, step: int) -> tuple[str, AblationMode]:
        if step < self.cfg.pretrain_steps:
            return "pretrain", AblationMode.SUPERVISED
        return "dual", self.mode

    def run(self) -> Path:
        """Train from the current step to the end and return the final checkpoint."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if self.mode in (AblationMode.ALL, AblationMode.DL) and self.cfg.pretrain_steps == 0 and not self.initialized:
            log.warning(
                f"Mode {self.mode.run_label} starts without supervised initialization; "
                "dual training from scratch is known to diverge"
            )
        if self.step == 0:
            self._reset_curve()
        skipped_total = 0
        with rich.progress.Progress(
            "[bold blue]{task.description}",
            rich.progress.BarColumn(bar_width=None),
            "[magenta]{task.completed} of {task.total}",
            "[dark_orange]{task.fields[loss]}",
            transient=True,
            disable=self.hide_progress,
        ) as progress:
            task = progress.add_task(
                f"Training {self.mode.run_label}", total=self.total_steps, completed=self.step, loss=""
            )
            while self.step < self.total_steps:
                breakdown = self.train_step()
                skipped_total += sum(breakdown.skipped.values())
                self.step += 1
                progress.update(task, advance=1, loss=f"loss {breakdown.total.item():.4f}")
                if self.step % self.cfg.checkpoint_every == 0 and self.step < self.total_steps:
                    self.save_checkpoint(self.run_dir / "checkpoints" / f"step-{self.step:06d}.dlxa")
        if skipped_total:
            log.warning(f"{skipped_total} batch items were skipped (short audio or empty pseudo-labels)")
        final = self.save_checkpoint(self.run_dir / "model.dlxa")
        log.info(f"Training finished after {self.step} steps, model saved to [magenta]'{final}'")
        return final

    def train_step(self) -> LossBreakdown:
        phase, mode = self.phase_of(self.step)
        thirds = (alternating_third(self.step),) if self.cfg.alternating and phase == "dual" else ALL_THIRDS
        batch = self.sampler.sample()
        lr = self.optimizer.current_lr()
        active = active_losses(mode, self.cfg.weights, thirds)
        if self.cfg.pseudo_workers > 1:
            self.labeler.prefetch(
                self.model,
                batch,
                self.step,
                self.cfg.pseudo_workers,
                audio="u_tts" in active,
                text=bool(active & {"u_asr_streaming", "u_asr_delay"}),
            )
        try:
            breakdown = compose_step(
                self.model,
                self.optimizer,
                batch,
                mode,
                self.cfg.weights,
                self.augment_rng,
                self.labeler,
                step=self.step,
                thirds=thirds,
            )
        except TrainingDivergedError as e:
            self._dump_divergence(e, phase)
            raise
        accuracy = None
        if phase == "dual" and "u_tts" in active and self.probe and (self.step + 1) % self.cfg.log_every == 0:
            accuracy = pseudo_label_accuracy(self.model, self.probe, self.labeler.fusion)
            log.info(f"Step {self.step + 1}: pseudo-transcript token accuracy {100 * accuracy:.1f}%")
        if (self.step + 1) % self.cfg.log_every == 0:
            log.debug(f"Step {self.step + 1} [{phase}] loss {breakdown.total.item():.5f} {breakdown.components}")
        self._append_curve(phase, lr, breakdown, accuracy)
        return breakdown

    # Loss curves

    def _reset_curve(self) -> None:
        with open(self.curve_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CURVE_COLUMNS)

    def _append_curve(self, phase: str, lr: float, breakdown: LossBreakdown, accuracy: Optional[float]) -> None:
        row = {"step": self.step, "phase": phase, "lr": lr, "total": breakdown.total.item()}
        row.update(breakdown.aggregates)
        row.update(breakdown.components)
        row["skipped"] = sum(breakdown.skipped.values())
        row["pseudo_accuracy"] = "" if accuracy is None else accuracy
        with open(self.curve_path, "a", newline="") as fh:
            csv.writer(fh).writerow([row.get(column, "") for column in CURVE_COLUMNS])

    def _truncate_curve(self, step: int) -> None:
        if not self.curve_path.is_file():
            self._reset_curve()
            return
        with open(self.curve_path, newline="") as fh:
            rows = [row for row in csv.reader(fh)][1:]
        with open(self.curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            writer.writerows(row for row in rows if row and int(row[0]) < step)

    def _dump_divergence(self, error: TrainingDivergedError, phase: str) -> None:
        path = self.run_dir / "divergence.json"
        dump = {"step": error.step, "phase": phase, "mode": self.mode.value, "error": str(error)}
        dump["batch_ids"] = error.batch_ids
        path.write_text(json.dumps(dump, indent=2) + "\n")
        log.error(f"Training diverged at step {error.step}; offending batch written to [magenta]'{path}'")

    # Checkpoints

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        """Write parameters and optimiser moments, plus a JSON sidecar with the generator states."""
        path = Path(path)
        tensors = self.model.state_dict()
        tensors.update(self.optimizer.state_dict())
        save_checkpoint(path, tensors)
        # checkpoints hold 32-bit values; the live run continues from exactly what was written
        for param in self.optimizer.params.values():
            param.data = _to_storage_precision(param.data)
        for moments in (self.optimizer.state.m, self.optimizer.state.v):
            for name in moments:
                moments[name] = _to_storage_precision(moments[name])
        run_state = RunState(
            step=self.step,
            mode=self.mode.value,
            initialized=self.initialized,
            sampler=self.sampler.get_state(),
            augment=self.augment_rng.bit_generator.state,
        )
        path.with_suffix(".json").write_text(json.dumps(run_state.__dict__, indent=2, default=int) + "\n")
        log.debug(f"Checkpoint at step {self.step} written to [magenta]'{path}'")
        return path

    def resume(self, path: Union[str, Path]) -> int:
        """
        Continue from a checkpoint written by ``save_checkpoint``.

        Returns the step training continues from. With a pseudo-label refresh
        interval of one, the resumed run repeats the uninterrupted one exactly.
        """
        path = Path(path)
        sidecar = path.with_suffix(".json")
        if not sidecar.is_file():
            raise LookupError(f"Checkpoint '{path}' has no run state file '{sidecar}'")
        run_state = RunState(**json.loads(sidecar.read_text()))
        if AblationMode(run_state.mode) is not self.mode:
            raise ValueError(f"Checkpoint was written in mode '{run_state.mode}', not '{self.mode.value}'")
        tensors = load_checkpoint(path)
        self.model.load(tensors)
        self.optimizer.load_state_dict(select_prefix(tensors, ["adam."]))
        self.sampler.set_state(run_state.sampler)
        self.augment_rng.bit_generator.state = run_state.augment
        self.initialized = run_state.initialized
        self.step = run_state.step
        self.labeler.cache.clear()
        self._truncate_curve(self.step)
        log.info(f"Resumed {self.mode.run_label} from step {self.step}")
        return self.step


def pretrain_then_dual(
    splits: CorpusSplits,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    mode: AblationMode,
    run_dir: Union[str, Path],
    seed: int,
    vocab_size: int,
    feature_dim: int,
    frame_period_ms: int = 10,
    init: Optional[Union[str, Path]] = None,
    resume: Optional[Union[str, Path]] = None,
    hide_progress: bool = True,
) -> Path:
    """
    Train one run: supervised on S, then the dual phase in ``mode``.

    BASELINE keeps training supervised for the dual-phase steps, so every run
    takes the same number of optimiser steps. ``init`` loads the ASR and TTS
    components from an earlier checkpoint before training starts.
    """
    model = DuplexModel(model_cfg, vocab_size, feature_dim, frame_period_ms=frame_period_ms, seed=seed)
    initialized = False
    if init is not None:
        loaded = model.load(init)
        log.info(f"Initialized {len(loaded)} tensors from [magenta]'{init}'")
        initialized = True
    counts = model.parameter_counts()
    log.debug(f"Parameters per component: {counts} (total {sum(counts.values())})")
    trainer = DualTrainer(model, splits, cfg, mode, run_dir, seed, initialized=initialized, hide_progress=hide_progress)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


def pseudo_label_accuracy(model: DuplexModel, utterances: list, fusion: FusionConfig) -> float:
    """
    Fraction of hidden reference tokens the pseudo-transcripts get right.

    Matched tokens are the reference tokens aligned without substitution or
    deletion; records without a hidden transcript are ignored.
    """
    reports = []
    for utt in utterances:
        if not utt.hidden_tokens or utt.features is None:
            continue
        hyp = pseudo_label_audio(model, utt.features, fusion) or ()
        reports.append(wer(utt.hidden_tokens, hyp))
    if not reports:
        raise ValueError("No utterances with a hidden transcript to probe")
    total = pooled(reports)
    return (total.ref_tokens - total.substitutions - total.deletions) / total.ref_tokens


@dataclass
class LMTrainConfig:
    model: ExternalLMConfig = field(default_factory=ExternalLMConfig)
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 50

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ExternalLMConfig(**self.model)
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("LM training needs non-negative steps and a positive batch size")


def train_external_lm(
    texts: list,
    cfg: LMTrainConfig,
    vocab_size: int,
    seed: int,
    hide_progress: bool = True,
) -> ExternalLM:
    """
    Fit the external LM on unpaired text by maximum likelihood.

    Transcripts longer than the model context are cut to its length.
    """
    texts = [tuple(t[: cfg.model.context_length]) for t in texts if t]
    if not texts:
        raise ValueError("No text to train the external LM on")
    rng = make_rng(seed, LM_STREAM)
    lm = ExternalLM(cfg.model, vocab_size, make_rng(seed, LM_STREAM, 1))
    optimizer = Adam(dict(lm.named_parameters()), lr=cfg.lr, warmup_steps=cfg.warmup_steps)
    with rich.progress.Progress(
        "[bold blue]{task.description}",
        rich.progress.BarColumn(bar_width=None),
        "[magenta]{task.completed} of {task.total}",
        transient=True,
        disable=hide_progress,
    ) as progress:
        task = progress.add_task("Training external LM", total=cfg.steps)
        for step in range(cfg.steps):
            picked = rng.choice(len(texts), size=min(cfg.batch_size, len(texts)), replace=False)
            optimizer.zero_grad()
            nll = neg(mean(concat([lm.sequence_logprob(texts[int(i)]).reshape(1) for i in picked], axis=0)))
            if not np.isfinite(nll.item()):
                raise TrainingDivergedError(f"External LM loss is {nll.item()}", [], step)
            backward(nll)
            optimizer.step()
            progress.update(task, advance=1)
            if (step + 1) % 100 == 0:
                log.debug(f"External LM step {step + 1}: nll {nll.item():.4f}")
    return lm
