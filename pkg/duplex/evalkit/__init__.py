# run_experiment is imported from duplex.evalkit.experiment, which depends on duplex.config.
from duplex.evalkit.evaluate import (
    DEFAULT_ALPHAS,
    DEFAULT_BETAS,
    EvaluationResult,
    SweepConfig,
    SweepGrid,
    decode_utterance,
    evaluate,
    ilm_gap_closing_ratio,
    sweep,
    write_decode_records,
)
from duplex.evalkit.report import read_results, record_result, render_tables, report_tables
from duplex.evalkit.wer import UndefinedWerError, WerReport, pooled, relative_improvement, wer
