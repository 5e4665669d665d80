"""
Result tables: one table per test set with the models as rows and the
decoding conditions (no LM, shallow fusion, shallow fusion with internal LM
subtraction) as columns.

Results are kept in ``results.csv`` inside a run directory; the tables are
always rendered from that file.
"""

import csv
import logging
from pathlib import Path
from typing import Optional, Union

import jinja2
import rich.console
import rich.table

from duplex.corpus.tailset import REFERENCE_SIZE, REFERENCE_TAU
from duplex.evalkit.wer import WerReport, relative_improvement

log = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
TABLES_FILE = "tables.md"
RESULT_COLUMNS = ["model", "testset", "condition", "wer", "S", "D", "I", "ref_tokens"]
CONDITIONS = {"no_lm": "Baseline", "shallow_fusion": "Shallow Fusion", "internal_lm": "Internal LM"}
MODEL_ROWS = ("BASELINE", "E-ALL", "E-DL", "E-RECON")
TESTSETS = {"test_clean": "Test clean", "test_other": "Test other", "tail": "Tail"}
ABSENT = "-"

# Full-scale reference WERs (no LM, shallow fusion, internal LM) for comparison only
REFERENCE_WER = {
    "test_clean": {
        "BASELINE": (8.4, 6.3, 5.8),
        "E-ALL": (7.5, 5.6, 5.5),
        "E-DL": (8.1, 6.2, 6.0),
        "E-RECON": (10.3, 7.4, 7.2),
    },
    "test_other": {
        "BASELINE": (22.9, 19.5, 18.3),
        "E-ALL": (20.4, 16.3, 16.2),
        "E-DL": (21.9, 18.3, 17.9),
        "E-RECON": (27.0, 22.5, 21.9),
    },
    "tail": {
        "BASELINE": (16.1, 13.8, 12.9),
        "E-ALL": (15.3, 12.6, 12.4),
        "E-DL": (15.5, 13.1, 12.8),
        "E-RECON": (17.4, 14.5, 14.2),
    },
}
REFERENCE_RELATIVE_NO_LM = (10.7, 5.2)
REFERENCE_RELATIVE_FUSION = (11.1, 16.4)
REFERENCE_RELATIVE_FUSION_ABSTRACT = 11.7
REFERENCE_ILM_GAIN = {"BASELINE": (7.9, 6.2), "E-ALL": (1.2, 0.6)}
REFERENCE_BEAM_SIZE = 8
REFERENCE_ALPHA = 0.2
REFERENCE_BETA = 0.1


def read_results(path: Union[str, Path]) -> dict:
    """Rows of a results file keyed by (model, testset, condition)."""
    path = Path(path)
    if not path.is_file():
        raise LookupError(f"No results file found at '{path}'")
    with open(path, newline="") as fh:
        return {(row["model"], row["testset"], row["condition"]): row for row in csv.DictReader(fh)}


def record_result(
    path: Union[str, Path], model: str, testset: str, condition: str, report: WerReport
) -> Path:
    """Insert or replace one cell of the results file."""
    if condition not in CONDITIONS:
        raise LookupError(f"Unknown condition '{condition}'. Choose from {', '.join(CONDITIONS)}")
    path = Path(path)
    results = read_results(path) if path.is_file() else {}
    results[(model, testset, condition)] = {
        "model": model,
        "testset": testset,
        "condition": condition,
        "wer": f"{report.wer:.4f}",
        "S": report.substitutions,
        "D": report.deletions,
        "I": report.insertions,
        "ref_tokens": report.ref_tokens,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for key in sorted(results):
            writer.writerow(results[key])
    return path


def _wer(results: dict, model: str, testset: str, condition: str) -> Optional[float]:
    row = results.get((model, testset, condition))
    return float(row["wer"]) if row is not None else None


def _format(value: Optional[float], suffix: str = "") -> str:
    return ABSENT if value is None else f"{value:.2f}{suffix}"


def _models(results: dict) -> list:
    present = {key[0] for key in results}
    return [m for m in MODEL_ROWS if m in present] + sorted(present - set(MODEL_ROWS))


def _testsets(results: dict) -> list:
    present = {key[1] for key in results}
    return [t for t in TESTSETS if t in present] + sorted(present - set(TESTSETS))


def table_context(results: dict, title: str = "Results") -> dict:
    """Everything the template needs, computed from the results rows only."""
    models = _models(results)
    tables = []
    improvements = []
    ilm_gains = []
    for testset in _testsets(results):
        rows = []
        for model in models:
            cells = [_format(_wer(results, model, testset, c)) for c in CONDITIONS]
            rows.append({"label": model, "cells": cells})
        tables.append({"title": TESTSETS.get(testset, testset), "rows": rows})

        for model in models:
            if model == "BASELINE":
                continue
            cells = []
            for condition in CONDITIONS:
                base = _wer(results, "BASELINE", testset, condition)
                new = _wer(results, model, testset, condition)
                value = relative_improvement(base, new) if base and new is not None else None
                cells.append(_format(value, "%"))
            improvements.append({"label": model, "testset": TESTSETS.get(testset, testset), "cells": cells})

        for model in models:
            fusion = _wer(results, model, testset, "shallow_fusion")
            ilm = _wer(results, model, testset, "internal_lm")
            if fusion and ilm is not None:
                gain = _format(relative_improvement(fusion, ilm), "%")
                ilm_gains.append({"label": model, "testset": TESTSETS.get(testset, testset), "gain": gain})

    return {
        "title": title,
        "columns": [{"key": key, "header": header} for key, header in CONDITIONS.items()],
        "tables": tables,
        "improvements": improvements,
        "ilm_gains": ilm_gains,
        "reference_notes": reference_notes(),
    }


def reference_notes() -> list:
    clean, other = REFERENCE_WER["test_clean"], REFERENCE_WER["test_other"]
    clean_no_lm = relative_improvement(clean["BASELINE"][0], clean["E-ALL"][0])
    other_no_lm = relative_improvement(other["BASELINE"][0], other["E-ALL"][0])
    return [
        f"Reference relative improvement of E-ALL without an LM: "
        f"{REFERENCE_RELATIVE_NO_LM[0]}%/{REFERENCE_RELATIVE_NO_LM[1]}% (test clean/test other).",
        f"Recomputed from the reference WERs: {clean_no_lm:.1f}%/{other_no_lm:.1f}%. "
        f"The test-other figure ({other['BASELINE'][0]} to {other['E-ALL'][0]}) does not match the stated "
        f"{REFERENCE_RELATIVE_NO_LM[1]}%; both are kept as reported.",
        f"Reference relative improvement with shallow fusion: {REFERENCE_RELATIVE_FUSION[0]}%/"
        f"{REFERENCE_RELATIVE_FUSION[1]}%, given as {REFERENCE_RELATIVE_FUSION_ABSTRACT}% for test clean elsewhere.",
        f"Reference gain from internal LM subtraction on top of shallow fusion: BASELINE "
        f"{REFERENCE_ILM_GAIN['BASELINE'][0]}%/{REFERENCE_ILM_GAIN['BASELINE'][1]}%, E-ALL "
        f"{REFERENCE_ILM_GAIN['E-ALL'][0]}%/{REFERENCE_ILM_GAIN['E-ALL'][1]}%.",
        f"Reference decoding: beam {REFERENCE_BEAM_SIZE}, alpha {REFERENCE_ALPHA}, beta {REFERENCE_BETA}; "
        f"tail set of {REFERENCE_SIZE} transcripts at tau {REFERENCE_TAU:g}.",
    ]


def render_tables(results: dict, title: str = "Results") -> str:
    env = jinja2.Environment(
        loader=jinja2.PackageLoader("duplex", "report-template"),
        keep_trailing_newline=True,
    )
    template = env.get_template(TABLES_FILE)
    try:
        return template.render(table_context(results, title))
    except Exception as e:
        log.error(f"Could not render template file '{TABLES_FILE}':\n{e}")
        raise e


def rich_tables(results: dict) -> list:
    tables = []
    for testset in _testsets(results):
        table = rich.table.Table(title=TESTSETS.get(testset, testset), title_style="bold", header_style="bold magenta")
        table.add_column("Model", style="cyan")
        for header in CONDITIONS.values():
            table.add_column(header, justify="right")
        for model in _models(results):
            table.add_row(model, *[_format(_wer(results, model, testset, c)) for c in CONDITIONS])
        tables.append(table)
    return tables


def report_tables(run_dir: Union[str, Path], console: Optional[rich.console.Console] = None) -> str:
    """
    Render the tables of a run directory from its results file.

    The Markdown rendering is written to ``tables.md`` next to the results and
    returned; when a console is given the tables are printed to it as well.
    Cells without a result are shown as absent.
    """
    run_dir = Path(run_dir)
    results = read_results(run_dir / RESULTS_FILE)
    rendered = render_tables(results, title=f"Results for {run_dir.name}")
    (run_dir / TABLES_FILE).write_text(rendered)
    log.debug(f"Tables written to [magenta]'{run_dir / TABLES_FILE}'")
    if console is not None:
        for table in rich_tables(results):
            console.print(table)
    return rendered
