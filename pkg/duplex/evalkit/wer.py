import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

log = logging.getLogger(__name__)


class UndefinedWerError(ValueError):
    """Raised when the reference is empty."""

    pass


@dataclass(frozen=True)
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_tokens: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_tokens == 0:
            raise UndefinedWerError("WER is undefined without reference tokens")
        return 100.0 * self.errors / self.ref_tokens

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_tokens + other.ref_tokens,
        )


def wer(ref: Sequence[int], hyp: Sequence[int]) -> WerReport:
    """
    Align ``hyp`` to ``ref`` with unit-cost edits.

    Among minimum-cost alignments the one with the fewest insertions plus
    deletions wins, i.e. substitutions are preferred over an
    insertion/deletion pair.
    """
    if len(ref) == 0:
        raise UndefinedWerError("Cannot score against an empty reference")
    rows, cols = len(ref) + 1, len(hyp) + 1
    # each cell: (cost, indels, substitutions, deletions, insertions)
    table = [[(0, 0, 0, 0, 0)] * cols for _ in range(rows)]
    for i in range(1, rows):
        table[i][0] = (i, i, 0, i, 0)
    for j in range(1, cols):
        table[0][j] = (j, j, 0, 0, j)
    for i in range(1, rows):
        for j in range(1, cols):
            diag = table[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                candidates = [diag]
            else:
                candidates = [(diag[0] + 1, diag[1], diag[2] + 1, diag[3], diag[4])]
            up = table[i - 1][j]
            left = table[i][j - 1]
            candidates.append((up[0] + 1, up[1] + 1, up[2], up[3] + 1, up[4]))
            candidates.append((left[0] + 1, left[1] + 1, left[2], left[3], left[4] + 1))
            table[i][j] = min(candidates, key=lambda c: (c[0], c[1]))
    _, _, subs, dels, ins = table[-1][-1]
    return WerReport(subs, dels, ins, len(ref))


def pooled(reports: Iterable[WerReport]) -> WerReport:
    """Corpus-level report: error counts and reference lengths summed over utterances."""
    total = WerReport()
    for report in reports:
        total = total + report
    return total


def relative_improvement(base_wer: float, new_wer: float) -> float:
    if base_wer <= 0:
        raise ValueError(f"Relative improvement needs a positive baseline WER, got {base_wer}")
    return 100.0 * (base_wer - new_wer) / base_wer
