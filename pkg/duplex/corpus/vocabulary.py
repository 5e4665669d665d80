from dataclasses import dataclass
from typing import Iterable, Tuple

BLANK_ID = 0

# Non-blank token ids of one transcript.
TokenSequence = Tuple[int, ...]


class VocabularyError(LookupError):
    """Raised for token ids outside the vocabulary or for the reserved blank."""

    pass


@dataclass(frozen=True)
class Vocabulary:
    """Closed token inventory; id 0 is the reserved blank."""

    tokens: Tuple[str, ...]
    blank_id: int = BLANK_ID

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        if size < 2:
            raise ValueError(f"A vocabulary needs the blank and at least one token, got size {size}")
        return cls(("<blank>",) + tuple(f"w{i:03d}" for i in range(1, size)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def num_labels(self) -> int:
        """Number of non-blank tokens."""
        return self.size - 1

    def check(self, ids: Iterable[int]) -> TokenSequence:
        """Validate a transcript and return it as a tuple."""
        ids = tuple(int(i) for i in ids)
        for i in ids:
            if i == self.blank_id:
                raise VocabularyError("The blank id cannot appear in a transcript")
            if not 0 <= i < self.size:
                raise VocabularyError(f"Token id {i} outside vocabulary of size {self.size}")
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in self.check(ids)]

    def encode(self, words: Iterable[str]) -> TokenSequence:
        index = {token: i for i, token in enumerate(self.tokens)}
        try:
            return self.check(index[w] for w in words)
        except KeyError as e:
            raise VocabularyError(f"Unknown token {e}") from e
