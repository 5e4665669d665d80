"""
Corpus persistence.

A corpus directory holds ``corpus.json`` (the generating CorpusSpec), one
JSON-lines manifest per split and one binary feature file per utterance under
``features/<split>/``. Feature files are little-endian: magic ``DLXF``, then
version, frame count and dimension as u32, then 32-bit floats row-major.
"""

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np

from duplex.corpus.splits import CorpusSplits, Utterance, redraw_hidden_transcripts
from duplex.corpus.synth import CorpusSpec
from duplex.frontend import FeatureSequence
from duplex.utils import git_blob_hash

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"DLXF"
FEATURE_VERSION = 1
SPEC_FILE = "corpus.json"


class FeatureFileError(ValueError):
    """Raised when a feature file is malformed."""

    pass


def write_features(path: Union[str, Path], x: FeatureSequence) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, x.num_frames, x.dim))
        fh.write(x.frames.astype("<f4").tobytes(order="C"))
    return path


def read_features(path: Union[str, Path], frame_period_ms: int) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"'{path}' is not a feature file (bad magic)")
    try:
        version, num_frames, dim = struct.unpack_from("<III", raw, 4)
    except struct.error as e:
        raise FeatureFileError(f"Truncated header in '{path}'") from e
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"Unsupported feature file version {version} in '{path}'")
    expected = 16 + 4 * num_frames * dim
    if len(raw) != expected:
        raise FeatureFileError(f"'{path}' holds {len(raw)} bytes, expected {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(num_frames, dim)
    return FeatureSequence(frames, frame_period_ms)


def write_manifest(path: Union[str, Path], records: list, split: str) -> Path:
    """
    Write one split as JSON lines, with its feature files next to it.

    U_A transcripts (``hidden_tokens``) never leave memory.
    """
    path = Path(path)
    root = path.parent
    with open(path, "w") as fh:
        for utt in records:
            feature_file: Optional[str] = None
            num_frames: Optional[int] = None
            if utt.features is not None:
                relative = Path("features") / split / f"{utt.id}.dlxf"
                write_features(root / relative, utt.features)
                feature_file = relative.as_posix()
                num_frames = utt.features.num_frames
            tokens = list(utt.tokens) if utt.tokens is not None else None
            record = {"id": utt.id, "tokens": tokens, "feature_file": feature_file, "num_frames": num_frames}
            fh.write(json.dumps(record) + "\n")
    return path


def read_manifest(path: Union[str, Path], frame_period_ms: int = 10) -> tuple[list, int]:
    """
    Read a split manifest.

    Returns the utterances and the number of records whose feature file was
    missing; those keep ``features=None``.
    """
    path = Path(path)
    records = []
    missing = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            features = None
            if entry.get("feature_file"):
                feature_path = path.parent / entry["feature_file"]
                if feature_path.is_file():
                    features = read_features(feature_path, frame_period_ms)
                else:
                    log.debug(f"Feature file missing for '{entry['id']}': '{feature_path}'")
                    missing += 1
            tokens = tuple(entry["tokens"]) if entry.get("tokens") is not None else None
            records.append(Utterance(entry["id"], tokens, features))
    if missing:
        log.warning(f"{missing} feature files referenced by [magenta]'{path}'[/] are missing")
    return records, missing


def write_corpus(splits: CorpusSplits, spec: CorpusSpec, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / SPEC_FILE).write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    for name, records in splits.by_name().items():
        if name == "tail" and not records:
            continue
        write_manifest(out_dir / f"{name}.jsonl", records, name)
        log.debug(f"Wrote {len(records)} records to [magenta]'{out_dir / name}.jsonl'")
    return out_dir


def load_spec(corpus_dir: Union[str, Path]) -> CorpusSpec:
    path = Path(corpus_dir) / SPEC_FILE
    if not path.is_file():
        raise LookupError(f"No corpus found in '{corpus_dir}' (missing {SPEC_FILE})")
    return CorpusSpec(**json.loads(path.read_text()))


def load_corpus(corpus_dir: Union[str, Path]) -> tuple[CorpusSpec, CorpusSplits]:
    corpus_dir = Path(corpus_dir)
    spec = load_spec(corpus_dir)
    loaded = {}
    for name in ("S", "U_A", "U_T", "test_clean", "test_other", "tail"):
        manifest = corpus_dir / f"{name}.jsonl"
        loaded[name] = read_manifest(manifest, spec.frame_period_ms)[0] if manifest.is_file() else []
    splits = CorpusSplits(
        paired=loaded["S"],
        audio_only=loaded["U_A"],
        text_only=loaded["U_T"],
        test_clean=loaded["test_clean"],
        test_other=loaded["test_other"],
        tail=loaded["tail"],
    )
    redraw_hidden_transcripts(spec, splits.audio_only)
    return spec, splits


def corpus_content_hash(corpus_dir: Union[str, Path]) -> str:
    """Git-tree-style hash over every manifest and feature file of a corpus directory."""
    corpus_dir = Path(corpus_dir)
    entries = []
    for path in sorted(corpus_dir.rglob("*")):
        if path.is_file() and (path.suffix in (".jsonl", ".dlxf") or path.name == SPEC_FILE):
            entries.append(f"{git_blob_hash(path.read_bytes())} {path.relative_to(corpus_dir).as_posix()}")
    return git_blob_hash("\n".join(entries).encode("utf-8"))
