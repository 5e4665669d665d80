from duplex.corpus.io import (
    FeatureFileError,
    corpus_content_hash,
    load_corpus,
    load_spec,
    read_features,
    read_manifest,
    write_corpus,
    write_features,
    write_manifest,
)
from duplex.corpus.splits import SPLIT_NAMES, CorpusSplits, Utterance, generate_splits, unigram_frequencies
from duplex.corpus.synth import CorpusSpec, PrototypeTable, prototype_table, synthesize_utterance
from duplex.corpus.tailset import (
    REFERENCE_SIZE,
    REFERENCE_TAU,
    EmptyTailSetError,
    TailSetConfig,
    build_tail_set,
    tail_tokens,
)
from duplex.corpus.vocabulary import BLANK_ID, TokenSequence, Vocabulary, VocabularyError
