"""
Experiment configuration files.

A YAML file with the sections below; each section maps onto the dataclass of
the module that consumes it. Missing keys keep their defaults, unknown keys
are rejected.

    seed: 0
    seeds: [0, 1, 2]
    corpus: {...}    # duplex.corpus.CorpusSpec
    model: {...}     # duplex.models.ModelConfig, including `frontend`
    train: {...}     # duplex.duallearn.TrainConfig, including `weights`
    lm: {...}        # duplex.duallearn.LMTrainConfig, including `model`
    fusion: {...}    # duplex.decode.FusionConfig
    tail: {...}      # duplex.corpus.TailSetConfig
    sweep: {...}     # duplex.evalkit.SweepConfig
"""

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from duplex.corpus.synth import CorpusSpec
from duplex.corpus.tailset import TailSetConfig
from duplex.decode import FusionConfig
from duplex.duallearn.schedule import TrainConfig
from duplex.duallearn.trainer import LMTrainConfig
from duplex.evalkit.evaluate import SweepConfig
from duplex.models.config import ModelConfig
from duplex.utils import load_yaml, resolve_seed

log = logging.getLogger(__name__)


class ConfigError(UserWarning):
    """Raised for unknown keys or invalid values in a configuration file."""

    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LMTrainConfig = field(default_factory=LMTrainConfig)
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(alpha=0.2, beta=0.1, beam_size=8))
    tail: TailSetConfig = field(default_factory=TailSetConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        """Plain nested dict (tuples as lists), as written to ``config.yml``."""
        return json.loads(json.dumps(dataclasses.asdict(self)))


def build_dataclass(cls, values: Optional[dict], section: str):
    """Instantiate ``cls`` from a mapping, recursing into nested dataclass fields."""
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{section}' must be a mapping, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{section}': {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in values.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint):
            value = build_dataclass(hint, value, f"{section}.{name}" if section else name)
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in section '{section or 'top level'}': {e}")


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Read an experiment file; without a path the defaults are used.

    The ``DUPLEX_SEED`` environment variable overrides ``seed``.
    """
    content = load_yaml(path) if path is not None else {}
    cfg = build_dataclass(ExperimentConfig, content, "")
    cfg.seed = resolve_seed(cfg.seed)
    if path is not None:
        log.debug(f"Loaded configuration from [magenta]'{path}'")
    return cfg
