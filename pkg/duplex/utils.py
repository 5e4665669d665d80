import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

import git
import numpy as np
import yaml

import duplex

log = logging.getLogger(__name__)

duplex_logo = [
    r"[green]                                   ",
    r"[blue]        __               __        ",
    r"[blue]    ___/ /_ _____  ___  / /____ __ ",
    r"[blue]   / _  / // / _ \/ _ \/ / -_) \ / ",
    r"[blue]   \_,_/\_,_/ .__/_//_/_/\__/_\_\  ",
    r"[blue]           /_/                      ",
    r"[green]                                   ",
]

SEED_ENV_VAR = "DUPLEX_SEED"


def git_blob_hash(data: bytes) -> str:
    """SHA-1 of ``data`` framed as a git blob object."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_yaml(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise LookupError(f"Configuration file '{path}' not found")
    with open(path) as fh:
        content = yaml.safe_load(fh)
    return content or {}


def dump_yaml(path: Union[str, Path], content: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(content, fh, sort_keys=False)
    return path


def resolve_seed(configured: int) -> int:
    """The configured seed, unless ``DUPLEX_SEED`` is set."""
    override = os.environ.get(SEED_ENV_VAR)
    if override is None:
        return configured
    try:
        seed = int(override)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got '{override}'")
    log.info(f"Seed overridden by {SEED_ENV_VAR}: {seed}")
    return seed


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """An independent generator for one named stream of a seeded run."""
    return np.random.default_rng([seed, *stream])


def code_revision() -> Optional[str]:
    """Commit hash of the checkout the package runs from, if any."""
    try:
        repo = git.Repo(Path(duplex.__file__).parent, search_parent_directories=True)
        revision = repo.head.commit.hexsha
        if repo.is_dirty():
            revision += "-dirty"
        return revision
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError) as e:
        log.debug(f"No code revision available: {e}")
        return None


def write_run_manifest(run_dir: Union[str, Path], config: dict, **fields) -> Path:
    """
    Write ``config.yml`` and ``manifest.json`` into a run directory.

    ``fields`` (seed, mode, corpus hash, ...) are stored as given next to the
    configuration hash, package version and code revision.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_yaml(run_dir / "config.yml", config)
    manifest = {
        "config_hash": config_hash(config),
        "duplex_version": duplex.__version__,
        "code_revision": code_revision(),
    }
    manifest.update(fields)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.debug(f"Run manifest written to [magenta]'{path}'")
    return path
