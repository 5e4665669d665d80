"""Parameter containers."""

import logging
from typing import Iterator, Mapping

import numpy as np

from duplex.tensor.array import Array

log = logging.getLogger(__name__)


class Module:
    """Base class for anything that owns parameters.

    Parameters are discovered from instance attributes: ``Array`` leaves that
    require gradients, nested ``Module`` objects and lists of modules. Names
    are dotted attribute paths, e.g. ``blocks.0.attn.query.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for name, value in vars(self).items():
            if isinstance(value, Array):
                if value.requires_grad:
                    yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Array]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Copies of all parameter values, safe to share with readers."""
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True) -> list[str]:
        """Load values whose names start with ``prefix``.

        Returns the names that were loaded. With ``strict``, a missing or
        mis-shaped parameter raises a LookupError.
        """
        loaded = []
        for name, p in self.named_parameters(prefix):
            if name not in state:
                if strict:
                    raise LookupError(f"Parameter '{name}' missing from state")
                continue
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.data.shape:
                raise LookupError(f"Parameter '{name}' has shape {p.data.shape}, state has {value.shape}")
            p.data = value.copy()
            loaded.append(name)
        log.debug(f"Loaded {len(loaded)} parameters with prefix '{prefix}'")
        return loaded
