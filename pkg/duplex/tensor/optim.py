import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from duplex.tensor.array import Array, NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates plus the number of applied steps."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Array],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update.

    Parameters without an entry in ``grads`` are left untouched. Parameter
    buffers are replaced, never written in place, so earlier snapshots of
    ``param.data`` stay valid.

    Raises:
        NonFiniteError: if any gradient holds NaN or Inf. No parameter is
            modified in that case.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for parameter '{name}', step rejected")
        if name in params and g.shape != params[name].shape:
            raise ValueError(f"Gradient shape {g.shape} does not match parameter '{name}' {params[name].shape}")

    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = beta1 * state.m.get(name, np.zeros_like(p.data)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p.data)) + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


class Adam:
    """
    Adam over a fixed set of named parameters with linear learning-rate warmup.

    Args:
        params (Mapping[str, Array]): Parameters to optimise, by name.
        lr (float): Peak learning rate.
        betas (tuple[float, float]): Moment decay rates.
        eps (float): Denominator stabiliser.
        warmup_steps (int): Steps over which the learning rate ramps up linearly.
    """

    def __init__(
        self,
        params: Mapping[str, Array],
        lr: float = 1e-3,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        warmup_steps: int = 0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.state = AdamState()

    def current_lr(self) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (self.state.step + 1) / self.warmup_steps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.current_lr(), self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        tensors = {f"adam.m.{name}": value for name, value in self.state.m.items()}
        tensors.update({f"adam.v.{name}": value for name, value in self.state.v.items()})
        tensors["adam.step"] = np.array([self.state.step], dtype=np.float64)
        return tensors

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.state = AdamState(step=int(np.asarray(tensors["adam.step"]).reshape(-1)[0]))
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                self.state.m[key[len("adam.m.") :]] = np.asarray(value, dtype=np.float64)
            elif key.startswith("adam.v."):
                self.state.v[key[len("adam.v.") :]] = np.asarray(value, dtype=np.float64)
