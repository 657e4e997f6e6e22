"""Named parameter groups and an Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mmdistill.tensor import ContractError, Tensor


@dataclass
class ParameterGroup:
    """A freezable bundle of named parameters ("visual_encoder", "projector", "llm")."""

    name: str
    parameters: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True

    def add(self, key: str, value: Tensor) -> Tensor:
        if key in self.parameters:
            raise ValueError(f"duplicate parameter name {key!r} in group {self.name!r}")
        value.requires_grad = self.trainable
        value.name = f"{self.name}/{key}"
        self.parameters[key] = value
        return value

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        for p in self.parameters.values():
            p.requires_grad = self.trainable
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters.values())

    def items(self):
        return self.parameters.items()

    def __getitem__(self, key: str) -> Tensor:
        return self.parameters[key]


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")

    @classmethod
    def for_groups(cls, groups: list[ParameterGroup], **hyper) -> "OptimizerState":
        """Fresh state with accumulators for the currently trainable groups only."""
        state = cls(**hyper)
        for group in groups:
            if not group.trainable:
                continue
            for key, p in group.items():
                state.first_moment[p.name] = np.zeros_like(p.data)
                state.second_moment[p.name] = np.zeros_like(p.data)
        return state


def zero_grad(groups: list[ParameterGroup]) -> None:
    for group in groups:
        for p in group.parameters.values():
            p.grad = None


def optimizer_step(state: OptimizerState, groups: list[ParameterGroup]) -> None:
    """One Adam update of every trainable parameter tracked by ``state``, then clear grads.

    Frozen groups are never written. A trainable parameter that has no
    accumulator (its group was frozen when the state was built) is skipped.
    """
    pending = []
    for group in groups:
        if not group.trainable:
            continue
        for key, p in group.items():
            if p.name not in state.first_moment:
                continue
            if p.grad is None:
                raise ContractError(f"parameter {p.name} has no gradient; run backward first")
            pending.append(p)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for p in pending:
        g = p.grad
        m = state.first_moment[p.name]
        v = state.second_moment[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    zero_grad(groups)
