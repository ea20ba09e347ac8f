"""Named parameter registries and the Adam update with per-group learning rates."""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from rankseg.errors import ConfigError, GradientError
from rankseg.tensor import Tensor

logger = logging.getLogger(__name__)


class ParameterGroup(str, Enum):
    BACKBONE = "backbone"
    ML_HEAD = "ml_head"
    SEG_HEAD = "seg_head"


@dataclass(frozen=True, slots=True)
class Parameter:
    name: str
    tensor: Tensor
    group: ParameterGroup

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


@dataclass(slots=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray


@dataclass
class ParameterRegistry:
    """Ordered, uniquely named collection of trainable tensors."""

    parameters: dict[str, Parameter] = field(default_factory=dict)
    adam_states: dict[str, AdamState] = field(default_factory=dict)
    step_count: int = 0

    def register(self, name: str, data: np.ndarray, group: ParameterGroup) -> Tensor:
        if name in self.parameters:
            raise ConfigError(f"Parameter {name!r} is already registered")
        tensor = Tensor(data, requires_grad=True)
        self.parameters[name] = Parameter(name=name, tensor=tensor, group=ParameterGroup(group))
        return tensor

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.parameters.values())

    def __len__(self) -> int:
        return len(self.parameters)

    def __contains__(self, name: object) -> bool:
        return name in self.parameters

    def __getitem__(self, name: str) -> Parameter:
        return self.parameters[name]

    def zero_grad(self) -> None:
        for parameter in self:
            parameter.tensor.zero_grad()

    def count(self, group: ParameterGroup | None = None) -> int:
        return sum(
            parameter.data.size for parameter in self if group is None or parameter.group is group
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: parameter.data.copy() for name, parameter in self.parameters.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = sorted(set(self.parameters) - set(arrays))
        if missing:
            raise ConfigError(f"Missing parameter arrays: {', '.join(missing)}")
        for name, parameter in self.parameters.items():
            source = np.asarray(arrays[name])
            if source.shape != parameter.data.shape:
                raise ConfigError(
                    f"Parameter {name!r} has shape {list(source.shape)}, "
                    f"expected {list(parameter.data.shape)}"
                )
            parameter.data[...] = source


def adam_step(
    registry: ParameterRegistry,
    base_lr: float,
    group_lr_multipliers: Mapping[ParameterGroup, float] | None = None,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    skip_missing: bool = False,
) -> None:
    """Apply one Adam update to every registered parameter, then clear gradients.

    Parameters without a gradient raise GradientError unless ``skip_missing`` is set,
    in which case they keep their value and moments for this step.
    """

    multipliers = dict(group_lr_multipliers or {})
    if base_lr <= 0 or any(value <= 0 for value in multipliers.values()):
        raise ConfigError("Learning rate and group multipliers must be positive")
    missing = [parameter.name for parameter in registry if parameter.grad is None]
    if missing and not skip_missing:
        raise GradientError(f"Missing gradients for: {', '.join(missing)}")

    beta1, beta2 = betas
    registry.step_count += 1
    step = registry.step_count
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step

    for parameter in registry:
        grad = parameter.grad
        if grad is None:
            continue
        state = registry.adam_states.get(parameter.name)
        if state is None:
            state = AdamState(np.zeros_like(parameter.data), np.zeros_like(parameter.data))
            registry.adam_states[parameter.name] = state
        state.first_moment = beta1 * state.first_moment + (1.0 - beta1) * grad
        state.second_moment = beta2 * state.second_moment + (1.0 - beta2) * grad * grad
        lr = base_lr * multipliers.get(parameter.group, 1.0)
        m_hat = state.first_moment / correction1
        v_hat = state.second_moment / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        parameter.data[...] = parameter.data - update.astype(parameter.data.dtype, copy=False)

    registry.zero_grad()


__all__ = ["AdamState", "Parameter", "ParameterGroup", "ParameterRegistry", "adam_step"]
