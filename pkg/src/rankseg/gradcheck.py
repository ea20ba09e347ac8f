"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from rankseg.errors import ConfigError, NonFiniteError, PrecisionError, TapeError
from rankseg.optim import ParameterRegistry
from rankseg.tensor import Tape, Tensor, backward, no_tape

Fragment = Callable[[], Tensor]


@dataclass
class GradCheckReport:
    """Worst elementwise relative error per checked tensor."""

    errors: dict[str, float] = field(default_factory=dict)
    step: float = 1e-5
    tolerance: float = 1e-4

    def __len__(self) -> int:
        return len(self.errors)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _named_inputs(
    inputs: Mapping[str, Tensor] | Sequence[Tensor] | ParameterRegistry,
) -> dict[str, Tensor]:
    if isinstance(inputs, ParameterRegistry):
        return {parameter.name: parameter.tensor for parameter in inputs}
    if isinstance(inputs, Mapping):
        return dict(inputs)
    return {f"input[{index}]": tensor for index, tensor in enumerate(inputs)}


def _scalar_value(fragment: Fragment) -> float:
    with no_tape():
        value = fragment()
    result = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(result):
        raise NonFiniteError("grad_check: non-finite fragment value")
    return result


def grad_check(
    fragment: Fragment,
    inputs: Mapping[str, Tensor] | Sequence[Tensor] | ParameterRegistry,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``fragment`` with central differences.

    ``fragment`` is re-evaluated with each input element nudged by ``+step`` and
    ``-step``. Inputs the fragment never touches are left out of the report, so a
    constant fragment yields an empty report.
    """

    if step <= 0:
        raise ConfigError("grad_check step must be positive")
    named = _named_inputs(inputs)
    for name, tensor in named.items():
        if tensor.dtype != np.float64:
            raise PrecisionError(f"grad_check needs float64 inputs; {name} is {tensor.dtype.name}")

    previous_flags = {name: tensor.requires_grad for name, tensor in named.items()}
    report = GradCheckReport(step=step, tolerance=tolerance)
    try:
        for tensor in named.values():
            tensor.requires_grad = True
            tensor.grad = None

        with Tape() as tape:
            loss = fragment()
        if loss.data.size != 1:
            raise TapeError(f"grad_check fragment must return a scalar, got {list(loss.shape)}")
        if not tape.produced(loss):
            return report
        backward(loss, tape)

        for name, tensor in named.items():
            if tensor.grad is None:
                continue
            analytic = tensor.grad.copy()
            numeric = np.zeros_like(tensor.data)
            for index in range(tensor.data.size):
                original = tensor.data.flat[index]
                tensor.data.flat[index] = original + step
                upper = _scalar_value(fragment)
                tensor.data.flat[index] = original - step
                lower = _scalar_value(fragment)
                tensor.data.flat[index] = original
                numeric.flat[index] = (upper - lower) / (2.0 * step)
            relative = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
            report.errors[name] = float(np.max(relative)) if relative.size else 0.0
    finally:
        for name, tensor in named.items():
            tensor.requires_grad = previous_flags[name]
            tensor.grad = None
    return report


__all__ = ["GradCheckReport", "grad_check"]
