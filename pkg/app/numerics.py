"""
Tensor plumbing shared by every model and loss: precision modes, weight
initialization, named parameter sets, Adam, global-norm clipping and a
finite-difference gradient checker.
"""
import logging
import math
from collections.abc import Callable, Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from types import MappingProxyType

import torch
from torch import nn

from app.core.errors import ConfigurationError, HarnessError, NumericError
from app.schemas import GradCheckEntry, GradCheckReport

logger = logging.getLogger(__name__)

Grads = Mapping[str, torch.Tensor]

DTYPES: dict[str, torch.dtype] = {
    "float32": torch.float32,
    "float64": torch.float64,
}


def resolve_dtype(name: str) -> torch.dtype:
    if name not in DTYPES:
        raise ConfigurationError(f"Unsupported dtype '{name}' (expected one of {sorted(DTYPES)})")
    return DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[torch.dtype]:
    """Temporarily switch torch's default floating dtype ("float64" is test mode)."""
    dtype = resolve_dtype(name)
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(previous)


def init_weight_(weight: torch.Tensor) -> torch.Tensor:
    """Truncated normal scaled by 1/sqrt(fan_in), cut at two standard deviations."""
    fan_in = weight[0].numel() if weight.dim() > 1 else weight.numel()
    std = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        return nn.init.trunc_normal_(weight, mean=0.0, std=std, a=-2 * std, b=2 * std)


def init_module_(module: nn.Module) -> None:
    """Apply the default initialization to every Linear / Conv2d child."""
    for child in module.modules():
        if isinstance(child, (nn.Linear, nn.Conv2d)):
            init_weight_(child.weight)
            if child.bias is not None:
                nn.init.zeros_(child.bias)


@dataclass(frozen=True)
class ParameterSet:
    """
    Named parameters plus a monotone version counter.

    A *live* set references the learner's trainable tensors; `snapshot()`
    publishes an immutable detached copy that any number of workers may read.
    """

    tensors: Mapping[str, torch.Tensor]
    version: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", MappingProxyType(dict(self.tensors)))

    @classmethod
    def from_module(cls, module: nn.Module, version: int = 0) -> "ParameterSet":
        return cls(dict(module.named_parameters()), version)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def snapshot(self) -> "ParameterSet":
        return ParameterSet({name: t.detach().clone() for name, t in self.tensors.items()}, self.version)

    def bumped(self) -> "ParameterSet":
        return ParameterSet(self.tensors, self.version + 1)

    def load_into(self, module: nn.Module) -> None:
        """Copy values into a module with matching parameter names."""
        own = dict(module.named_parameters())
        if set(own) != set(self.tensors):
            missing = sorted(set(own) ^ set(self.tensors))
            raise ConfigurationError(f"Parameter names do not match module: {missing[:5]}")
        with torch.no_grad():
            for name, tensor in self.tensors.items():
                own[name].copy_(tensor)

    def equals(self, other: "ParameterSet") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            torch.equal(t, other.tensors[n]) for n, t in self.tensors.items()
        )


@dataclass
class AdamState:
    """
    Adam moments and hyperparameters for one live ParameterSet.

    The update itself is torch.optim.Adam bound to the live tensors; this
    wrapper adds the name-keyed validation and version accounting.
    """

    params: ParameterSet
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    optimizer: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.optimizer = torch.optim.Adam(
            list(self.params.tensors.values()),
            lr=self.lr,
            betas=(self.beta1, self.beta2),
            eps=self.epsilon,
            foreach=False,
        )

    @property
    def step(self) -> int:
        for tensor in self.params.tensors.values():
            state = self.optimizer.state.get(tensor)
            if state and "step" in state:
                return int(state["step"])
        return 0

    def moments(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """First and second moment tensors for a parameter (zeros before the first step)."""
        tensor = self.params.tensors[name]
        state = self.optimizer.state.get(tensor) or {}
        if "exp_avg" not in state:
            return torch.zeros_like(tensor), torch.zeros_like(tensor)
        return state["exp_avg"], state["exp_avg_sq"]


def _check_grads(params: ParameterSet, grads: Grads) -> None:
    missing = set(params.tensors) - set(grads)
    extra = set(grads) - set(params.tensors)
    if missing or extra:
        raise ConfigurationError(
            f"Gradient keys do not match parameters (missing={sorted(missing)[:5]}, extra={sorted(extra)[:5]})"
        )
    for name, grad in grads.items():
        if grad.shape != params.tensors[name].shape:
            raise ConfigurationError(f"Gradient for '{name}' has shape {tuple(grad.shape)}")
        if not torch.isfinite(grad).all():
            raise NumericError(f"Non-finite gradient for parameter '{name}'")


def adam_step(params: ParameterSet, grads: Grads, state: AdamState) -> ParameterSet:
    """
    Apply one bias-corrected Adam update in place and bump the version.

    Raises:
        ConfigurationError: If gradient keys or shapes differ from the parameters
        NumericError: If any gradient holds a NaN or infinity
    """
    if state.params.tensors.keys() != params.tensors.keys():
        raise ConfigurationError("Adam state was built for a different parameter set")
    _check_grads(params, grads)

    for name, tensor in params.tensors.items():
        tensor.grad = grads[name].detach().to(tensor.dtype).clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)

    return params.bumped()


def global_norm(grads: Grads) -> torch.Tensor:
    if not grads:
        return torch.tensor(0.0)
    return torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads.values()]))


def clip_global_norm(grads: Grads, max_norm: float) -> dict[str, torch.Tensor]:
    """Scale every gradient by max_norm/g when the global L2 norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    norm = float(global_norm(grads))
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def gradients(loss: torch.Tensor, params: ParameterSet) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss; unused parameters get zeros."""
    names = params.names
    tensors = [params.tensors[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        name: torch.zeros_like(t) if g is None else g
        for name, t, g in zip(names, tensors, grads)
    }


def grad_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: ParameterSet,
    tol: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central finite differences.

    Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    `max_entries` limits each parameter to a seeded random subset of entries.

    Raises:
        HarnessError: If two evaluations of loss_fn at the same point differ
    """
    leaves = {name: t.detach().clone().requires_grad_(True) for name, t in params.tensors.items()}

    loss = loss_fn(leaves)
    repeat = loss_fn(leaves)
    if not torch.equal(loss.detach(), repeat.detach()):
        raise HarnessError("loss_fn is not deterministic: repeated evaluation differs")

    analytic = gradients(loss, ParameterSet(leaves))
    generator = torch.Generator().manual_seed(seed)
    entries: list[GradCheckEntry] = []

    with torch.no_grad():
        for name, leaf in leaves.items():
            flat = leaf.view(-1)
            indices = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                indices = torch.randperm(flat.numel(), generator=generator)[:max_entries]

            grad_flat = analytic[name].reshape(-1)
            worst = 0.0
            for index in indices.tolist():
                original = flat[index].item()
                flat[index] = original + step
                plus = loss_fn(leaves).item()
                flat[index] = original - step
                minus = loss_fn(leaves).item()
                flat[index] = original

                numeric = (plus - minus) / (2 * step)
                exact = grad_flat[index].item()
                denom = max(abs(exact), abs(numeric), floor)
                worst = max(worst, abs(exact - numeric) / denom)

            entries.append(GradCheckEntry(name=name, max_relative_error=worst, checked=len(indices)))

    report = GradCheckReport(entries=entries, tolerance=tol)
    if not report.passed:
        logger.warning(f"Gradient check failed: worst={report.worst.name} error={report.worst.max_relative_error:.3e}")
    return report
