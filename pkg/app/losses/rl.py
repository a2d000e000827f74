"""Value transform, Peng's Q(lambda) targets, TD loss and sequence priorities."""
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import torch

from app.core.config import RLConfig
from app.core.errors import ConfigurationError, InputError


@dataclass(frozen=True)
class ValueTransform:
    kind: Literal["signed_sqrt", "identity"] = "signed_sqrt"
    epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in ("signed_sqrt", "identity"):
            raise ConfigurationError(f"Unknown value transform '{self.kind}'")
        if self.kind == "signed_sqrt" and self.epsilon <= 0:
            raise ConfigurationError("signed_sqrt transform needs epsilon > 0")

    @classmethod
    def from_config(cls, config: RLConfig) -> "ValueTransform":
        return cls(config.value_transform, config.transform_epsilon)


def transform(value, t: ValueTransform):
    """h(x) = sign(x)(sqrt(|x|+1) - 1) + eps*x; accepts floats or tensors."""
    if t.kind == "identity":
        return value
    if isinstance(value, torch.Tensor):
        return torch.sign(value) * (torch.sqrt(value.abs() + 1) - 1) + t.epsilon * value
    return float(transform(torch.tensor(value, dtype=torch.float64), t))


def inverse_transform(value, t: ValueTransform):
    """Analytic inverse of `transform`."""
    if t.kind == "identity":
        return value
    if isinstance(value, torch.Tensor):
        eps = t.epsilon
        root = (torch.sqrt(1 + 4 * eps * (value.abs() + 1 + eps)) - 1) / (2 * eps)
        return torch.sign(value) * (root.square() - 1)
    return float(inverse_transform(torch.tensor(value, dtype=torch.float64), t))


def peng_targets(
    rewards: torch.Tensor,
    target_q_max: torch.Tensor,
    terminal: torch.Tensor,
    trace_lambda: float,
    discount: float,
) -> torch.Tensor:
    """
    Raw-space Peng's Q(lambda) targets by backward recursion over the last axis.

    G_T = target_q_max[T]
    G_t = r_t + discount * (1 - terminal_t) * ((1 - lambda) * target_q_max[t+1] + lambda * G_{t+1})

    Shapes: rewards/terminal [..., T], target_q_max [..., T+1].
    """
    if rewards.shape != terminal.shape or target_q_max.shape[-1] != rewards.shape[-1] + 1:
        raise InputError(
            f"Length mismatch: rewards {tuple(rewards.shape)}, terminal {tuple(terminal.shape)}, "
            f"target_q_max {tuple(target_q_max.shape)}"
        )
    if not 0 <= trace_lambda <= 1 or not 0 <= discount <= 1:
        raise ConfigurationError(f"lambda and discount must lie in [0, 1], got {trace_lambda}, {discount}")

    continuation = discount * (1 - terminal.to(rewards.dtype))
    targets = []
    running = target_q_max[..., -1]
    for t in reversed(range(rewards.shape[-1])):
        mixed = (1 - trace_lambda) * target_q_max[..., t + 1] + trace_lambda * running
        running = rewards[..., t] + continuation[..., t] * mixed
        targets.append(running)
    return torch.stack(targets[::-1], dim=-1)


def target_values(target_q: torch.Tensor, t: ValueTransform, policy: str = "max", epsilon: float = 0.01) -> torch.Tensor:
    """
    Raw-space bootstrap values from target-network Q-values [..., n_actions].

    "max" takes the greedy value; "eps_greedy" takes the epsilon-greedy
    expectation (1 - eps) * max + eps * mean.
    """
    raw = inverse_transform(target_q, t)
    greedy = raw.max(dim=-1).values
    if policy == "max":
        return greedy
    if policy == "eps_greedy":
        return (1 - epsilon) * greedy + epsilon * raw.mean(dim=-1)
    raise ConfigurationError(f"Unknown target policy '{policy}'")


def q_lambda_loss(
    online_q: torch.Tensor,
    actions: torch.Tensor,
    targets_raw: torch.Tensor,
    t: ValueTransform,
    valid: Optional[torch.Tensor] = None,
    weights: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Returns (loss, td_errors).

    online_q is [B, T, n_actions] in transformed space; td_errors are
    transform(G_t) - Q(x_t, a_t), zero at invalid steps. The loss is the mean
    of 0.5 * td^2 over each sequence's valid steps, scaled by the sequence's
    importance weight and averaged over the batch.
    """
    if online_q.shape[:-1] != actions.shape or actions.shape != targets_raw.shape:
        raise InputError(
            f"Shape mismatch: q {tuple(online_q.shape)}, actions {tuple(actions.shape)}, "
            f"targets {tuple(targets_raw.shape)}"
        )
    if valid is None:
        valid = torch.ones_like(targets_raw, dtype=torch.bool)
    mask = valid.to(online_q.dtype)

    taken = online_q.gather(-1, actions.long().unsqueeze(-1)).squeeze(-1)
    td = (transform(targets_raw.detach(), t) - taken) * mask

    counts = mask.sum(dim=-1).clamp(min=1)
    per_sequence = (0.5 * td.square()).sum(dim=-1) / counts
    if weights is not None:
        per_sequence = per_sequence * weights.to(per_sequence.dtype)
    return per_sequence.mean(), td


def priority_from_tds(tds: Sequence[float] | np.ndarray | torch.Tensor, eta: float) -> float:
    """eta * max|td| + (1 - eta) * mean|td| for one sequence."""
    values = np.abs(np.asarray(tds.detach().cpu() if isinstance(tds, torch.Tensor) else tds, dtype=np.float64))
    if values.size == 0:
        raise InputError("Cannot compute a priority from an empty TD sequence")
    return float(eta * values.max() + (1 - eta) * values.mean())


def sequence_priorities(td: torch.Tensor, valid: torch.Tensor, eta: float) -> np.ndarray:
    """Per-row priorities of [B, T] TD errors over each row's valid steps."""
    td_np = td.detach().cpu().numpy()
    valid_np = valid.detach().cpu().numpy().astype(bool)
    return np.array([priority_from_tds(row[mask], eta) for row, mask in zip(td_np, valid_np)])
