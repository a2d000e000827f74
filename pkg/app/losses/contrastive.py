"""
Masked-input construction and the contrastive auxiliary loss.

The transformer sees inputs where a fixed share of timesteps is replaced by a
mask token and must produce, at each masked position, an output whose critic
embedding identifies the original input among every other position in the
batch. A stop-gradient KL penalty keeps the similarity distributions computed
from outputs and from inputs consistent with each other.
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from app.core.errors import ConfigurationError, InputError
from app.numerics import init_weight_

LARGE_NUM = 1e9
NORM_TOLERANCE = 1e-3


@dataclass(frozen=True)
class MaskPlan:
    masked_indices: tuple[tuple[int, ...], ...]
    mask_rate: float


@dataclass(frozen=True)
class MaskedBatch:
    masked_inputs: torch.Tensor
    targets: torch.Tensor
    mask_ext: torch.Tensor
    plan: MaskPlan


@dataclass(frozen=True)
class ContrastiveTerms:
    """Loss breakdown; `loss` is what training minimizes."""

    loss: torch.Tensor
    info_nce: torch.Tensor
    penalty: torch.Tensor


def mask_count(rate: float, length: int) -> int:
    """ceil(rate * length), robust to float noise such as 0.15 * 80 = 12.000000000000002."""
    if not 0 < rate <= 1:
        raise ConfigurationError(f"Mask rate must lie in (0, 1], got {rate}")
    return math.ceil(round(rate * length, 9))


def plan_masks(batch_size: int, length: int, rate: float, generator: Optional[torch.Generator] = None) -> MaskPlan:
    count = mask_count(rate, length)
    rows = tuple(
        tuple(sorted(torch.randperm(length, generator=generator)[:count].tolist())) for _ in range(batch_size)
    )
    return MaskPlan(rows, rate)


def apply_masking(
    inputs: torch.Tensor,
    rate: float,
    mask_token: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> MaskedBatch:
    """
    Replace ceil(rate*T) positions per sequence of [B, T, d] inputs by the mask token.

    Positions are drawn uniformly without replacement. Gradients flow into
    `mask_token` through the replaced positions.
    """
    if inputs.dim() != 3 or inputs.shape[1] < 1:
        raise InputError(f"Expected [B, T, d] inputs with T >= 1, got {tuple(inputs.shape)}")
    batch, length, width = inputs.shape
    if mask_token.shape[-1] != width:
        raise ConfigurationError(f"Mask token width {mask_token.shape[-1]} does not match inputs ({width})")

    plan = plan_masks(batch, length, rate, generator)
    mask_ext = torch.zeros(batch, length, dtype=inputs.dtype)
    for row, indices in enumerate(plan.masked_indices):
        mask_ext[row, list(indices)] = 1.0

    masked = torch.where(mask_ext.bool().unsqueeze(-1), mask_token.to(inputs.dtype).expand_as(inputs), inputs)
    return MaskedBatch(masked_inputs=masked, targets=inputs, mask_ext=mask_ext, plan=plan)


def critic_embed(values: torch.Tensor, critic: nn.Linear) -> torch.Tensor:
    """Single linear layer followed by L2 normalization of the last axis."""
    return F.normalize(critic(values), p=2.0, dim=-1, eps=1e-12)


class Critic(nn.Module):
    """Critic g(.) mapping d_model embeddings onto the unit sphere in d_critic dimensions."""

    def __init__(self, d_model: int, d_critic: int):
        super().__init__()
        self.proj = nn.Linear(d_model, d_critic, bias=False)
        init_weight_(self.proj.weight)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return critic_embed(values, self.proj)


def kl_with_logits(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(p) || softmax(q)) over the last axis."""
    if p_logits.shape != q_logits.shape:
        raise InputError(f"Logit shapes differ: {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}")
    p_log = F.log_softmax(p_logits, dim=-1)
    return (p_log.exp() * (p_log - F.log_softmax(q_logits, dim=-1))).sum(dim=-1)


def _check_inputs(x_out: torch.Tensor, y_in: torch.Tensor, mask_ext: torch.Tensor) -> None:
    if x_out.dim() != 3 or x_out.shape != y_in.shape:
        raise InputError(f"Expected matching [B, T, d] embeddings, got {tuple(x_out.shape)} and {tuple(y_in.shape)}")
    if mask_ext.shape != x_out.shape[:2]:
        raise InputError(f"mask_ext shape {tuple(mask_ext.shape)} does not match {tuple(x_out.shape[:2])}")
    with torch.no_grad():
        for name, values in (("x_out", x_out), ("y_in", y_in)):
            norms = torch.linalg.vector_norm(values, dim=-1)
            if (norms - 1).abs().max() > NORM_TOLERANCE:
                raise InputError(f"{name} rows must be L2-normalized (max deviation {(norms - 1).abs().max():.3e})")


def contrastive_terms(
    x_out: torch.Tensor,
    y_in: torch.Tensor,
    mask_ext: torch.Tensor,
    kl_weight: float = 1.0,
    valid: Optional[torch.Tensor] = None,
) -> ContrastiveTerms:
    """
    Contrastive loss over all B*T flattened positions, or only the positions
    flagged by `valid` ([B, T]) when given. Padded positions then take no part
    as anchors, positives or negatives.

    Each masked output position must pick its own input out of every input
    and every other output in the batch (InfoNCE in both directions); the
    invariance penalty compares the four unmasked similarity matrices with a
    stop-gradient on the reference side of each KL term.
    """
    _check_inputs(x_out, y_in, mask_ext)
    width = x_out.shape[-1]
    input1 = x_out.reshape(-1, width)
    input2 = y_in.reshape(-1, width)
    weights = mask_ext.reshape(-1).to(input1.dtype)
    if valid is not None:
        if valid.shape != mask_ext.shape:
            raise InputError(f"valid shape {tuple(valid.shape)} does not match {tuple(mask_ext.shape)}")
        keep = valid.reshape(-1).bool()
        input1, input2, weights = input1[keep], input2[keep], weights[keep]
    n = input1.shape[0]

    logits_11 = input1 @ input1.T
    logits_22 = input2 @ input2.T
    logits_12 = input1 @ input2.T
    logits_21 = input2 @ input1.T

    penalty = (
        kl_with_logits(logits_11.detach(), logits_22)
        + kl_with_logits(logits_12.detach(), logits_22)
        + kl_with_logits(logits_21.detach(), logits_11)
        + kl_with_logits(logits_12.detach(), logits_21)
    ) / 4

    diagonal = torch.eye(n, dtype=input1.dtype) * LARGE_NUM
    logits_11 = logits_11 - diagonal
    logits_22 = logits_22 - diagonal

    labels = torch.arange(n)
    loss_12 = F.cross_entropy(torch.cat([logits_12, logits_11], dim=1), labels, reduction="none")
    loss_21 = F.cross_entropy(torch.cat([logits_21, logits_22], dim=1), labels, reduction="none")

    info_nce = ((loss_12 + loss_21) * weights).mean()
    weighted_penalty = (penalty * weights).mean()
    return ContrastiveTerms(
        loss=info_nce + kl_weight * weighted_penalty,
        info_nce=info_nce,
        penalty=weighted_penalty,
    )


def compute_aux_loss(
    x_out: torch.Tensor,
    y_in: torch.Tensor,
    mask_ext: torch.Tensor,
    kl_weight: float = 1.0,
    valid: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Scalar contrastive loss for critic-embedded transformer outputs `x_out` and
    critic-embedded encoder targets `y_in`, both [B, T, d_critic].

    Raises:
        InputError: On shape mismatch or rows that are not unit-norm
    """
    return contrastive_terms(x_out, y_in, mask_ext, kl_weight, valid).loss
