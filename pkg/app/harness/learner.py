"""
Learner: burn-in, the two transformer passes, total loss, clipped Adam update,
target-network refresh and new replay priorities.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from app.core.config import RunConfig
from app.core.errors import HarnessError, InputError, NumericError
from app.losses.contrastive import ContrastiveTerms, contrastive_terms
from app.losses.rl import ValueTransform, peng_targets, q_lambda_loss, sequence_priorities, target_values
from app.models.coberl import AgentState, CoBERLNetwork
from app.numerics import AdamState, ParameterSet, adam_step, clip_global_norm, global_norm, gradients
from app.replay import PrioritizedSample
from app.schemas import LearnerMetrics

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnerBatch:
    """Replay samples stacked into tensors; inputs have L+1 entries, steps have L."""

    observations: torch.Tensor
    prev_actions: torch.Tensor
    prev_rewards: torch.Tensor
    input_valid: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    terminal: torch.Tensor
    valid: torch.Tensor
    initial_state: AgentState
    weights: torch.Tensor
    refs: tuple[int, ...]

    @classmethod
    def from_samples(cls, samples: list[PrioritizedSample], dtype: torch.dtype) -> "LearnerBatch":
        if not samples:
            raise InputError("Cannot build a learner batch from zero samples")
        sequences = [s.sequence for s in samples]

        def stack(name: str) -> np.ndarray:
            return np.stack([getattr(seq, name) for seq in sequences])

        return cls(
            observations=torch.as_tensor(stack("observations")).to(dtype),
            prev_actions=torch.as_tensor(stack("prev_actions")),
            prev_rewards=torch.as_tensor(stack("prev_rewards")).to(dtype),
            input_valid=torch.as_tensor(stack("input_valid")),
            actions=torch.as_tensor(stack("actions")),
            rewards=torch.as_tensor(stack("rewards")).to(dtype),
            terminal=torch.as_tensor(stack("terminal")),
            valid=torch.as_tensor(stack("valid")),
            initial_state=AgentState.stack([seq.initial_state for seq in sequences]),
            weights=torch.tensor([s.weight for s in samples], dtype=dtype),
            refs=tuple(s.ref for s in samples),
        )


@dataclass(frozen=True)
class LossTerms:
    total: torch.Tensor
    rl: torch.Tensor
    contrastive: ContrastiveTerms
    td_errors: torch.Tensor
    valid: torch.Tensor


def _burn_in(network: CoBERLNetwork, batch: LearnerBatch, burn_in: int) -> AgentState:
    state = batch.initial_state
    if burn_in == 0:
        return state
    with torch.no_grad():
        y = network.embed(
            batch.observations[:, :burn_in], batch.prev_actions[:, :burn_in], batch.prev_rewards[:, :burn_in]
        )
        return network.unroll(y, state, causal=True).state.detach()


class TrainingObjective(nn.Module):
    """
    Total training loss of one batch, as a module so that
    `torch.func.functional_call` can evaluate it at arbitrary parameters.
    """

    def __init__(self, network: CoBERLNetwork, target_network: CoBERLNetwork, config: RunConfig):
        super().__init__()
        self.network = network
        self.target_network = target_network
        self.config = config
        self.transform = ValueTransform.from_config(config.rl)

    def forward(self, batch: LearnerBatch, mask_seed: int = 0) -> LossTerms:
        config = self.config
        network = self.network
        burn_in = config.burn_in
        generator = torch.Generator().manual_seed(mask_seed)

        online_state = _burn_in(network, batch, burn_in)
        target_state = _burn_in(self.target_network, batch, burn_in)

        obs = batch.observations[:, burn_in:]
        prev_actions = batch.prev_actions[:, burn_in:]
        prev_rewards = batch.prev_rewards[:, burn_in:]
        input_valid = batch.input_valid[:, burn_in:]
        y = network.embed(obs, prev_actions, prev_rewards)

        rl_inputs = y
        zero = y.new_zeros(())
        contrastive = ContrastiveTerms(zero, zero, zero)
        if config.contrastive.enabled:
            if config.contrastive.masking:
                masked = network.mask_inputs(y, generator)
                transformer_inputs, mask_ext = masked.masked_inputs, masked.mask_ext
                if config.harness.rl_pass_masked:
                    rl_inputs = transformer_inputs
            else:
                transformer_inputs, mask_ext = y, torch.ones_like(y[..., 0])
            x_bidirectional, _ = network.transformer(
                transformer_inputs, online_state.memory, causal=False, input_valid=input_valid
            )
            contrastive = contrastive_terms(
                network.critic_embed(x_bidirectional),
                network.critic_embed(y),
                mask_ext * input_valid.to(mask_ext.dtype),
                config.contrastive.kl_weight,
                valid=input_valid,
            )

        online = network.unroll(y, online_state, causal=True, transformer_inputs=rl_inputs)
        with torch.no_grad():
            target_y = self.target_network.embed(obs, prev_actions, prev_rewards)
            target_q = self.target_network.unroll(target_y, target_state, causal=True).q_values
            bootstrap = target_values(
                target_q, self.transform, config.rl.target_policy, config.rl.target_epsilon
            )

        valid = batch.valid[:, burn_in:]
        targets = peng_targets(
            batch.rewards[:, burn_in:],
            bootstrap,
            batch.terminal[:, burn_in:],
            config.rl.trace_lambda,
            config.rl.discount,
        )
        loss_rl, td = q_lambda_loss(
            online.q_values[:, :-1], batch.actions[:, burn_in:], targets, self.transform, valid, batch.weights
        )

        weight = config.contrastive.loss_weight if config.contrastive.enabled else 0.0
        return LossTerms(
            total=loss_rl + weight * contrastive.loss,
            rl=loss_rl,
            contrastive=contrastive,
            td_errors=td,
            valid=valid,
        )


class Learner:
    """Sole writer of the online parameters."""

    def __init__(self, network: CoBERLNetwork, config: RunConfig, seed: int = 0):
        self.network = network
        self.config = config
        self.target_network = copy.deepcopy(network)
        self.target_network.requires_grad_(False)
        self.objective = TrainingObjective(network, self.target_network, config)

        self.params = ParameterSet.from_module(network)
        opt = config.optimizer
        self.optimizer = AdamState(self.params, opt.learning_rate, opt.adam_beta1, opt.adam_beta2, opt.adam_epsilon)
        self._generator = torch.Generator().manual_seed(seed)
        self.step = 0
        self.consecutive_aborts = 0
        self.total_aborts = 0

    def next_mask_seed(self) -> int:
        return int(torch.randint(2**31 - 1, (1,), generator=self._generator))

    def update_target(self) -> None:
        self.target_network.load_state_dict(self.network.state_dict())

    def target_matches_online(self) -> bool:
        target = dict(self.target_network.named_parameters())
        return all(torch.equal(t, target[name]) for name, t in self.network.named_parameters())

    def _abort(self, reason: str) -> LearnerMetrics:
        self.consecutive_aborts += 1
        self.total_aborts += 1
        logger.warning(
            f"Learner step {self.step} aborted ({reason}); "
            f"{self.consecutive_aborts} consecutive abort(s)"
        )
        if self.consecutive_aborts >= self.config.harness.max_consecutive_aborts:
            raise HarnessError(f"Learner halted after {self.consecutive_aborts} consecutive aborted steps: {reason}")
        return LearnerMetrics(
            step=self.step, loss_total=math.nan, loss_rl=math.nan, loss_contrastive=math.nan, aborted=True
        )

    def learner_step(
        self, samples: list[PrioritizedSample], mask_seed: Optional[int] = None
    ) -> tuple[Optional[np.ndarray], LearnerMetrics]:
        """
        One optimization step on a replay batch.

        Returns new priorities (None if the step was aborted) and metrics.

        Raises:
            HarnessError: After `max_consecutive_aborts` non-finite steps in a row
        """
        batch = LearnerBatch.from_samples(samples, self.network.dtype)
        seed = self.next_mask_seed() if mask_seed is None else mask_seed
        terms = self.objective(batch, seed)

        if not torch.isfinite(terms.total):
            return None, self._abort(f"non-finite loss {float(terms.total)}")
        try:
            grads = gradients(terms.total, self.params)
            norm = float(global_norm(grads))
            clipped = clip_global_norm(grads, self.config.optimizer.clip_norm)
            self.params = adam_step(self.params, clipped, self.optimizer)
        except NumericError as e:
            return None, self._abort(str(e))

        self.consecutive_aborts = 0
        self.step += 1
        target_updated = self.step % self.config.harness.target_update_period == 0
        if target_updated:
            self.update_target()
            logger.debug(f"Target network refreshed at learner step {self.step}")

        priorities = sequence_priorities(terms.td_errors, terms.valid, self.config.replay.priority_exponent)
        metrics = LearnerMetrics(
            step=self.step,
            loss_total=float(terms.total),
            loss_rl=float(terms.rl),
            loss_contrastive=float(terms.contrastive.loss),
            invariance_penalty=float(terms.contrastive.penalty),
            grad_norm=norm,
            priority_mean=float(priorities.mean()),
            target_updated=target_updated,
        )
        return priorities, metrics
