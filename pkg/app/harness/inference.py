"""Central batched inference against the latest published parameter snapshot."""
import asyncio
import copy
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from app.core.errors import HarnessError
from app.models.coberl import AgentState, CoBERLNetwork
from app.numerics import ParameterSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceRequest:
    actor_index: int
    observation: np.ndarray
    prev_action: int
    prev_reward: float
    state: AgentState


@dataclass(frozen=True)
class InferenceResult:
    actor_index: int
    q_values: np.ndarray
    state: AgentState
    parameter_version: int


class InferenceService:
    """
    Serves Q-values for batches of actor requests.

    Holds a private copy of the network; `publish` loads a learner snapshot
    into it. Acting is causal and never masks its inputs.
    """

    def __init__(self, network: CoBERLNetwork):
        self.network = copy.deepcopy(network)
        self.network.requires_grad_(False)
        self.snapshot: Optional[ParameterSet] = None
        self.published_at = 0
        self.batches_served = 0
        self._ready = asyncio.Event()

    @property
    def ready(self) -> bool:
        return self.snapshot is not None

    @property
    def version(self) -> int:
        return -1 if self.snapshot is None else self.snapshot.version

    def publish(self, params: ParameterSet, learner_step: int = 0) -> None:
        snapshot = params.snapshot()
        snapshot.load_into(self.network)
        self.snapshot = snapshot
        self.published_at = learner_step
        self._ready.set()
        logger.debug(f"Published parameters version {snapshot.version} at learner step {learner_step}")

    async def wait_ready(self) -> None:
        await self._ready.wait()

    def infer(self, requests: list[InferenceRequest]) -> list[InferenceResult]:
        """
        One forward pass for the whole batch.

        Raises:
            HarnessError: If nothing has been published yet, or the acting
                path touched the mask token
        """
        if not self.ready:
            raise HarnessError("No parameter snapshot has been published")
        if not requests:
            return []

        network = self.network
        obs = torch.as_tensor(np.stack([r.observation for r in requests]))
        prev_action = torch.tensor([r.prev_action for r in requests], dtype=torch.long)
        prev_reward = torch.tensor([r.prev_reward for r in requests], dtype=network.dtype)
        state = AgentState.stack([r.state for r in requests])

        uses = network.mask_token_uses
        with torch.no_grad():
            q_values, next_state = network.act(obs, prev_action, prev_reward, state)
        if network.mask_token_uses != uses:
            raise HarnessError("Acting path used the mask token")

        self.batches_served += 1
        q_np = q_values.cpu().numpy()
        return [
            InferenceResult(r.actor_index, q_np[i], next_state.select(i), self.version)
            for i, r in enumerate(requests)
        ]
