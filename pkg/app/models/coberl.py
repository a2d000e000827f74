"""
CoBERL network: encoder -> GTrXL -> gate(Y, X) -> LSTM -> [LSTM(Z) ∥ Y] -> dueling Q head.

The same network serves acting (single-step causal unroll, no masking) and
learning (sequence unrolls, with masked inputs for the contrastive pass).
"""
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from app.core.config import RunConfig
from app.core.errors import ConfigurationError, HarnessError, InputError
from app.losses.contrastive import Critic, MaskedBatch, apply_masking
from app.models.encoder import InputEmbedder
from app.models.gates import GateParameters, GRUGate, gru_gate
from app.models.gtrxl import GTrXL, TransformerMemory
from app.numerics import init_module_, init_weight_, resolve_dtype

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentState:
    """Recurrent state carried between unrolls: LSTM (h, c) [B, d_lstm] plus transformer memory."""

    lstm_hidden: torch.Tensor
    lstm_cell: torch.Tensor
    memory: TransformerMemory

    @property
    def batch_size(self) -> int:
        return self.lstm_hidden.shape[0]

    @classmethod
    def stack(cls, states: list["AgentState"]) -> "AgentState":
        return cls(
            torch.cat([s.lstm_hidden for s in states], dim=0),
            torch.cat([s.lstm_cell for s in states], dim=0),
            TransformerMemory.stack([s.memory for s in states]),
        )

    def unstack(self) -> list["AgentState"]:
        return [self.select(i) for i in range(self.batch_size)]

    def select(self, index: int) -> "AgentState":
        return AgentState(
            self.lstm_hidden[index:index + 1],
            self.lstm_cell[index:index + 1],
            self.memory.select(index),
        )

    def detach(self) -> "AgentState":
        return AgentState(self.lstm_hidden.detach(), self.lstm_cell.detach(), self.memory.detach())

    def to_tensors(self, prefix: str = "state.") -> dict[str, torch.Tensor]:
        tensors = {f"{prefix}lstm_hidden": self.lstm_hidden, f"{prefix}lstm_cell": self.lstm_cell}
        tensors.update(self.memory.to_tensors(f"{prefix}memory."))
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor], prefix: str = "state.") -> "AgentState":
        return cls(
            tensors[f"{prefix}lstm_hidden"],
            tensors[f"{prefix}lstm_cell"],
            TransformerMemory.from_tensors(tensors, f"{prefix}memory."),
        )

    def equals(self, other: "AgentState") -> bool:
        return (
            torch.equal(self.lstm_hidden, other.lstm_hidden)
            and torch.equal(self.lstm_cell, other.lstm_cell)
            and self.memory.equals(other.memory)
        )


def combine(y: torch.Tensor, x: torch.Tensor, gate: GateParameters) -> torch.Tensor:
    """Position-wise Z_t = gate(Y_t, X_t) over [..., T, d_model] sequences."""
    if y.shape[:-1] != x.shape[:-1]:
        raise InputError(f"Sequence shapes differ: Y {tuple(y.shape)} vs X {tuple(x.shape)}")
    return gru_gate(y, x, gate)


def dueling_q(value: torch.Tensor, advantage: torch.Tensor) -> torch.Tensor:
    """Q_a = V + A_a - mean(A)."""
    return value + advantage - advantage.mean(dim=-1, keepdim=True)


class DuelingHead(nn.Module):
    def __init__(self, in_features: int, hidden: int, n_actions: int):
        super().__init__()
        self.in_features = in_features
        self.hidden = nn.Linear(in_features, hidden)
        self.value = nn.Linear(hidden, 1)
        self.advantage = nn.Linear(hidden, n_actions)
        init_module_(self)

    def forward(self, output: torch.Tensor) -> torch.Tensor:
        if output.shape[-1] != self.in_features:
            raise ConfigurationError(f"Head expects width {self.in_features}, got {output.shape[-1]}")
        h = F.relu(self.hidden(output))
        return dueling_q(self.value(h), self.advantage(h))


class CoBERLCore(nn.Module):
    """
    Gate, LSTM and skip connection between the transformer and the Q head.

    `gate` selects the combination of encoder output Y and transformer output X:
    "gru" (learned gate), "sum" (Y + X), "concat" ([Y ∥ X] into the LSTM) or
    "none" (X alone, no skip connection).
    """

    def __init__(self, d_model: int, d_lstm: int, gate: str = "gru", use_lstm: bool = True, gate_bias: float = 2.0):
        super().__init__()
        if gate not in ("gru", "sum", "concat", "none"):
            raise ConfigurationError(f"Unknown gate variant '{gate}'")
        self.d_model = d_model
        self.d_lstm = d_lstm
        self.gate_kind = gate
        self.gate = GRUGate(d_model, bias=gate_bias, zero_weights=True) if gate == "gru" else None

        lstm_input = 2 * d_model if gate == "concat" else d_model
        if use_lstm:
            self.lstm: Optional[nn.LSTMCell] = nn.LSTMCell(lstm_input, d_lstm)
            self._init_lstm()
        else:
            self.lstm = None
        recurrent_width = d_lstm if use_lstm else lstm_input
        self.output_width = recurrent_width + (0 if gate == "none" else d_model)

    def _init_lstm(self) -> None:
        init_weight_(self.lstm.weight_ih)
        init_weight_(self.lstm.weight_hh)
        with torch.no_grad():
            self.lstm.bias_ih.zero_()
            self.lstm.bias_hh.zero_()
            # gate order is input, forget, cell, output
            self.lstm.bias_ih[self.d_lstm:2 * self.d_lstm] = 1.0

    def combine(self, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if self.gate_kind == "gru":
            return combine(y, x, self.gate.params)
        if y.shape != x.shape:
            raise InputError(f"Sequence shapes differ: Y {tuple(y.shape)} vs X {tuple(x.shape)}")
        if self.gate_kind == "sum":
            return y + x
        if self.gate_kind == "concat":
            return torch.cat([y, x], dim=-1)
        return x

    def unroll_head(self, z: torch.Tensor, y: torch.Tensor, state: AgentState) -> tuple[torch.Tensor, AgentState]:
        """LSTM over [B, T, *] Z from the carried state; output_t = [LSTM(Z)_t ∥ Y_t]."""
        if state.lstm_hidden.shape[-1] != self.d_lstm or state.lstm_cell.shape[-1] != self.d_lstm:
            raise ConfigurationError(f"LSTM state width {state.lstm_hidden.shape[-1]} does not match {self.d_lstm}")
        hidden, cell = state.lstm_hidden, state.lstm_cell
        if self.lstm is None:
            recurrent = z
        else:
            outputs = []
            for t in range(z.shape[1]):
                hidden, cell = self.lstm(z[:, t], (hidden, cell))
                outputs.append(hidden)
            recurrent = torch.stack(outputs, dim=1)

        output = recurrent if self.gate_kind == "none" else torch.cat([recurrent, y], dim=-1)
        return output, AgentState(hidden, cell, state.memory)

    def forward(self, y: torch.Tensor, x: torch.Tensor, state: AgentState) -> tuple[torch.Tensor, AgentState]:
        return self.unroll_head(self.combine(y, x), y, state)


@dataclass(frozen=True)
class Unroll:
    q_values: torch.Tensor
    transformer_output: torch.Tensor
    state: AgentState


class CoBERLNetwork(nn.Module):
    """Full agent network; see module docstring for the data flow."""

    def __init__(self, config: RunConfig, n_actions: int):
        super().__init__()
        self.config = config
        self.n_actions = n_actions
        d_model = config.transformer.d_model

        self.embedder = InputEmbedder(
            config.env.obs_shape,
            n_actions,
            d_model,
            config.encoder.d_action_reward,
            config.encoder.preset,
            config.encoder.mlp_hidden,
        )
        self.transformer = GTrXL(config.transformer)
        self.core = CoBERLCore(
            d_model, config.core.d_lstm, config.core.gate, config.core.use_lstm, config.core.gate_bias
        )
        self.head = DuelingHead(self.core.output_width, config.core.head_hidden, n_actions)

        if config.contrastive.mask_token == "trainable":
            self.mask_token = nn.Parameter(init_weight_(torch.empty(d_model)))
        else:
            self.register_buffer("mask_token", torch.zeros(d_model))
        self.critic = Critic(d_model, config.contrastive.d_critic) if config.contrastive.enabled else None

        self._acting = False
        self.mask_token_uses = 0

    @property
    def dtype(self) -> torch.dtype:
        return self.head.value.weight.dtype

    @contextmanager
    def acting(self) -> Iterator[None]:
        """Within this context any use of the mask token raises HarnessError."""
        previous = self._acting
        self._acting = True
        try:
            yield
        finally:
            self._acting = previous

    def initial_state(self, batch_size: int = 1) -> AgentState:
        zeros = torch.zeros(batch_size, self.config.core.d_lstm, dtype=self.dtype)
        return AgentState(zeros, zeros.clone(), self.transformer.reset_memory(batch_size))

    def embed(self, obs: torch.Tensor, prev_action: torch.Tensor, prev_reward: torch.Tensor) -> torch.Tensor:
        return self.embedder(obs.to(self.dtype), prev_action, prev_reward)

    def mask_inputs(self, inputs: torch.Tensor, generator: Optional[torch.Generator] = None) -> MaskedBatch:
        if self._acting:
            raise HarnessError("Mask token consulted on the acting path")
        self.mask_token_uses += 1
        return apply_masking(inputs, self.config.contrastive.mask_rate, self.mask_token, generator)

    def critic_embed(self, values: torch.Tensor) -> torch.Tensor:
        if self.critic is None:
            raise ConfigurationError("Contrastive loss is disabled; network has no critic")
        return self.critic(values)

    def unroll(
        self,
        inputs: torch.Tensor,
        state: AgentState,
        causal: bool = True,
        transformer_inputs: Optional[torch.Tensor] = None,
    ) -> Unroll:
        """
        Unroll [B, T, d_model] embeddings from `state`.

        `transformer_inputs` (default: `inputs`) is what the transformer sees;
        the gate and skip connection always receive `inputs`.
        """
        if transformer_inputs is None:
            transformer_inputs = inputs
        x, memory = self.transformer(transformer_inputs, state.memory, causal)
        output, core_state = self.core(inputs, x, AgentState(state.lstm_hidden, state.lstm_cell, memory))
        return Unroll(q_values=self.head(output), transformer_output=x, state=core_state)

    def act(
        self, obs: torch.Tensor, prev_action: torch.Tensor, prev_reward: torch.Tensor, state: AgentState
    ) -> tuple[torch.Tensor, AgentState]:
        """One causal step for a batch of actors: obs [B, H, W, C] -> Q [B, n_actions]."""
        with self.acting():
            y = self.embed(obs.unsqueeze(1), prev_action.unsqueeze(1), prev_reward.unsqueeze(1))
            result = self.unroll(y, state, causal=True)
        return result.q_values.squeeze(1), result.state


def build_network(config: RunConfig, n_actions: int) -> CoBERLNetwork:
    """Construct the network in the configured precision."""
    if n_actions < 1:
        raise ConfigurationError(f"Need at least one action, got {n_actions}")
    network = CoBERLNetwork(config, n_actions).to(resolve_dtype(config.numerics.dtype))
    logger.debug(
        f"Built network: {sum(p.numel() for p in network.parameters())} parameters, "
        f"gate={config.core.gate}, layers={config.transformer.n_layers}"
    )
    return network
