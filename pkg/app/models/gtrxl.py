"""
Gated Transformer-XL: relative-position multi-head attention over
[memory ∥ segment], layer-norm before each sublayer, and a GRU gate in
place of each residual connection.
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from app.core.config import TransformerConfig
from app.core.errors import ConfigurationError, InputError
from app.models.gates import GRUGate
from app.numerics import init_module_


@dataclass(frozen=True)
class TransformerMemory:
    """
    Per-layer cached layer inputs, oldest first.

    `layers[l]` is [B, memory_size, d_model]; `valid` is [B, memory_size] and
    marks slots that hold real history (unfilled slots are never attended).
    """

    layers: tuple[torch.Tensor, ...]
    valid: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.valid.shape[0]

    @property
    def size(self) -> int:
        return self.valid.shape[1]

    def to_tensors(self, prefix: str = "memory.") -> dict[str, torch.Tensor]:
        tensors = {f"{prefix}layer_{i}": layer for i, layer in enumerate(self.layers)}
        tensors[f"{prefix}valid"] = self.valid
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor], prefix: str = "memory.") -> "TransformerMemory":
        count = sum(1 for name in tensors if name.startswith(f"{prefix}layer_"))
        return cls(tuple(tensors[f"{prefix}layer_{i}"] for i in range(count)), tensors[f"{prefix}valid"])

    @classmethod
    def stack(cls, memories: list["TransformerMemory"]) -> "TransformerMemory":
        layers = tuple(torch.cat(group, dim=0) for group in zip(*(m.layers for m in memories)))
        return cls(layers, torch.cat([m.valid for m in memories], dim=0))

    def select(self, index: int) -> "TransformerMemory":
        return TransformerMemory(tuple(layer[index:index + 1] for layer in self.layers), self.valid[index:index + 1])

    def detach(self) -> "TransformerMemory":
        return TransformerMemory(tuple(layer.detach() for layer in self.layers), self.valid)

    def equals(self, other: "TransformerMemory") -> bool:
        return (
            len(self.layers) == len(other.layers)
            and torch.equal(self.valid, other.valid)
            and all(torch.equal(a, b) for a, b in zip(self.layers, other.layers))
        )


def reset_memory(config: TransformerConfig, batch_size: int = 1, dtype: torch.dtype | None = None) -> TransformerMemory:
    """Zero-filled memory with no valid slots."""
    dtype = dtype or torch.get_default_dtype()
    layers = tuple(
        torch.zeros(batch_size, config.memory_size, config.d_model, dtype=dtype) for _ in range(config.n_layers)
    )
    return TransformerMemory(layers, torch.zeros(batch_size, config.memory_size, dtype=torch.bool))


def relative_distances(query_len: int, memory_len: int) -> torch.Tensor:
    """[T, M+T] matrix of (query position - key position); negative entries are future keys."""
    queries = torch.arange(memory_len, memory_len + query_len).unsqueeze(1)
    keys = torch.arange(memory_len + query_len).unsqueeze(0)
    return queries - keys


def sinusoid_embedding(distances: torch.Tensor, width: int, dtype: torch.dtype) -> torch.Tensor:
    inv_freq = 1.0 / (10000 ** (torch.arange(0, width, 2, dtype=dtype) / width))
    angles = distances.to(dtype).unsqueeze(-1) * inv_freq
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class RelativeMultiHeadAttention(nn.Module):
    """Transformer-XL attention with learned per-head content and position biases."""

    def __init__(self, d_model: int, n_heads: int, d_head: int):
        super().__init__()
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_head
        self.query = nn.Linear(d_model, n_heads * d_head, bias=False)
        self.key_value = nn.Linear(d_model, 2 * n_heads * d_head, bias=False)
        self.position = nn.Linear(d_model, n_heads * d_head, bias=False)
        self.out = nn.Linear(n_heads * d_head, d_model, bias=False)
        self.content_bias = nn.Parameter(torch.zeros(n_heads, d_head))
        self.position_bias = nn.Parameter(torch.zeros(n_heads, d_head))
        self.scale = 1.0 / math.sqrt(d_head)

    def forward(
        self, queries: torch.Tensor, keys: torch.Tensor, key_valid: torch.Tensor, causal: bool
    ) -> torch.Tensor:
        batch, query_len, _ = queries.shape
        key_len = keys.shape[1]
        memory_len = key_len - query_len

        q = self.query(queries).view(batch, query_len, self.n_heads, self.d_head)
        k, v = self.key_value(keys).view(batch, key_len, 2, self.n_heads, self.d_head).unbind(dim=2)

        distances = relative_distances(query_len, memory_len)
        r = self.position(sinusoid_embedding(distances, self.d_model, queries.dtype))
        r = r.view(query_len, key_len, self.n_heads, self.d_head)

        content = torch.einsum("bthd,bkhd->bhtk", q + self.content_bias, k)
        position = torch.einsum("bthd,tkhd->bhtk", q + self.position_bias, r)
        scores = (content + position) * self.scale

        blocked = ~key_valid[:, None, None, :]
        if causal:
            blocked = blocked | (distances < 0)[None, None, :, :]
        scores = scores.masked_fill(blocked, float("-inf"))

        attention = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhtk,bkhd->bthd", attention, v).reshape(batch, query_len, self.n_heads * self.d_head)
        return self.out(out)


class GTrXLLayer(nn.Module):
    def __init__(self, config: TransformerConfig):
        super().__init__()
        self.attention_norm = nn.LayerNorm(config.d_model)
        self.attention = RelativeMultiHeadAttention(config.d_model, config.n_heads, config.d_head)
        self.attention_gate = GRUGate(config.d_model, bias=config.gate_bias)
        self.mlp_norm = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_ff),
            nn.GELU() if config.activation == "gelu" else nn.ReLU(),
            nn.Linear(config.d_ff, config.d_model),
        )
        self.mlp_gate = GRUGate(config.d_model, bias=config.gate_bias)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, key_valid: torch.Tensor, causal: bool) -> torch.Tensor:
        normed = self.attention_norm(torch.cat([memory, x], dim=1))
        attended = self.attention(normed[:, memory.shape[1]:], normed, key_valid, causal)
        y = self.attention_gate(x, F.relu(attended))
        e = self.mlp(self.mlp_norm(y))
        return self.mlp_gate(y, F.relu(e))


class GTrXL(nn.Module):
    """Stack of gated transformer-XL layers with segment-level recurrence."""

    def __init__(self, config: TransformerConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList([GTrXLLayer(config) for _ in range(config.n_layers)])
        for layer in self.layers:
            init_module_(layer.attention)
            init_module_(layer.mlp)

    def reset_memory(self, batch_size: int = 1) -> TransformerMemory:
        dtype = next(self.parameters()).dtype if self.config.n_layers else None
        return reset_memory(self.config, batch_size, dtype)

    def forward(
        self,
        inputs: torch.Tensor,
        memory: TransformerMemory,
        causal: bool = True,
        input_valid: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, TransformerMemory]:
        """
        Run [B, T, d_model] inputs (or a single [T, d_model] sequence with
        batch-1 memory) against carried memory.

        causal=True lets position t see memory and positions <= t; causal=False
        lets every position see the whole segment and memory.
        `input_valid` ([B, T] bool) marks padded inputs, which are never
        attended to and enter the new memory as invalid slots.
        Returns outputs and the memory advanced by the segment (last
        memory_size layer inputs, detached).
        """
        if inputs.dim() == 2:
            if input_valid is not None:
                input_valid = input_valid.unsqueeze(0)
            outputs, memory = self.forward(inputs.unsqueeze(0), memory, causal, input_valid)
            return outputs.squeeze(0), memory
        if inputs.shape[-1] != self.config.d_model:
            raise ConfigurationError(f"Expected input width {self.config.d_model}, got {inputs.shape[-1]}")
        if len(memory.layers) != self.config.n_layers:
            raise ConfigurationError(f"Memory has {len(memory.layers)} layers, expected {self.config.n_layers}")
        if not self.layers:
            return inputs, memory

        batch, length, _ = inputs.shape
        size = self.config.memory_size
        if input_valid is None:
            input_valid = torch.ones(batch, length, dtype=torch.bool)
        elif input_valid.shape != (batch, length):
            raise InputError(f"input_valid has shape {tuple(input_valid.shape)}, expected {(batch, length)}")
        key_valid = torch.cat([memory.valid, input_valid.bool()], dim=1)

        hidden = inputs
        new_layers = []
        for layer, cached in zip(self.layers, memory.layers):
            if size:
                new_layers.append(torch.cat([cached, hidden], dim=1)[:, -size:].detach())
            else:
                new_layers.append(cached)
            hidden = layer(hidden, cached, key_valid, causal)

        new_valid = key_valid[:, -size:] if size else memory.valid
        return hidden, TransformerMemory(tuple(new_layers), new_valid)
