"""GRU-type gate g(y, x) used inside the transformer and between transformer and LSTM."""
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from app.core.errors import ConfigurationError
from app.numerics import init_weight_


class GateParameters(NamedTuple):
    W_z: torch.Tensor
    U_z: torch.Tensor
    W_g: torch.Tensor
    U_g: torch.Tensor
    W_r: torch.Tensor
    U_r: torch.Tensor
    b_g: torch.Tensor


def gru_gate(y: torch.Tensor, x: torch.Tensor, params: GateParameters) -> torch.Tensor:
    """
    g(y, x) = (1 - z) * y + z * h

    with z = sigmoid(W_z x + U_z y - b_g), r = sigmoid(W_r x + U_r y) and
    h = tanh(W_g x + U_g (r * y)). Here y is the residual/encoder stream and x
    the transformer (sublayer) output.
    """
    width = params.b_g.shape[-1]
    if y.shape[-1] != width or x.shape[-1] != width:
        raise ConfigurationError(f"Gate inputs must have width {width}, got {y.shape[-1]} and {x.shape[-1]}")
    z = torch.sigmoid(F.linear(x, params.W_z) + F.linear(y, params.U_z) - params.b_g)
    r = torch.sigmoid(F.linear(x, params.W_r) + F.linear(y, params.U_r))
    h = torch.tanh(F.linear(x, params.W_g) + F.linear(r * y, params.U_g))
    return (1 - z) * y + z * h


class GRUGate(nn.Module):
    """Trainable gate; `zero_weights` starts every matrix at zero so g(y, x) = (1 - sigmoid(-b_g)) * y."""

    def __init__(self, width: int, bias: float = 2.0, zero_weights: bool = False):
        super().__init__()
        self.W_z = nn.Parameter(torch.empty(width, width))
        self.U_z = nn.Parameter(torch.empty(width, width))
        self.W_g = nn.Parameter(torch.empty(width, width))
        self.U_g = nn.Parameter(torch.empty(width, width))
        self.W_r = nn.Parameter(torch.empty(width, width))
        self.U_r = nn.Parameter(torch.empty(width, width))
        self.b_g = nn.Parameter(torch.full((width,), float(bias)))
        for weight in self.matrices():
            if zero_weights:
                nn.init.zeros_(weight)
            else:
                init_weight_(weight)

    def matrices(self) -> list[nn.Parameter]:
        return [self.W_z, self.U_z, self.W_g, self.U_g, self.W_r, self.U_r]

    @property
    def params(self) -> GateParameters:
        return GateParameters(self.W_z, self.U_z, self.W_g, self.U_g, self.W_r, self.U_r, self.b_g)

    def forward(self, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return gru_gate(y, x, self.params)
