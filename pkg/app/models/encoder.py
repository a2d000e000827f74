"""Observation and previous action/reward encoders producing the per-step embedding Y_t."""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from app.core.errors import ConfigurationError, InputError
from app.numerics import init_module_


@dataclass(frozen=True)
class EncoderLayout:
    """Residual stack layout: one (blocks, inner channels, out channels) triple per group."""
    groups: tuple[tuple[int, int, int], ...]
    stride: int
    group_size: int = 8


LAYOUTS: dict[str, EncoderLayout] = {
    "desk": EncoderLayout(groups=((1, 8, 8), (1, 8, 16)), stride=1),
    "paper": EncoderLayout(groups=((2, 16, 64), (4, 32, 128), (6, 64, 256), (2, 128, 512)), stride=2),
}


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with ReLU activations."""

    def __init__(self, channels: int, inner: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, inner, kernel_size=1)
        self.conv = nn.Conv2d(inner, inner, kernel_size=3, padding=1)
        self.expand = nn.Conv2d(inner, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.reduce(F.relu(x))
        h = self.conv(F.relu(h))
        h = self.expand(F.relu(h))
        return x + h


class ResidualGroup(nn.Module):
    def __init__(self, in_channels: int, blocks: int, inner: int, out_channels: int, stride: int, group_size: int):
        super().__init__()
        if out_channels % group_size:
            raise ConfigurationError(f"{out_channels} channels cannot form groups of {group_size}")
        self.entry = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)
        self.blocks = nn.Sequential(*[Bottleneck(out_channels, inner) for _ in range(blocks)])
        self.norm = nn.GroupNorm(out_channels // group_size, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.blocks(self.entry(x)))


class ObservationEncoder(nn.Module):
    """
    Encode [..., H, W, C] observations into d_obs features.

    Presets "desk" and "paper" run a residual convolution stack followed by a
    two-layer ReLU MLP; "flat" is a single linear layer over the flattened
    observation, for symbolic toy observations.
    """

    def __init__(self, obs_shape: tuple[int, int, int], d_obs: int, preset: str = "desk", mlp_hidden: int = 64):
        super().__init__()
        if d_obs <= 0:
            raise ConfigurationError(f"Observation feature width must be positive, got {d_obs}")
        self.obs_shape = tuple(obs_shape)
        self.d_obs = d_obs
        height, width, channels = self.obs_shape

        if preset == "flat":
            self.trunk = nn.Identity()
            self.mlp = nn.Sequential(nn.Linear(height * width * channels, d_obs), nn.ReLU())
        elif preset in LAYOUTS:
            layout = LAYOUTS[preset]
            groups = []
            in_channels = channels
            for blocks, inner, out_channels in layout.groups:
                groups.append(ResidualGroup(in_channels, blocks, inner, out_channels, layout.stride, layout.group_size))
                in_channels = out_channels
                height = (height - 1) // layout.stride + 1
                width = (width - 1) // layout.stride + 1
            self.trunk = nn.Sequential(*groups, nn.ReLU())
            self.mlp = nn.Sequential(
                nn.Linear(in_channels * height * width, mlp_hidden),
                nn.ReLU(),
                nn.Linear(mlp_hidden, d_obs),
                nn.ReLU(),
            )
        else:
            raise ConfigurationError(f"Unknown encoder preset '{preset}'")
        self.preset = preset
        init_module_(self)

    @property
    def final_layer(self) -> nn.Linear:
        return [m for m in self.mlp if isinstance(m, nn.Linear)][-1]

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if tuple(obs.shape[-3:]) != self.obs_shape:
            raise ConfigurationError(f"Observation shape {tuple(obs.shape[-3:])} does not match {self.obs_shape}")
        leading = obs.shape[:-3]
        x = obs.reshape(-1, *self.obs_shape)
        if self.preset == "flat":
            x = x.flatten(1)
        else:
            x = self.trunk(x.permute(0, 3, 1, 2)).flatten(1)
        return self.mlp(x).reshape(*leading, self.d_obs)


class ActionRewardEmbedding(nn.Module):
    """Linear projection of [one_hot(previous action) ∥ previous reward]."""

    def __init__(self, n_actions: int, d_action_reward: int):
        super().__init__()
        self.n_actions = n_actions
        self.proj = nn.Linear(n_actions + 1, d_action_reward)
        init_module_(self)

    def forward(self, prev_action: torch.Tensor, prev_reward: torch.Tensor) -> torch.Tensor:
        prev_action = prev_action.long()
        if prev_action.numel() and (prev_action.min() < 0 or prev_action.max() >= self.n_actions):
            raise InputError(f"Action id out of range [0, {self.n_actions})")
        one_hot = F.one_hot(prev_action, self.n_actions).to(self.proj.weight.dtype)
        reward = prev_reward.to(self.proj.weight.dtype).unsqueeze(-1)
        return self.proj(torch.cat([one_hot, reward], dim=-1))


class InputEmbedder(nn.Module):
    """Y_t = [encode(x_t) ∥ embed(a_{t-1}, r_{t-1})], width d_model."""

    def __init__(
        self,
        obs_shape: tuple[int, int, int],
        n_actions: int,
        d_model: int,
        d_action_reward: int,
        preset: str = "desk",
        mlp_hidden: int = 64,
    ):
        super().__init__()
        self.d_model = d_model
        self.observation = ObservationEncoder(obs_shape, d_model - d_action_reward, preset, mlp_hidden)
        self.action_reward = ActionRewardEmbedding(n_actions, d_action_reward)
        if self.observation.d_obs + d_action_reward != d_model:
            raise ConfigurationError("Encoder widths do not add up to d_model")

    def encode_observation(self, obs: torch.Tensor) -> torch.Tensor:
        return self.observation(obs)

    def embed_action_reward(self, prev_action: torch.Tensor, prev_reward: torch.Tensor) -> torch.Tensor:
        return self.action_reward(prev_action, prev_reward)

    def build_input_embedding(
        self, obs: torch.Tensor, prev_action: torch.Tensor, prev_reward: torch.Tensor
    ) -> torch.Tensor:
        return torch.cat([self.encode_observation(obs), self.embed_action_reward(prev_action, prev_reward)], dim=-1)

    def forward(self, obs: torch.Tensor, prev_action: torch.Tensor, prev_reward: torch.Tensor) -> torch.Tensor:
        return self.build_input_embedding(obs, prev_action, prev_reward)
