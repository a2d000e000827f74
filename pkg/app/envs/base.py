from dataclasses import dataclass
from typing import Protocol

import numpy as np


@dataclass(frozen=True)
class EnvStep:
    observation: np.ndarray
    reward: float
    terminal: bool


class Environment(Protocol):
    """Episodic environment with [H, W, C] observations in [0, 1] and discrete actions."""

    n_actions: int
    obs_shape: tuple[int, int, int]

    def reset(self) -> np.ndarray: ...

    def step(self, action: int) -> EnvStep: ...
