"""
Cue recall: remember what was shown at the first step of the episode.

At t=0 one of K cues is drawn as a block of ones in channel 0; steps
1..H-2 show distractor noise only; at t=H-1 channel 1 lights up as the query
and the action matching the cue earns +1, any other action -1.
"""
import numpy as np

from app.core.errors import ConfigurationError, InputError
from app.envs.base import EnvStep

CUE_CHANNEL = 0
QUERY_CHANNEL = 1
NOISE_CHANNEL = 2


class CueRecallEnv:
    def __init__(
        self,
        horizon: int = 12,
        n_cues: int = 4,
        noise: float = 1.0,
        seed: int = 0,
        obs_shape: tuple[int, int, int] = (5, 5, 3),
    ):
        height, width, channels = obs_shape
        if horizon < 3:
            raise ConfigurationError(f"horizon must be at least 3, got {horizon}")
        if n_cues < 2:
            raise ConfigurationError(f"n_cues must be at least 2, got {n_cues}")
        if not 0 <= noise <= 1:
            raise ConfigurationError(f"noise must lie in [0, 1], got {noise}")
        if channels < 3:
            raise ConfigurationError(f"cue_recall needs 3 observation channels, got {channels}")
        if height * width < n_cues:
            raise ConfigurationError(f"{height}x{width} observations cannot encode {n_cues} cues")

        self.horizon = horizon
        self.n_cues = n_cues
        self.noise = noise
        self.obs_shape = (height, width, channels)
        self.n_actions = n_cues
        self.block = (height * width) // n_cues
        self._rng = np.random.default_rng(seed)
        self._t = 0
        self._cue = 0
        self._done = True

    @property
    def cue(self) -> int:
        return self._cue

    @property
    def oracle_action(self) -> int:
        """The rewarded action of the current episode."""
        return self._cue

    def _observation(self, t: int) -> np.ndarray:
        obs = np.zeros(self.obs_shape, dtype=np.float32)
        obs[..., NOISE_CHANNEL] = self.noise * self._rng.random(self.obs_shape[:2])
        if t == 0:
            plane = obs[..., CUE_CHANNEL].reshape(-1)
            plane[self._cue * self.block:(self._cue + 1) * self.block] = 1.0
            obs[..., CUE_CHANNEL] = plane.reshape(self.obs_shape[:2])
        if t == self.horizon - 1:
            obs[..., QUERY_CHANNEL] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self._cue = int(self._rng.integers(self.n_cues))
        self._t = 0
        self._done = False
        return self._observation(0)

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise InputError("Episode has ended; call reset() before step()")
        if not 0 <= action < self.n_actions:
            raise InputError(f"Action {action} out of range [0, {self.n_actions})")

        if self._t == self.horizon - 1:
            self._done = True
            reward = 1.0 if action == self._cue else -1.0
            return EnvStep(np.zeros(self.obs_shape, dtype=np.float32), reward, True)

        self._t += 1
        return EnvStep(self._observation(self._t), 0.0, False)
