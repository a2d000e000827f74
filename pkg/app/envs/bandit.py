"""K-armed deterministic bandit with one-step episodes, plus a tabular Q-learning baseline."""
from collections.abc import Sequence

import numpy as np

from app.core.errors import ConfigurationError, InputError
from app.envs.base import EnvStep


class BanditEnv:
    def __init__(
        self,
        n_arms: int = 2,
        payouts: Sequence[float] = (0.0, 1.0),
        obs_shape: tuple[int, int, int] = (5, 5, 3),
    ):
        if n_arms < 2:
            raise ConfigurationError(f"A bandit needs at least 2 arms, got {n_arms}")
        if len(payouts) != n_arms:
            raise ConfigurationError(f"Payout table has {len(payouts)} entries for {n_arms} arms")
        self.n_actions = n_arms
        self.payouts = np.asarray(payouts, dtype=np.float64)
        self.obs_shape = tuple(obs_shape)
        self._done = True

    @property
    def optimal_return(self) -> float:
        return float(self.payouts.max())

    def reset(self) -> np.ndarray:
        self._done = False
        return np.zeros(self.obs_shape, dtype=np.float32)

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise InputError("Episode has ended; call reset() before step()")
        if not 0 <= action < self.n_actions:
            raise InputError(f"Action {action} out of range [0, {self.n_actions})")
        self._done = True
        return EnvStep(np.zeros(self.obs_shape, dtype=np.float32), float(self.payouts[action]), True)


class TabularQLearner:
    """
    Epsilon-greedy Q-learning over a single state.

    One-step episodes make the target the immediate reward, so the update is
    Q[a] += lr * (r - Q[a]).
    """

    def __init__(self, n_actions: int, learning_rate: float = 0.1, epsilon: float = 0.1, seed: int = 0):
        self.q = np.zeros(n_actions, dtype=np.float64)
        self.learning_rate = learning_rate
        self.epsilon = epsilon
        self._rng = np.random.default_rng(seed)

    def act(self) -> int:
        if self._rng.random() < self.epsilon:
            return int(self._rng.integers(len(self.q)))
        return int(np.argmax(self.q))

    def update(self, action: int, reward: float) -> None:
        self.q[action] += self.learning_rate * (reward - self.q[action])

    @property
    def greedy_action(self) -> int:
        return int(np.argmax(self.q))


def run_bandit_baseline(env: BanditEnv, episodes: int = 1000, seed: int = 0) -> TabularQLearner:
    learner = TabularQLearner(env.n_actions, seed=seed)
    for _ in range(episodes):
        env.reset()
        action = learner.act()
        learner.update(action, env.step(action).reward)
    return learner
