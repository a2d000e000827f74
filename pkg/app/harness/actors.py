"""
Actors: epsilon-greedy workers that step one environment each and cut their
experience into overlapping replay sequences.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from app.core.errors import ConfigurationError
from app.envs import Environment
from app.models.coberl import AgentState
from app.replay import TransitionSequence

logger = logging.getLogger(__name__)


def epsilon_for_actor(index: int, num_actors: int, base_epsilon: float = 0.4, alpha: float = 7.0) -> float:
    """eps_l = eps^(1 + alpha * l / (L - 1)); a single actor uses eps itself."""
    if not 0 <= index < num_actors:
        raise ConfigurationError(f"Actor index {index} out of range for {num_actors} actors")
    if num_actors == 1:
        return base_epsilon
    return base_epsilon ** (1 + alpha * index / (num_actors - 1))


@dataclass(frozen=True)
class ActorSchedule:
    num_actors: int
    base_epsilon: float = 0.4
    alpha: float = 7.0

    def epsilon(self, index: int) -> float:
        return epsilon_for_actor(index, self.num_actors, self.base_epsilon, self.alpha)

    def epsilons(self) -> list[float]:
        return [self.epsilon(i) for i in range(self.num_actors)]


def actor_step(q_values: np.ndarray | torch.Tensor, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy action with probability 1 - epsilon (ties to the lowest index), else uniform."""
    if isinstance(q_values, torch.Tensor):
        q_values = q_values.detach().cpu().numpy()
    q_values = np.asarray(q_values)
    if rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


@dataclass
class _EpisodeRecord:
    observations: list[np.ndarray] = field(default_factory=list)
    states: list[AgentState] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    offset: int = 0


class SequenceBuilder:
    """
    Cuts one episode into sequences of `trace_length` steps starting every
    `replay_period` steps.

    A sequence is emitted as soon as its last step has happened, or at the
    end of the episode zero-padded. Sequences with no trainable step after
    the burn-in prefix are dropped.
    """

    def __init__(self, trace_length: int, replay_period: int, burn_in: int = 0):
        self.trace_length = trace_length
        self.replay_period = replay_period
        self.burn_in = burn_in
        self._episode = _EpisodeRecord()
        self._episode_id: tuple[int, int] = (0, 0)
        self._next_start = 0
        self.dropped = 0

    def start(self, observation: np.ndarray, state: AgentState, episode_id: tuple[int, int]) -> None:
        self._episode = _EpisodeRecord(observations=[observation], states=[state.detach()])
        self._episode_id = episode_id
        self._next_start = 0

    @property
    def steps(self) -> int:
        return self._episode.offset + len(self._episode.actions)

    def record(
        self, action: int, reward: float, terminal: bool, next_observation: np.ndarray, next_state: AgentState
    ) -> list[TransitionSequence]:
        """Add one step; return the sequences completed by it."""
        episode = self._episode
        episode.actions.append(action)
        episode.rewards.append(reward)
        episode.observations.append(next_observation)
        episode.states.append(next_state.detach())

        emitted = []
        while self._next_start + self.trace_length <= self.steps:
            emitted.append(self._cut(self._next_start, terminal))
            self._next_start += self.replay_period
        if terminal:
            while self._next_start < self.steps:
                emitted.append(self._cut(self._next_start, terminal))
                self._next_start += self.replay_period
        self._trim()

        kept = [seq for seq in emitted if seq.valid_length > self.burn_in]
        self.dropped += len(emitted) - len(kept)
        return kept

    def _trim(self) -> None:
        # history before the next start is never read again
        episode = self._episode
        drop = self._next_start - episode.offset - 1
        if drop > 0:
            del episode.observations[:drop]
            del episode.states[:drop]
            del episode.actions[:drop]
            del episode.rewards[:drop]
            episode.offset += drop

    def _cut(self, start: int, terminal: bool) -> TransitionSequence:
        episode = self._episode
        length = self.trace_length
        local = start - episode.offset
        n_valid = min(length, self.steps - start)

        obs_shape = episode.observations[0].shape
        observations = np.zeros((length + 1, *obs_shape), dtype=np.float32)
        observations[: n_valid + 1] = np.stack(episode.observations[local: local + n_valid + 1])
        actions = np.zeros(length, dtype=np.int64)
        actions[:n_valid] = episode.actions[local: local + n_valid]
        rewards = np.zeros(length, dtype=np.float32)
        rewards[:n_valid] = episode.rewards[local: local + n_valid]
        valid = np.zeros(length, dtype=bool)
        valid[:n_valid] = True
        terminal_flags = np.zeros(length, dtype=bool)
        if terminal and start + n_valid == self.steps:
            terminal_flags[n_valid - 1] = True

        prev_action = episode.actions[local - 1] if local > 0 else 0
        prev_reward = episode.rewards[local - 1] if local > 0 else 0.0
        return TransitionSequence(
            observations=observations,
            actions=actions,
            rewards=rewards,
            terminal=terminal_flags,
            valid=valid,
            prev_action=int(prev_action),
            prev_reward=float(prev_reward),
            initial_state=episode.states[local],
            episode_id=self._episode_id,
            start=start,
        )


@dataclass(frozen=True)
class StepOutcome:
    sequences: list[TransitionSequence]
    episode_return: Optional[float] = None


class Actor:
    """One worker: owns an environment, its recurrent state and a sequence builder."""

    def __init__(
        self,
        index: int,
        env: Environment,
        epsilon: float,
        initial_state: AgentState,
        builder: SequenceBuilder,
        seed: int = 0,
    ):
        self.index = index
        self.env = env
        self.epsilon = epsilon
        self.builder = builder
        self._initial_state = initial_state
        self._rng = np.random.default_rng(seed)
        self.episodes = 0
        self.steps = 0
        self._begin_episode()

    def _begin_episode(self) -> None:
        self.observation = self.env.reset()
        self.state = self._initial_state
        self.prev_action = 0
        self.prev_reward = 0.0
        self.episode_return = 0.0
        self.builder.start(self.observation, self.state, (self.index, self.episodes))

    def observe(self) -> tuple[np.ndarray, int, float, AgentState]:
        """Inputs for the next inference request: (x_t, a_{t-1}, r_{t-1}, state)."""
        return self.observation, self.prev_action, self.prev_reward, self.state

    def apply(self, q_values: np.ndarray | torch.Tensor, next_state: AgentState) -> StepOutcome:
        """Pick an action from the served Q-values, step the environment and record the transition."""
        action = actor_step(q_values, self.epsilon, self._rng)
        step = self.env.step(action)
        self.steps += 1
        self.episode_return += step.reward

        sequences = self.builder.record(action, step.reward, step.terminal, step.observation, next_state)
        if step.terminal:
            finished = self.episode_return
            self.episodes += 1
            logger.debug(f"Actor {self.index} finished episode {self.episodes} with return {finished}")
            self._begin_episode()
            return StepOutcome(sequences, finished)

        self.observation = step.observation
        self.state = next_state
        self.prev_action = action
        self.prev_reward = step.reward
        return StepOutcome(sequences)
