"""Evaluation episodes on published snapshots and the final-window summary."""
import copy
import logging
from collections.abc import Sequence

import numpy as np
import torch

from app.core.errors import InputError
from app.envs import Environment
from app.harness.actors import actor_step
from app.models.coberl import CoBERLNetwork
from app.numerics import ParameterSet
from app.schemas import EvaluationReport

logger = logging.getLogger(__name__)

FINAL_WINDOW = 0.05


def run_episode(network: CoBERLNetwork, env: Environment, epsilon: float, rng: np.random.Generator) -> float:
    """Play one episode from a fresh agent state; returns the undiscounted return."""
    observation = env.reset()
    state = network.initial_state(1)
    prev_action, prev_reward = 0, 0.0
    total = 0.0
    while True:
        with torch.no_grad():
            q_values, state = network.act(
                torch.as_tensor(observation).unsqueeze(0),
                torch.tensor([prev_action]),
                torch.tensor([prev_reward], dtype=network.dtype),
                state,
            )
        action = actor_step(q_values[0], epsilon, rng)
        step = env.step(action)
        total += step.reward
        if step.terminal:
            return total
        observation, prev_action, prev_reward = step.observation, action, step.reward


def evaluate(
    network: CoBERLNetwork, env: Environment, episodes: int = 5, epsilon: float = 0.01, seed: int = 0
) -> tuple[float, list[float]]:
    """Mean return over `episodes` epsilon-greedy episodes, plus the individual returns."""
    if episodes < 1:
        raise InputError(f"Need at least one evaluation episode, got {episodes}")
    rng = np.random.default_rng(seed)
    returns = [run_episode(network, env, epsilon, rng) for _ in range(episodes)]
    return float(np.mean(returns)), returns


class Evaluator:
    """Owns a network copy and an environment; reports on each snapshot it is handed."""

    def __init__(self, network: CoBERLNetwork, env: Environment, episodes: int = 5, epsilon: float = 0.01, seed: int = 0):
        self.network = copy.deepcopy(network)
        self.network.requires_grad_(False)
        self.env = env
        self.episodes = episodes
        self.epsilon = epsilon
        self._rng_seed = seed
        self.reports: list[EvaluationReport] = []

    def run(self, snapshot: ParameterSet, step: int) -> EvaluationReport:
        snapshot.load_into(self.network)
        mean, returns = evaluate(
            self.network, self.env, self.episodes, self.epsilon, seed=self._rng_seed + len(self.reports)
        )
        report = EvaluationReport(step=step, mean_return=mean, returns=returns, parameter_version=snapshot.version)
        self.reports.append(report)
        logger.info(f"Evaluation at step {step}: mean return {mean:.3f} over {self.episodes} episode(s)")
        return report


def final_window_mean(reports: Sequence[EvaluationReport], budget: int, window: float = FINAL_WINDOW) -> float:
    """
    Mean of every report at or after (1 - window) * budget.

    Raises:
        InputError: If no report falls in the window
    """
    threshold = (1 - window) * budget
    values = [r.mean_return for r in reports if r.step >= threshold]
    if not values:
        raise InputError(f"No evaluation report at or after step {threshold:g}")
    return float(np.mean(values))
