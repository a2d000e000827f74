import numpy as np
import pytest
import torch

from app.core.config import RunConfig
from app.models.coberl import AgentState, build_network
from app.numerics import precision
from app.replay import TransitionSequence


@pytest.fixture
def float64():
    """Run the test with float64 as torch's default dtype"""
    with precision("float64") as dtype:
        yield dtype


@pytest.fixture
def tiny_config():
    """Small float64 network on a 5-step, 2-cue recall task"""
    return RunConfig.desk().override(
        numerics={"dtype": "float64"},
        encoder={"preset": "flat", "d_action_reward": 4, "mlp_hidden": 8},
        transformer={"n_layers": 2, "memory_size": 4, "d_model": 16, "n_heads": 2, "d_head": 4, "d_ff": 32},
        core={"d_lstm": 8, "head_hidden": 8},
        contrastive={"d_critic": 8},
        replay={"capacity": 64, "batch_size": 2, "trace_length": 8, "replay_period": 4, "min_start": 2},
        harness={
            "burn_in": 2,
            "num_actors": 2,
            "learner_interval": 4,
            "eval_interval": 20,
            "eval_episodes": 2,
            "total_env_steps": 40,
            "target_update_period": 3,
            "publish_interval": 1,
        },
        env={"env_id": "cue_recall", "horizon": 5, "n_cues": 2, "obs_shape": (3, 3, 3)},
    )


@pytest.fixture
def tiny_network(float64, tiny_config):
    torch.manual_seed(0)
    return build_network(tiny_config, n_actions=2)


def _sequence(
    network,
    length: int = 8,
    n_valid: int | None = None,
    obs_shape=(3, 3, 3),
    n_actions: int = 2,
    seed: int = 0,
    episode_id=(0, 0),
) -> TransitionSequence:
    """Random but well-formed sequence; a padded one ends in a terminal step"""
    rng = np.random.default_rng(seed)
    n_valid = length if n_valid is None else n_valid
    observations = np.zeros((length + 1, *obs_shape), dtype=np.float32)
    observations[: n_valid + 1] = rng.random((n_valid + 1, *obs_shape))
    actions = np.zeros(length, dtype=np.int64)
    actions[:n_valid] = rng.integers(n_actions, size=n_valid)
    rewards = np.zeros(length, dtype=np.float32)
    rewards[:n_valid] = rng.choice([-1.0, 0.0, 1.0], size=n_valid)
    valid = np.arange(length) < n_valid
    terminal = np.zeros(length, dtype=bool)
    if n_valid < length:
        terminal[n_valid - 1] = True
    state: AgentState = network.initial_state(1)
    return TransitionSequence(
        observations=observations,
        actions=actions,
        rewards=rewards,
        terminal=terminal,
        valid=valid,
        prev_action=0,
        prev_reward=0.0,
        initial_state=state,
        episode_id=episode_id,
    )


@pytest.fixture
def make_sequence(tiny_network):
    """Factory for well-formed sequences whose initial state fits the tiny network"""

    def factory(**kwargs) -> TransitionSequence:
        return _sequence(tiny_network, **kwargs)

    return factory
