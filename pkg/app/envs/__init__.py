"""Environment registry keyed by the `env.env_id` config string."""
from collections.abc import Callable

from app.core.config import EnvConfig
from app.core.errors import ConfigurationError
from app.envs.bandit import BanditEnv, TabularQLearner, run_bandit_baseline
from app.envs.base import Environment, EnvStep
from app.envs.cue_recall import CueRecallEnv

EnvFactory = Callable[[EnvConfig, int], Environment]

REGISTRY: dict[str, EnvFactory] = {
    "cue_recall": lambda config, seed: CueRecallEnv(
        config.horizon, config.n_cues, config.noise, seed, config.obs_shape
    ),
    "bandit": lambda config, seed: BanditEnv(config.n_arms, config.payouts, config.obs_shape),
}


def register_env(env_id: str, factory: EnvFactory) -> None:
    if env_id in REGISTRY:
        raise ConfigurationError(f"Environment '{env_id}' is already registered")
    REGISTRY[env_id] = factory


def make_env(config: EnvConfig, seed: int = 0) -> Environment:
    if config.env_id not in REGISTRY:
        raise ConfigurationError(f"Unknown environment '{config.env_id}' (known: {sorted(REGISTRY)})")
    return REGISTRY[config.env_id](config, seed)


__all__ = [
    "BanditEnv",
    "CueRecallEnv",
    "EnvStep",
    "Environment",
    "REGISTRY",
    "TabularQLearner",
    "make_env",
    "register_env",
    "run_bandit_baseline",
]
