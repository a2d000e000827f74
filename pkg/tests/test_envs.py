import numpy as np
import pytest

from app.core.config import EnvConfig
from app.core.errors import ConfigurationError, InputError
from app.envs import BanditEnv, CueRecallEnv, make_env, register_env, run_bandit_baseline
from app.envs.cue_recall import CUE_CHANNEL, QUERY_CHANNEL


def _play(env, policy) -> tuple[float, int, list[np.ndarray]]:
    observations = [env.reset()]
    total, steps = 0.0, 0
    while True:
        step = env.step(policy(env))
        total += step.reward
        steps += 1
        observations.append(step.observation)
        if step.terminal:
            return total, steps, observations


class TestCueRecall:
    """Tests for the cue recall memory task"""

    def test_oracle_return(self):
        """Answering with the cue always earns +1"""
        env = CueRecallEnv(horizon=6, n_cues=4, seed=0)
        for _ in range(20):
            total, _, _ = _play(env, lambda e: e.oracle_action)
            assert total == 1.0

    def test_random_policy_return(self):
        """Uniform actions over K=4 cues average 1 - 2(K-1)/K = -0.5"""
        env = CueRecallEnv(horizon=3, n_cues=4, seed=1)
        rng = np.random.default_rng(2)
        returns = [_play(env, lambda e: int(rng.integers(e.n_actions)))[0] for _ in range(4000)]

        # standard error is sqrt(0.75 / 4000) ~ 0.014
        assert np.mean(returns) == pytest.approx(-0.5, abs=0.06)

    def test_episode_length(self):
        """H=3, K=2 gives 3-step episodes with 2 actions"""
        env = CueRecallEnv(horizon=3, n_cues=2, seed=0)
        _, steps, _ = _play(env, lambda e: 0)

        assert steps == 3
        assert env.n_actions == 2

    def test_cue_and_query_placement(self):
        """The cue appears only at t=0 and the query only at the final decision step"""
        env = CueRecallEnv(horizon=5, n_cues=4, seed=3)
        _, _, observations = _play(env, lambda e: 0)

        first = observations[0][..., CUE_CHANNEL].reshape(-1)
        block = env.block
        assert first[env.cue * block:(env.cue + 1) * block].tolist() == [1.0] * block
        assert first.sum() == block
        for obs in observations[1:4]:
            assert obs[..., CUE_CHANNEL].sum() == 0
            assert obs[..., QUERY_CHANNEL].sum() == 0
        assert (observations[4][..., QUERY_CHANNEL] == 1.0).all()

    def test_observations_in_unit_range(self):
        """Every observation value lies in [0, 1]"""
        env = CueRecallEnv(horizon=8, n_cues=4, seed=4)
        _, _, observations = _play(env, lambda e: 1)

        stacked = np.stack(observations)
        assert stacked.min() >= 0.0
        assert stacked.max() <= 1.0

    def test_deterministic_given_seed(self):
        """Two environments with the same seed produce the same episode"""
        first = _play(CueRecallEnv(seed=9), lambda e: 0)[2]
        second = _play(CueRecallEnv(seed=9), lambda e: 0)[2]

        assert all(np.array_equal(a, b) for a, b in zip(first, second))

    def test_step_after_terminal(self):
        """Stepping a finished episode requires a reset"""
        env = CueRecallEnv(horizon=3, n_cues=2)
        _play(env, lambda e: 0)
        with pytest.raises(InputError):
            env.step(0)

    def test_invalid_action(self):
        """Actions outside [0, K) are input errors"""
        env = CueRecallEnv(horizon=3, n_cues=2)
        env.reset()
        with pytest.raises(InputError):
            env.step(2)

    @pytest.mark.parametrize(
        "kwargs",
        [{"horizon": 2}, {"n_cues": 1}, {"noise": 1.5}, {"obs_shape": (5, 5, 2)}, {"n_cues": 5, "obs_shape": (2, 2, 3)}],
    )
    def test_invalid_parameters(self, kwargs):
        """Out-of-range construction parameters are configuration errors"""
        with pytest.raises(ConfigurationError):
            CueRecallEnv(**kwargs)


class TestBandit:
    """Tests for the bandit and its tabular baseline"""

    def test_optimal_return(self):
        """Payouts [0, 1] have optimal return 1"""
        assert BanditEnv(2, (0.0, 1.0)).optimal_return == 1.0

    def test_uniform_policy_return(self):
        """Averaging over every arm gives the table mean"""
        env = BanditEnv(3, (0.0, 1.0, 2.0))
        returns = []
        for action in range(3):
            env.reset()
            returns.append(env.step(action).reward)

        assert np.mean(returns) == pytest.approx(1.0)

    def test_one_step_episodes(self):
        """Every episode ends after a single step"""
        env = BanditEnv()
        env.reset()
        assert env.step(0).terminal
        with pytest.raises(InputError):
            env.step(0)

    def test_baseline_converges(self):
        """Tabular Q-learning turns greedy-optimal within 1000 episodes"""
        env = BanditEnv(4, (0.2, 0.0, 1.0, 0.5))
        learner = run_bandit_baseline(env, episodes=1000, seed=0)

        assert learner.greedy_action == 2
        assert env.payouts[learner.greedy_action] == env.optimal_return

    def test_payout_table_size(self):
        """The payout table needs one entry per arm"""
        with pytest.raises(ConfigurationError):
            BanditEnv(3, (0.0, 1.0))


class TestRegistry:
    """Tests for config-driven environment construction"""

    def test_make_env(self):
        """env_id selects the environment class"""
        assert isinstance(make_env(EnvConfig(env_id="cue_recall")), CueRecallEnv)
        assert isinstance(make_env(EnvConfig(env_id="bandit", n_arms=3, payouts=(0, 1, 2))), BanditEnv)

    def test_unknown_env(self):
        """Unknown ids are configuration errors"""
        with pytest.raises(ConfigurationError):
            make_env(EnvConfig(env_id="pong"))

    def test_duplicate_registration(self):
        """Registered ids cannot be replaced"""
        with pytest.raises(ConfigurationError):
            register_env("bandit", lambda config, seed: BanditEnv())

    def test_bandit_ignores_seed(self):
        """The bandit is deterministic, so every seed builds the same environment"""
        config = EnvConfig(env_id="bandit", n_arms=3, payouts=(0.5, 0.0, 1.0))
        first, second = make_env(config, seed=0), make_env(config, seed=123)

        rewards = []
        for env in (first, second):
            env.reset()
            rewards.append(env.step(2).reward)

        assert np.array_equal(first.payouts, second.payouts)
        assert rewards == [1.0, 1.0]
