import copy
import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats
from torch.func import functional_call

from app.core.config import load_run_config
from app.core.errors import ConfigurationError, HarnessError, InputError
from app.envs import CueRecallEnv
from app.envs.cue_recall import CUE_CHANNEL, QUERY_CHANNEL
from app.harness.actors import Actor, ActorSchedule, SequenceBuilder, actor_step, epsilon_for_actor
from app.harness.evaluator import final_window_mean
from app.harness.inference import InferenceRequest, InferenceService
from app.harness.learner import Learner, LearnerBatch
from app.harness.trainer import Trainer
from app.models.coberl import build_network
from app.numerics import ParameterSet, grad_check, gradients
from app.replay import PrioritizedSample
from app.schemas import EvaluationReport


@pytest.fixture
def samples(make_sequence):
    """Two replay samples: one full sequence and one ending early"""
    return [
        PrioritizedSample(ref=0, sequence=make_sequence(seed=1), probability=0.5, weight=1.0),
        PrioritizedSample(ref=1, sequence=make_sequence(seed=2, n_valid=6), probability=0.5, weight=0.8),
    ]


@pytest.fixture
def inference(tiny_network):
    """Inference service with the tiny network's parameters published"""
    service = InferenceService(tiny_network)
    service.publish(ParameterSet.from_module(tiny_network))
    return service


def _step_through(network, sequence, steps: int) -> list:
    """Agent states before each of the first `steps` inputs and after the last, one input per unroll"""
    state = sequence.initial_state
    states = [state]
    with torch.no_grad():
        for k in range(steps):
            y = network.embed(
                torch.as_tensor(sequence.observations[k:k + 1]).unsqueeze(0),
                torch.tensor([[int(sequence.prev_actions[k])]]),
                torch.tensor([[float(sequence.prev_rewards[k])]], dtype=network.dtype),
            )
            state = network.unroll(y, state, causal=True).state
            states.append(state)
    return states


def _assert_states_close(actual, expected, atol: float) -> None:
    assert torch.allclose(actual.lstm_hidden, expected.lstm_hidden, rtol=0, atol=atol)
    assert torch.allclose(actual.lstm_cell, expected.lstm_cell, rtol=0, atol=atol)
    assert torch.equal(actual.memory.valid, expected.memory.valid)
    for a, b in zip(actual.memory.layers, expected.memory.layers):
        assert torch.allclose(a, b, rtol=0, atol=atol)


class TestActorSchedule:
    """Tests for per-actor exploration rates"""

    def test_endpoints(self):
        """512 actors span eps 0.4 down to 0.4^8"""
        assert epsilon_for_actor(0, 512) == pytest.approx(0.4)
        assert epsilon_for_actor(511, 512) == pytest.approx(6.5536e-4, rel=1e-9)

    def test_single_actor(self):
        """A lone actor uses the base epsilon"""
        assert ActorSchedule(1).epsilons() == [0.4]

    def test_strictly_decreasing(self):
        """Later actors explore less"""
        epsilons = ActorSchedule(8).epsilons()
        assert all(a > b for a, b in zip(epsilons, epsilons[1:]))

    def test_index_out_of_range(self):
        """Indices must lie in [0, num_actors)"""
        with pytest.raises(ConfigurationError):
            epsilon_for_actor(4, 4)


class TestActorStep:
    """Tests for epsilon-greedy action selection"""

    def test_greedy_tie_breaks_low(self):
        """Equal Q-values pick the lowest action"""
        rng = np.random.default_rng(0)
        assert actor_step(np.array([1.0, 1.0, 0.5]), 0.0, rng) == 0
        assert actor_step(torch.tensor([0.0, 2.0, 2.0]), 0.0, rng) == 1

    def test_uniform_when_fully_random(self):
        """eps = 1 picks every action equally often"""
        rng = np.random.default_rng(1)
        q_values = np.array([5.0, 0.0, 0.0, 0.0])
        counts = np.bincount([actor_step(q_values, 1.0, rng) for _ in range(100_000)], minlength=4)

        assert stats.chisquare(counts).pvalue > 1e-3
        assert (np.abs(counts - 25_000) <= 4 * np.sqrt(100_000 * 0.25 * 0.75)).all()


class TestInference:
    """Tests for the batched inference service"""

    def test_requires_published_snapshot(self, tiny_network):
        """Serving before any publication is a harness error"""
        service = InferenceService(tiny_network)
        request = InferenceRequest(0, np.zeros((3, 3, 3)), 0, 0.0, tiny_network.initial_state(1))

        with pytest.raises(HarnessError):
            service.infer([request])

    def test_identical_requests(self, inference, tiny_network):
        """The same request served twice gets the same answer"""
        request = InferenceRequest(0, np.random.default_rng(0).random((3, 3, 3)), 1, 1.0, tiny_network.initial_state(1))

        first = inference.infer([request])[0]
        second = inference.infer([request])[0]

        assert np.array_equal(first.q_values, second.q_values)
        assert first.state.equals(second.state)
        assert inference.batches_served == 2

    def test_batching_preserves_order(self, inference, tiny_network):
        """Results come back in request order with per-actor states"""
        rng = np.random.default_rng(2)
        requests = [
            InferenceRequest(i, rng.random((3, 3, 3)), i % 2, 0.0, tiny_network.initial_state(1)) for i in range(3)
        ]

        results = inference.infer(requests)

        assert [r.actor_index for r in results] == [0, 1, 2]
        assert all(r.state.batch_size == 1 for r in results)
        assert all(r.parameter_version == 0 for r in results)

    def test_resubmitted_state_matches_sequence_unroll(self, inference, tiny_network):
        """Stepping one actor through inference equals unrolling its whole sequence"""
        rng = np.random.default_rng(3)
        observations = rng.random((4, 3, 3, 3))
        actions = [0, 1, 1, 0]
        rewards = [0.0, 0.5, -1.0, 0.0]

        state = tiny_network.initial_state(1)
        stepped = []
        for t in range(4):
            prev_action = actions[t - 1] if t else 0
            prev_reward = rewards[t - 1] if t else 0.0
            result = inference.infer([InferenceRequest(0, observations[t], prev_action, prev_reward, state)])[0]
            stepped.append(result.q_values)
            state = result.state

        with torch.no_grad():
            y = tiny_network.embed(
                torch.as_tensor(observations).unsqueeze(0),
                torch.tensor([[0] + actions[:3]]),
                torch.tensor([[0.0] + rewards[:3]]),
            )
            whole = tiny_network.unroll(y, tiny_network.initial_state(1)).q_values[0]

        assert np.allclose(np.stack(stepped), whole.numpy(), atol=1e-10)

    def test_publish_is_a_snapshot(self, tiny_network):
        """Later learner updates do not leak into the served parameters"""
        service = InferenceService(tiny_network)
        params = ParameterSet.from_module(tiny_network)
        service.publish(params, learner_step=5)

        with torch.no_grad():
            tiny_network.head.value.bias.add_(1.0)

        assert not torch.equal(service.network.head.value.bias, tiny_network.head.value.bias)
        assert service.published_at == 5


class TestLearner:
    """Tests for the learner step"""

    def test_step_returns_priorities(self, tiny_network, tiny_config, samples):
        """A learner step yields one non-negative priority per sample"""
        learner = Learner(tiny_network, tiny_config, seed=0)

        priorities, metrics = learner.learner_step(samples)

        assert priorities.shape == (2,)
        assert (priorities >= 0).all()
        assert metrics.step == 1
        assert not metrics.aborted
        assert np.isfinite(metrics.loss_total)

    def test_target_refresh_cadence(self, tiny_network, tiny_config, samples):
        """The target network is copied from the online one every target_update_period steps"""
        learner = Learner(tiny_network, tiny_config, seed=0)
        assert learner.target_matches_online()

        updated = []
        for _ in range(3):
            _, metrics = learner.learner_step(samples)
            updated.append(metrics.target_updated)
            if not metrics.target_updated:
                assert not learner.target_matches_online()

        assert updated == [False, False, True]
        assert learner.target_matches_online()

    def test_deterministic(self, tiny_network, tiny_config, samples):
        """Identical learners on identical batches end with bit-identical parameters"""
        first = Learner(copy.deepcopy(tiny_network), tiny_config, seed=4)
        second = Learner(copy.deepcopy(tiny_network), tiny_config, seed=4)

        for _ in range(2):
            first.learner_step(samples)
            second.learner_step(samples)

        assert first.params.equals(second.params)
        assert first.params.version == 2

    def test_zero_weight_isolates_critic(self, float64, tiny_config, samples):
        """With w = 0 the critic gets no gradient and cannot affect any other gradient"""
        config = tiny_config.override(contrastive={"loss_weight": 0.0})
        torch.manual_seed(0)
        learner = Learner(build_network(config, n_actions=2), config, seed=0)
        batch = LearnerBatch.from_samples(samples, learner.network.dtype)

        before = gradients(learner.objective(batch, 11).total, learner.params)
        with torch.no_grad():
            learner.network.critic.proj.weight.add_(0.5)
        after = gradients(learner.objective(batch, 11).total, learner.params)

        assert torch.count_nonzero(before["critic.proj.weight"]) == 0
        for name in before:
            if not name.startswith("critic."):
                assert torch.allclose(before[name], after[name], rtol=0, atol=1e-12), name

    def test_masking_is_training_only(self, tiny_network, tiny_config, samples):
        """The learner consults the mask token; acting never does"""
        learner = Learner(tiny_network, tiny_config, seed=0)
        learner.learner_step(samples)
        assert tiny_network.mask_token_uses == 1

        with torch.no_grad():
            tiny_network.act(torch.rand(1, 3, 3, 3), torch.tensor([0]), torch.tensor([0.0]), tiny_network.initial_state(1))
        assert tiny_network.mask_token_uses == 1

    def test_full_loss_gradient_check(self, tiny_network, tiny_config, samples):
        """Reverse-mode gradients of the whole training loss match finite differences"""
        learner = Learner(tiny_network, tiny_config, seed=0)
        batch = LearnerBatch.from_samples(samples, tiny_network.dtype)

        def loss_fn(params):
            named = {f"network.{name}": tensor for name, tensor in params.items()}
            return functional_call(learner.objective, named, (batch, 3)).total

        report = grad_check(loss_fn, learner.params, tol=1e-4, step=tiny_config.numerics.grad_check_step, max_entries=2)

        assert report.passed, report.worst

    def test_consecutive_aborts_halt(self, tiny_network, tiny_config, samples):
        """Repeated non-finite losses abort steps and finally halt the learner"""
        learner = Learner(tiny_network, tiny_config, seed=0)
        poisoned = [
            PrioritizedSample(s.ref, s.sequence, s.probability, float("nan")) for s in samples
        ]

        for _ in range(tiny_config.harness.max_consecutive_aborts - 1):
            priorities, metrics = learner.learner_step(poisoned)
            assert priorities is None
            assert metrics.aborted
        with pytest.raises(HarnessError):
            learner.learner_step(poisoned)
        assert learner.step == 0

    def test_padding_does_not_reach_the_loss(self, tiny_network, tiny_config, make_sequence):
        """Rewriting observations after the episode end changes neither the contrastive nor the RL loss"""
        padded = make_sequence(seed=5, n_valid=3)
        rewritten = dataclasses.replace(padded, observations=padded.observations.copy())
        rewritten.observations[4:] = np.random.default_rng(9).random(rewritten.observations[4:].shape)
        full = make_sequence(seed=1)
        learner = Learner(tiny_network, tiny_config, seed=0)

        def terms(sequence):
            samples = [PrioritizedSample(0, full, 0.5, 1.0), PrioritizedSample(1, sequence, 0.5, 1.0)]
            return learner.objective(LearnerBatch.from_samples(samples, tiny_network.dtype), 3)

        first, second = terms(padded), terms(rewritten)

        assert first.contrastive.loss.item() > 0
        assert torch.allclose(first.contrastive.loss, second.contrastive.loss, rtol=0, atol=1e-12)
        assert torch.allclose(first.contrastive.penalty, second.contrastive.penalty, rtol=0, atol=1e-12)
        assert torch.allclose(first.rl, second.rl, rtol=0, atol=1e-12)


class TestSequenceFidelity:
    """Stored sequences against what the actors actually saw"""

    def test_initial_state_replays_actor_states(self, inference, tiny_network):
        """Stepping a sequence from its stored state reproduces the actor's inputs and live states"""
        builder = SequenceBuilder(trace_length=8, replay_period=4, burn_in=2)
        env = CueRecallEnv(horizon=12, n_cues=2, seed=5, obs_shape=(3, 3, 3))
        actor = Actor(0, env, epsilon=0.5, initial_state=tiny_network.initial_state(1), builder=builder, seed=5)

        live, sequences = {}, []
        for _ in range(60):
            observation, prev_action, prev_reward, state = actor.observe()
            live[(actor.episodes, actor.builder.steps)] = (observation.copy(), prev_action, prev_reward, state)
            result = inference.infer([InferenceRequest(0, observation, prev_action, prev_reward, state)])[0]
            sequences.extend(actor.apply(result.q_values, result.state).sequences)

        assert len(sequences) >= 12
        for sequence in sequences:
            episode = sequence.episode_id[1]
            n_valid = sequence.valid_length
            assert sequence.episode_id[0] == 0
            assert sequence.start + n_valid <= 12
            replayed = _step_through(inference.network, sequence, n_valid)
            for k in range(n_valid):
                observation, prev_action, prev_reward, state = live[(episode, sequence.start + k)]
                assert np.array_equal(sequence.observations[k], observation)
                assert sequence.prev_actions[k] == prev_action
                assert sequence.prev_rewards[k] == pytest.approx(prev_reward)
                _assert_states_close(replayed[k], state, atol=1e-5)

    def test_trainer_sequences_stay_in_one_episode(self, float64, tiny_config, monkeypatch):
        """Every stored sequence sits inside one episode and chains onto its predecessor's states"""
        horizon, period = 12, tiny_config.replay.replay_period
        config = tiny_config.override(
            env={"horizon": horizon},
            harness={"total_env_steps": 200, "eval_interval": 100, "publish_interval": 1000},
        )
        trainer = Trainer(config, seed=2)
        stored = []
        insert = trainer.replay.insert

        def recording_insert(sequence, priority=None):
            stored.append(sequence)
            return insert(sequence, priority)

        monkeypatch.setattr(trainer.replay, "insert", recording_insert)
        trainer.run()

        assert len(stored) > 20
        by_start = {(s.episode_id, s.start): s for s in stored}
        chained = 0
        for sequence in stored:
            n_valid = sequence.valid_length
            assert sequence.start % period == 0
            assert sequence.start + n_valid <= horizon
            assert n_valid == config.replay.trace_length or sequence.terminal[n_valid - 1]
            assert not sequence.observations[n_valid + 1:].any()
            for k in range(n_valid):
                t = sequence.start + k
                assert sequence.observations[k][..., CUE_CHANNEL].any() == (t == 0)
                assert sequence.observations[k][..., QUERY_CHANNEL].all() == (t == horizon - 1)

            previous = by_start.get((sequence.episode_id, sequence.start - period))
            if previous is not None:
                replayed = _step_through(trainer.inference.network, previous, period)
                _assert_states_close(replayed[period], sequence.initial_state, atol=1e-5)
                chained += 1
            elif sequence.start == 0:
                assert sequence.initial_state.equals(trainer.network.initial_state(1))

        assert chained > 0


class TestFinalWindow:
    """Tests for the final-window evaluation summary"""

    def _report(self, step, value):
        return EvaluationReport(step=step, mean_return=value, returns=[value])

    def test_window_mean(self):
        """Budget 1000 averages reports at steps >= 950"""
        reports = [self._report(900, 0.0), self._report(950, 0.5), self._report(1000, 1.0)]
        assert final_window_mean(reports, budget=1000) == pytest.approx(0.75)

    def test_empty_window(self):
        """No report in the window is an input error"""
        with pytest.raises(InputError):
            final_window_mean([self._report(500, 1.0)], budget=1000)


class TestTrainer:
    """End-to-end runs on the tiny configuration"""

    def test_deterministic_run(self, float64, tiny_config, tmp_path):
        """Two runs with the same seed log identical metrics"""
        first = Trainer(tiny_config, seed=3, out_dir=tmp_path / "a").run()
        second = Trainer(tiny_config, seed=3, out_dir=tmp_path / "b").run()

        assert first.env_steps == 40
        assert first.learner_steps > 0
        assert [r.step for r in first.rows] == [20, 40]
        assert [r.model_dump() for r in first.rows] == [r.model_dump() for r in second.rows]
        assert first.metrics_path.is_file()
        assert first.checkpoint_path.is_file()

    def test_evaluates_published_snapshot(self, float64, tiny_config):
        """Evaluation runs the parameters the actors are served, not the learner's latest"""
        trainer = Trainer(tiny_config.override(harness={"publish_interval": 1000}), seed=3)

        result = trainer.run()

        assert result.learner_steps > 0
        assert trainer.learner.params.version > 0
        assert [r.parameter_version for r in result.reports] == [0, 0]

    async def test_async_run(self, float64, tiny_config):
        """Asyncio actors, inference and learner consume the whole budget"""
        trainer = Trainer(tiny_config.override(harness={"mode": "async", "inference_batch_size": 2}), seed=1)

        result = await trainer.run_async()

        assert result.env_steps == 40
        assert result.final_mean is not None
        assert result.rows[-1].step == 40
        assert trainer.inference.batches_served > 0


@pytest.mark.slow
def test_cue_recall_is_learned(tmp_path):
    """Desk agent reaches mean eval return 0.8 on cue recall for at least 4 of 5 seeds"""
    config = load_run_config(Path(__file__).parent.parent / "configs" / "cue_recall.env")

    finals = [Trainer(config, seed=seed, out_dir=tmp_path / f"seed{seed}").run().final_mean for seed in range(5)]

    assert sum(final >= 0.8 for final in finals) >= 4, finals
