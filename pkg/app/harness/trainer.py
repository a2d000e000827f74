"""
Run orchestration: actors, inference, replay, learner and evaluator.

`Trainer.run` interleaves them round-robin in one thread and is fully
deterministic for a given seed. `Trainer.run_async` runs each actor, the
inference service and the learner as asyncio tasks sharing the replay buffer.
"""
import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from app.checkpoint import save_parameters
from app.core.config import RunConfig
from app.envs import make_env
from app.harness.actors import Actor, ActorSchedule, SequenceBuilder
from app.harness.evaluator import Evaluator, final_window_mean
from app.harness.inference import InferenceRequest, InferenceService
from app.harness.learner import Learner
from app.metrics import write_metrics_csv
from app.models.coberl import build_network
from app.replay import ReplayBuffer
from app.schemas import EvaluationReport, LearnerMetrics, MetricsRow

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.safetensors"


@dataclass
class TrainingResult:
    reports: list[EvaluationReport]
    rows: list[MetricsRow]
    final_mean: Optional[float]
    env_steps: int
    learner_steps: int
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None


@dataclass
class _RunningStats:
    episode_returns: list[float] = field(default_factory=list)
    last_metrics: Optional[LearnerMetrics] = None

    def drain_returns(self) -> Optional[float]:
        if not self.episode_returns:
            return None
        mean = float(np.mean(self.episode_returns))
        self.episode_returns.clear()
        return mean


class Trainer:
    def __init__(self, config: RunConfig, seed: Optional[int] = None, out_dir: Optional[str | Path] = None):
        self.config = config
        self.seed = config.harness.seed if seed is None else seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        harness = config.harness

        torch.manual_seed(self.seed)
        probe = make_env(config.env, self.seed)
        self.network = build_network(config, probe.n_actions)
        self.learner = Learner(self.network, config, seed=self.seed)
        self.inference = InferenceService(self.network)
        self.replay = ReplayBuffer.from_config(config.replay, seed=self.seed)
        self.schedule = ActorSchedule(harness.num_actors, harness.base_epsilon, harness.epsilon_alpha)
        self.evaluator = Evaluator(
            self.network,
            make_env(config.env, self.seed + 10_000),
            episodes=harness.eval_episodes,
            epsilon=harness.eval_epsilon,
            seed=self.seed,
        )

        initial_state = self.network.initial_state(1)
        self.actors = [
            Actor(
                index=i,
                env=make_env(config.env, self.seed * 1_000 + i + 1),
                epsilon=self.schedule.epsilon(i),
                initial_state=initial_state,
                builder=SequenceBuilder(config.replay.trace_length, config.replay.replay_period, config.burn_in),
                seed=self.seed * 1_000 + i + 1,
            )
            for i in range(harness.num_actors)
        ]

        self.env_steps = 0
        self._next_learn = harness.learner_interval
        self._next_eval = harness.eval_interval
        self._stats = _RunningStats()
        self.rows: list[MetricsRow] = []

    @property
    def epsilon_mean(self) -> float:
        return float(np.mean([a.epsilon for a in self.actors]))

    def _request(self, actor: Actor) -> InferenceRequest:
        observation, prev_action, prev_reward, state = actor.observe()
        return InferenceRequest(actor.index, observation, prev_action, prev_reward, state)

    def _apply(self, actor: Actor, q_values: np.ndarray, state) -> None:
        outcome = actor.apply(q_values, state)
        for sequence in outcome.sequences:
            self.replay.insert(sequence)
        if outcome.episode_return is not None:
            self._stats.episode_returns.append(outcome.episode_return)
        self.env_steps += 1

    def _learn(self) -> None:
        samples = self.replay.sample(self.config.replay.batch_size)
        if samples is None:
            return
        priorities, metrics = self.learner.learner_step(samples)
        if priorities is not None:
            self.replay.update_priorities([s.ref for s in samples], priorities)
            self._stats.last_metrics = metrics
            if self.learner.step % self.config.harness.publish_interval == 0:
                self.inference.publish(self.learner.params, self.learner.step)
            if self.learner.step % self.config.harness.log_interval == 0:
                logger.info(
                    f"Learner step {metrics.step}: loss={metrics.loss_total:.4f} rl={metrics.loss_rl:.4f} "
                    f"contrastive={metrics.loss_contrastive:.4f} grad_norm={metrics.grad_norm:.3f}"
                )

    def _evaluate(self, step: int) -> None:
        report = self.evaluator.run(self.inference.snapshot, step)
        metrics = self._stats.last_metrics
        self.rows.append(
            MetricsRow(
                step=step,
                episode_return=self._stats.drain_returns(),
                eval_return=report.mean_return,
                loss_rl=None if metrics is None else metrics.loss_rl,
                loss_contrastive=None if metrics is None else metrics.loss_contrastive,
                priority_mean=None if metrics is None else metrics.priority_mean,
                epsilon_mean=self.epsilon_mean,
                seed=self.seed,
            )
        )

    def _catch_up(self) -> None:
        harness = self.config.harness
        while self.env_steps >= self._next_learn:
            self._learn()
            self._next_learn += harness.learner_interval
        while self.env_steps >= self._next_eval and self._next_eval <= harness.total_env_steps:
            self._evaluate(self._next_eval)
            self._next_eval += harness.eval_interval

    def run(self) -> TrainingResult:
        """Round-robin: every actor takes one step per round, batched through inference."""
        harness = self.config.harness
        logger.info(
            f"Training seed {self.seed}: {harness.num_actors} actor(s), {harness.total_env_steps} env steps, "
            f"env={self.config.env.env_id}"
        )
        self.inference.publish(self.learner.params, 0)

        while self.env_steps < harness.total_env_steps:
            active = self.actors[: harness.total_env_steps - self.env_steps]
            for start in range(0, len(active), harness.inference_batch_size):
                chunk = active[start:start + harness.inference_batch_size]
                results = self.inference.infer([self._request(actor) for actor in chunk])
                for actor, result in zip(chunk, results):
                    self._apply(actor, result.q_values, result.state)
            self._catch_up()

        return self._finish()

    async def run_async(self) -> TrainingResult:
        """
        Actors, inference and learner as asyncio tasks.

        Inference blocks until min(inference_batch_size, active actors)
        requests are queued, then serves them in one forward pass.
        """
        harness = self.config.harness
        queue: asyncio.Queue = asyncio.Queue()
        learn_signal = asyncio.Event()
        self._active = len(self.actors)
        self.inference.publish(self.learner.params, 0)

        async def actor_loop(actor: Actor) -> None:
            await self.inference.wait_ready()
            while self.env_steps < harness.total_env_steps:
                future = asyncio.get_running_loop().create_future()
                await queue.put((self._request(actor), future))
                result = await future
                if self.env_steps >= harness.total_env_steps:
                    break
                self._apply(actor, result.q_values, result.state)
                if self.env_steps >= self._next_learn or self.env_steps >= self._next_eval:
                    learn_signal.set()
            self._active -= 1
            await queue.put(None)
            learn_signal.set()

        async def inference_loop() -> None:
            pending = []
            while self._active > 0 or pending:
                item = await queue.get()
                if item is not None:
                    pending.append(item)
                if pending and len(pending) >= min(harness.inference_batch_size, max(self._active, 1)):
                    results = self.inference.infer([request for request, _ in pending])
                    for (_, future), result in zip(pending, results):
                        future.set_result(result)
                    pending = []

        async def learner_loop() -> None:
            while True:
                await learn_signal.wait()
                learn_signal.clear()
                self._catch_up()
                if self._active == 0:
                    return
                await asyncio.sleep(0)

        await asyncio.gather(inference_loop(), learner_loop(), *(actor_loop(a) for a in self.actors))
        return self._finish()

    def _finish(self) -> TrainingResult:
        harness = self.config.harness
        self._catch_up()
        if not self.rows or self.rows[-1].step < harness.total_env_steps:
            self._evaluate(harness.total_env_steps)

        final = final_window_mean(self.evaluator.reports, harness.total_env_steps)
        result = TrainingResult(
            reports=list(self.evaluator.reports),
            rows=list(self.rows),
            final_mean=final,
            env_steps=self.env_steps,
            learner_steps=self.learner.step,
        )
        if self.out_dir is not None:
            result.metrics_path = write_metrics_csv(self.out_dir / METRICS_FILE, self.rows)
            result.checkpoint_path = save_parameters(self.out_dir / CHECKPOINT_FILE, self.learner.params, self.config)
        logger.info(
            f"Finished seed {self.seed}: {self.env_steps} env steps, {self.learner.step} learner steps, "
            f"final-window eval return {final:.3f}"
        )
        return result
