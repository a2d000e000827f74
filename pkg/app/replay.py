"""
Prioritized replay of fixed-length transition sequences.

Sequences are stored whole, each with the recurrent state the actor held at
its first step. Every stored sequence gets a monotone reference id; the slot
it occupies is `id % capacity`, so a reference to an evicted sequence is
detected by comparing ids.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.config import ReplayConfig
from app.core.errors import InputError
from app.models.coberl import AgentState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransitionSequence:
    """
    L steps of one episode starting at `start`.

    `observations` holds L+1 entries (x_s ... x_{s+L}); the extra one is the
    bootstrap input. Steps past the episode end are zero-padded and marked
    invalid; `terminal` can only be set on the last valid step.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    valid: np.ndarray
    prev_action: int
    prev_reward: float
    initial_state: AgentState
    episode_id: tuple[int, int]
    start: int = 0

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def valid_length(self) -> int:
        return int(self.valid.sum())

    @property
    def input_valid(self) -> np.ndarray:
        """Validity of the L+1 inputs: input t is real if t == 0 or step t-1 happened."""
        return np.concatenate([[True], self.valid])

    @property
    def prev_actions(self) -> np.ndarray:
        """a_{t-1} for each of the L+1 inputs."""
        return np.concatenate([[self.prev_action], self.actions]).astype(np.int64)

    @property
    def prev_rewards(self) -> np.ndarray:
        return np.concatenate([[self.prev_reward], self.rewards]).astype(np.float32)

    def validate(self, trace_length: int) -> None:
        """Raises InputError unless the sequence is a well-formed trace of `trace_length` steps."""
        if self.length != trace_length:
            raise InputError(f"Sequence has {self.length} steps, expected {trace_length}")
        for name in ("rewards", "terminal", "valid"):
            if len(getattr(self, name)) != trace_length:
                raise InputError(f"Sequence field '{name}' has length {len(getattr(self, name))}")
        if len(self.observations) != trace_length + 1:
            raise InputError(f"Sequence needs {trace_length + 1} observations, got {len(self.observations)}")

        n_valid = self.valid_length
        if n_valid == 0 or not self.valid[:n_valid].all():
            raise InputError("Valid steps must form a non-empty prefix")
        terminal_steps = np.flatnonzero(self.terminal)
        if len(terminal_steps) > 1 or (len(terminal_steps) == 1 and terminal_steps[0] != n_valid - 1):
            raise InputError("A terminal flag may only mark the last valid step")
        if n_valid < trace_length and len(terminal_steps) == 0:
            raise InputError("Padded sequences must end in a terminal step")
        if self.initial_state.batch_size != 1:
            raise InputError(f"Initial state must hold one actor, got {self.initial_state.batch_size}")


@dataclass(frozen=True)
class PrioritizedSample:
    ref: int
    sequence: TransitionSequence
    probability: float
    weight: float


def sampling_probabilities(priorities: np.ndarray, exponent: float = 1.0) -> np.ndarray:
    """P(i) ∝ p_i^exponent; uniform when every priority is zero."""
    scaled = np.power(np.asarray(priorities, dtype=np.float64), exponent)
    total = scaled.sum()
    if total <= 0:
        return np.full(len(scaled), 1.0 / len(scaled))
    return scaled / total


def importance_weights(probabilities: np.ndarray, size: int, exponent: float) -> np.ndarray:
    """w_i = (N * P(i))^-exponent, normalized by the largest weight in the batch."""
    raw = np.power(size * np.asarray(probabilities, dtype=np.float64), -exponent)
    return raw / raw.max()


class ReplayBuffer:
    """
    Fixed-capacity FIFO store with proportional prioritized sampling.

    insert, sample and update_priorities each hold the buffer lock for their
    whole duration.
    """

    def __init__(
        self,
        capacity: int,
        trace_length: int,
        min_start: int = 1,
        sampling_exponent: float = 1.0,
        importance_exponent: float = 0.6,
        seed: int = 0,
    ):
        if capacity < 1:
            raise InputError(f"Capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.trace_length = trace_length
        self.min_start = min_start
        self.sampling_exponent = sampling_exponent
        self.importance_exponent = importance_exponent

        self._sequences: list[Optional[TransitionSequence]] = [None] * capacity
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self._priorities = np.zeros(capacity, dtype=np.float64)
        self._next_id = 0
        self._rng = np.random.default_rng(seed)
        self._lock = threading.RLock()
        self.stale_updates = 0

    @classmethod
    def from_config(cls, config: ReplayConfig, seed: int = 0) -> "ReplayBuffer":
        return cls(
            capacity=config.capacity,
            trace_length=config.trace_length,
            min_start=config.min_start,
            sampling_exponent=config.sampling_exponent,
            importance_exponent=config.importance_exponent,
            seed=seed,
        )

    def __len__(self) -> int:
        return min(self._next_id, self.capacity)

    @property
    def ready(self) -> bool:
        return len(self) >= self.min_start

    @property
    def max_priority(self) -> float:
        with self._lock:
            if len(self) == 0:
                return 1.0
            return float(self._priorities[: len(self)].max())

    def priority(self, ref: int) -> Optional[float]:
        with self._lock:
            slot = ref % self.capacity
            return float(self._priorities[slot]) if self._ids[slot] == ref else None

    def insert(self, sequence: TransitionSequence, priority: Optional[float] = None) -> int:
        """
        Store a sequence, evicting the oldest at capacity, and return its reference.

        Without an explicit priority the sequence gets the current maximum
        (1.0 in an empty buffer).

        Raises:
            InputError: On a malformed sequence or a negative priority
        """
        sequence.validate(self.trace_length)
        if priority is not None and priority < 0:
            raise InputError(f"Priority must be non-negative, got {priority}")

        with self._lock:
            if priority is None:
                priority = self.max_priority
            ref = self._next_id
            slot = ref % self.capacity
            self._sequences[slot] = sequence
            self._ids[slot] = ref
            self._priorities[slot] = priority
            self._next_id += 1
            return ref

    def probabilities(self) -> np.ndarray:
        with self._lock:
            return sampling_probabilities(self._priorities[: len(self)], self.sampling_exponent)

    def sample(self, batch_size: int, importance_exponent: Optional[float] = None) -> Optional[list[PrioritizedSample]]:
        """
        Draw `batch_size` sequences with replacement, P(i) ∝ p_i.

        Returns None while fewer than `min_start` sequences are stored.
        """
        beta = self.importance_exponent if importance_exponent is None else importance_exponent
        with self._lock:
            if not self.ready:
                return None
            count = len(self)
            probs = sampling_probabilities(self._priorities[:count], self.sampling_exponent)
            slots = self._rng.choice(count, size=batch_size, p=probs)
            weights = importance_weights(probs[slots], count, beta)
            return [
                PrioritizedSample(
                    ref=int(self._ids[slot]),
                    sequence=self._sequences[slot],
                    probability=float(probs[slot]),
                    weight=float(weight),
                )
                for slot, weight in zip(slots, weights)
            ]

    def update_priorities(self, refs: list[int], priorities: list[float] | np.ndarray) -> int:
        """
        Replace priorities of still-stored sequences; returns how many were updated.

        References to evicted sequences are skipped and counted in `stale_updates`.

        Raises:
            InputError: On a negative priority or mismatched lengths
        """
        priorities = np.asarray(priorities, dtype=np.float64)
        if len(refs) != len(priorities):
            raise InputError(f"Got {len(refs)} refs but {len(priorities)} priorities")
        if (priorities < 0).any():
            raise InputError("Priorities must be non-negative")

        updated = 0
        stale = 0
        with self._lock:
            for ref, priority in zip(refs, priorities):
                slot = ref % self.capacity
                if self._ids[slot] != ref:
                    stale += 1
                    continue
                self._priorities[slot] = priority
                updated += 1
            self.stale_updates += stale

        if stale:
            logger.warning(f"Ignored {stale} priority update(s) for evicted sequences")
        return updated
