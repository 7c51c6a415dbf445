"""Recurrent sequence segments and the shared prioritized replay buffer."""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


@dataclass
class SequenceSegment:
    """Up to ``seq_len`` training transitions of one environment, all agents.

    ``obs`` holds ``L`` consecutive states (the training window plus up to
    ``nstep`` look-ahead states for bootstrapping), bit-packed per state and
    agent. ``actions``/``rewards`` cover the ``L - 1`` transitions between
    those states; ``scopes[t, i, j]`` is true when agent i requested agent j
    at state t. The first ``burn`` states only warm up the recurrent
    state; training transitions start after them.
    """

    task: tuple[int, int]
    obs_packed: np.ndarray  # (L, n, packed) uint8
    obs_shape: tuple[int, int, int]
    actions: np.ndarray  # (L - 1, n) int8
    rewards: np.ndarray  # (L - 1, n) float32
    scopes: np.ndarray  # (L, n, n) bool
    hidden0: np.ndarray  # (n, hidden) float32
    length: int  # number of training transitions T
    terminal: bool  # last stored state ends the episode by success
    priority: float = 1.0
    burn: int = 0

    @property
    def n_agents(self) -> int:
        return self.obs_packed.shape[1]

    @property
    def n_states(self) -> int:
        return self.obs_packed.shape[0]

    def observations(self) -> np.ndarray:
        """Unpacked (L, n, fov, fov, 6) uint8 observations."""
        size = int(np.prod(self.obs_shape))
        flat = np.unpackbits(self.obs_packed, axis=-1, count=size)
        return flat.reshape(self.obs_packed.shape[:2] + tuple(self.obs_shape))

    @staticmethod
    def pack(obs: np.ndarray) -> np.ndarray:
        lead = obs.shape[:2]
        return np.packbits(obs.reshape(lead + (-1,)).astype(np.uint8), axis=-1)


class NotReady(RuntimeError):
    """The buffer holds fewer segments than the requested batch."""


class PrioritizedBuffer:
    """Fixed-capacity FIFO of segments sampled proportionally to p**alpha.

    All mutation and sampling happen under one lock, so a sampler never sees
    a half-inserted segment and priority write-backs are never lost. A
    priority update aimed at a slot that was overwritten since sampling is
    dropped (the generation counter no longer matches).
    """

    def __init__(self, capacity: int, alpha: float = 0.6, priority_floor: float = 1e-4):
        self.capacity = capacity
        self.alpha = alpha
        self.floor = priority_floor
        self._items: list[SequenceSegment | None] = [None] * capacity
        self._prio = np.zeros(capacity, dtype=np.float64)
        self._gen = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self._size = 0
        self._added = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._size

    @property
    def total_added(self) -> int:
        return self._added

    def add(self, segment: SequenceSegment) -> int:
        p = max(float(segment.priority), self.floor)
        if not np.isfinite(p):
            raise ValueError(f"non-finite priority {segment.priority}")
        with self._lock:
            slot = self._next
            self._items[slot] = segment
            self._prio[slot] = p
            self._gen[slot] += 1
            self._next = (slot + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self._added += 1
            return slot

    def probabilities(self) -> np.ndarray:
        with self._lock:
            return self._probabilities()

    def _probabilities(self) -> np.ndarray:
        p = self._prio[: self._size] ** self.alpha
        return p / p.sum()

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.4):
        """Returns (segments, importance weights, (slots, generations))."""
        with self._lock:
            if self._size < batch_size:
                raise NotReady(f"buffer holds {self._size} < {batch_size} segments")
            probs = self._probabilities()
            slots = rng.choice(self._size, size=batch_size, p=probs)
            weights = (self._size * probs[slots]) ** (-beta)
            weights /= weights.max()
            segs = [self._items[s] for s in slots]
            return segs, weights.astype(np.float32), (slots, self._gen[slots].copy())

    def update_priorities(self, handle, priorities) -> int:
        slots, gens = handle
        priorities = np.maximum(np.asarray(priorities, dtype=np.float64), self.floor)
        written = 0
        with self._lock:
            for s, g, p in zip(slots, gens, priorities):
                if self._gen[s] == g:
                    self._prio[s] = p
                    self._items[s].priority = float(p)
                    written += 1
        return written
