"""Task curriculum: unlock harder tasks when the current one is mastered."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

Task = tuple[int, int]  # (map size, agent count)


@dataclass
class CurriculumState:
    start: Task = (10, 1)
    size_step: int = 5
    max_size: int = 40
    max_agents: int = 16
    window: int = 100
    threshold: float = 0.9
    unlocked: list[Task] = field(default_factory=list)
    expanded: set = field(default_factory=set)
    history: dict = field(default_factory=dict)
    episodes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.unlocked:
            self.unlocked = [tuple(self.start)]

    def rate(self, task: Task) -> float:
        h = self.history.get(tuple(task))
        return float(np.mean(h)) if h else 0.0

    def recorded(self, task: Task) -> int:
        return len(self.history.get(tuple(task), ()))

    def update(self, task: Task, success: bool) -> list[Task]:
        """Record one episode; returns newly unlocked tasks."""
        task = tuple(task)
        if task not in self.unlocked:
            raise ValueError(f"task {task} is not unlocked")
        hist = self.history.setdefault(task, deque(maxlen=self.window))
        hist.append(bool(success))
        self.episodes[task] = self.episodes.get(task, 0) + 1
        new: list[Task] = []
        if task in self.expanded or len(hist) < self.window or self.rate(task) <= self.threshold:
            return new
        self.expanded.add(task)
        size, agents = task
        for cand in ((size, agents + 1), (size + self.size_step, agents)):
            if cand[0] <= self.max_size and cand[1] <= self.max_agents and cand not in self.unlocked:
                self.unlocked.append(cand)
                new.append(cand)
        return new

    def sample(self, rng: np.random.Generator) -> Task:
        return self.unlocked[int(rng.integers(len(self.unlocked)))]

    def to_dict(self) -> dict:
        return {
            "unlocked": [list(t) for t in self.unlocked],
            "expanded": sorted(list(t) for t in self.expanded),
            "history": {f"{t[0]}x{t[1]}": [int(v) for v in h] for t, h in sorted(self.history.items())},
            "episodes": {f"{t[0]}x{t[1]}": n for t, n in sorted(self.episodes.items())},
        }

    def load_dict(self, d: dict) -> None:
        def key(s):
            a, b = s.split("x")
            return int(a), int(b)

        self.unlocked = [tuple(t) for t in d["unlocked"]]
        self.expanded = {tuple(t) for t in d["expanded"]}
        self.history = {key(k): deque(v, maxlen=self.window) for k, v in d["history"].items()}
        self.episodes = {key(k): n for k, n in d.get("episodes", {}).items()}
