"""Episode generation: play with the current snapshot, cut into segments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..env import InstanceError, MAPFEnv, generate_map, make_instance
from ..model import DCCModel, act
from .replay import SequenceSegment
from .targets import td_targets


@dataclass
class Trajectory:
    obs: list  # E+1 entries of (n, fov, fov, 6)
    hidden: list  # E+1 entries of (n, H): hidden fed in at that state
    scopes: list  # E+1 entries of (n, n) bool
    actions: list  # E entries
    rewards: list  # E entries
    q: list  # E+1 entries of (n, A) acting Q-values
    success: bool = False
    comm_pairs: int = 0
    comm_trace: list = field(default_factory=list)  # per step, request lists

    @property
    def steps(self) -> int:
        return len(self.actions)


@dataclass
class EpisodeResult:
    task: tuple[int, int]
    success: bool
    steps: int
    comm_pairs: int
    segments: list[SequenceSegment]


def sample_instance(size: int, n: int, rng: np.random.Generator, density: float | None = None,
                    max_maps: int = 100):
    for _ in range(max_maps):
        grid = generate_map(size, rng, density)
        try:
            return make_instance(grid, n, rng)
        except InstanceError:
            continue
    raise InstanceError(f"could not place {n} agents on {size}x{size} maps after {max_maps} maps")


def play(model: DCCModel, env: MAPFEnv, epsilon: float, rng: np.random.Generator | None,
         mode: str = "dcc", record: bool = True) -> Trajectory:
    """Run one episode to completion; the final state is also evaluated."""
    n = env.n_agents
    hidden = np.zeros((n, model.cfg.hidden), dtype=np.float32)
    obs = env.reset()
    traj = Trajectory([], [], [], [], [], [])
    while True:
        nbrs = env.neighbors()
        res = act(model, obs, hidden, nbrs, epsilon if not env.state.done else 0.0, rng, mode)
        adj = np.zeros((n, n), dtype=bool)
        for i, scope in enumerate(res.scopes):
            adj[i, scope] = True
        if record:
            traj.obs.append(obs)
            traj.hidden.append(hidden)
            traj.scopes.append(adj)
            traj.q.append(res.q)
        if env.state.done:
            break
        traj.comm_pairs += res.comm_count
        traj.comm_trace.append(res.scopes)
        out = env.step(res.actions)
        traj.actions.append(res.actions)
        traj.rewards.append(out.rewards)
        hidden = res.hidden
        obs = env.observe()
    traj.success = bool(env.state.arrived.all())
    return traj


def cut_segments(traj: Trajectory, task, seq_len: int = 20, nstep: int = 2,
                 gamma: float = 0.99, priority_floor: float = 1e-4, burn_in: int = 0) -> list[SequenceSegment]:
    """Split a trajectory into ≤seq_len windows with look-ahead states.

    Each window is preceded by up to ``burn_in`` earlier states. The initial
    priority of a segment is the largest absolute n-step TD error inside
    it, measured with the acting Q-values.
    """
    E = traj.steps
    if E == 0:
        return []
    obs = np.stack(traj.obs)
    scopes = np.stack(traj.scopes)
    hidden = np.stack(traj.hidden)
    actions = np.stack(traj.actions).astype(np.int8)
    rewards = np.stack(traj.rewards).astype(np.float32)
    q = np.stack(traj.q)
    obs_shape = obs.shape[2:]
    segments = []
    for t0 in range(0, E, seq_len):
        T = min(seq_len, E - t0)
        L = min(T + nstep, E - t0 + 1)
        terminal = traj.success and t0 + L - 1 == E
        seg_rewards = rewards[t0:t0 + L - 1]
        seg_actions = actions[t0:t0 + L - 1]
        seg_q = q[t0:t0 + L]
        boot = seg_q.max(axis=-1)
        ret = td_targets(seg_rewards, boot, T, terminal, gamma, nstep)
        taken = np.take_along_axis(seg_q[:T], seg_actions[:T, :, None].astype(np.int64), axis=-1)[..., 0]
        prio = float(np.abs(ret - taken).max()) + priority_floor
        s0 = max(0, t0 - burn_in)
        segments.append(SequenceSegment(
            task=tuple(task),
            obs_packed=SequenceSegment.pack(obs[s0:t0 + L]),
            obs_shape=tuple(obs_shape),
            actions=actions[s0:t0 + L - 1].copy(),
            rewards=rewards[s0:t0 + L - 1].copy(),
            scopes=scopes[s0:t0 + L].copy(),
            hidden0=hidden[s0].astype(np.float32).copy(),
            length=T,
            terminal=terminal,
            priority=prio,
            burn=t0 - s0,
        ))
    return segments


def run_episode(task, model: DCCModel, rng: np.random.Generator, epsilon: float, mode: str = "dcc",
                step_limit: int = 256, seq_len: int = 20, nstep: int = 2, gamma: float = 0.99,
                priority_floor: float = 1e-4, burn_in: int = 0) -> EpisodeResult:
    size, n = task
    instance = sample_instance(size, n, rng)
    env = MAPFEnv(instance, step_limit=step_limit, fov=model.cfg.fov)
    traj = play(model, env, epsilon, rng, mode)
    segs = cut_segments(traj, task, seq_len, nstep, gamma, priority_floor, burn_in)
    return EpisodeResult(tuple(task), traj.success, traj.steps, traj.comm_pairs, segs)
