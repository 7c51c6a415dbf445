"""Multi-step TD returns."""
from __future__ import annotations

import numpy as np


def bootstrap_plan(n_states: int, length: int, terminal: bool, nstep: int = 2):
    """For each training transition k: reward count, bootstrap state, bootstrap flag.

    Transition k sums ``min(nstep, n_states - 1 - k)`` rewards and bootstraps
    from the state that many steps ahead, unless that state is the
    episode-ending success state.
    """
    k = np.arange(length)
    n_rew = np.minimum(nstep, n_states - 1 - k)
    boot = k + n_rew
    use = ~(terminal & (boot == n_states - 1))
    return n_rew, boot, use


def td_targets(rewards: np.ndarray, boot_values: np.ndarray, length: int, terminal: bool,
               gamma: float = 0.99, nstep: int = 2) -> np.ndarray:
    """R_k = sum_i gamma^i r_{k+i} + gamma^K * Q_target(s_{k+K}, a*) per agent.

    ``rewards`` is (L-1, n), ``boot_values`` (L, n) holds the target value of
    every stored state. Returns (length, n).
    """
    n_states = boot_values.shape[0]
    n_rew, boot, use = bootstrap_plan(n_states, length, terminal, nstep)
    out = np.zeros((length, rewards.shape[1]), dtype=np.float64)
    for i in range(nstep):
        live = n_rew > i
        idx = np.arange(length)[live] + i
        out[live] += (gamma ** i) * rewards[idx]
    disc = np.where(use, gamma ** n_rew.astype(np.float64), 0.0)
    out += disc[:, None] * boot_values[boot]
    return out
