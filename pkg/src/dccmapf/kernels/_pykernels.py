"""Pure-Python reference versions of the grid kernels."""
from __future__ import annotations

from collections import deque

import numpy as np

# up, down, left, right, stay as (drow, dcol)
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)], dtype=np.int64)


def bfs_distance(obstacles: np.ndarray, goal_r: int, goal_c: int) -> np.ndarray:
    m_r, m_c = obstacles.shape
    dist = np.full((m_r, m_c), -1, dtype=np.int32)
    dist[goal_r, goal_c] = 0
    queue = deque([(goal_r, goal_c)])
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for dr, dc in MOVES[:4]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < m_r and 0 <= nc < m_c and not obstacles[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def heuristic_planes(obstacles: np.ndarray, dist: np.ndarray) -> np.ndarray:
    m_r, m_c = obstacles.shape
    out = np.zeros((m_r, m_c, 4), dtype=np.uint8)
    for r in range(m_r):
        for c in range(m_c):
            d = dist[r, c]
            if obstacles[r, c] or d <= 0:
                continue
            for k in range(4):
                nr, nc = r + MOVES[k, 0], c + MOVES[k, 1]
                if 0 <= nr < m_r and 0 <= nc < m_c and not obstacles[nr, nc] and dist[nr, nc] == d - 1:
                    out[r, c, k] = 1
    return out


def resolve_moves(positions: np.ndarray, actions: np.ndarray, obstacles: np.ndarray):
    """Simultaneous move with recursive reset of every conflicting mover.

    Returns ``(new_positions, collided, rounds)`` where ``rounds`` counts the
    conflict passes that reset at least one agent.
    """
    n = len(positions)
    m_r, m_c = obstacles.shape
    cur = [tuple(int(v) for v in p) for p in positions]
    prop = []
    collided = [False] * n
    for i in range(n):
        r, c = cur[i][0] + MOVES[actions[i], 0], cur[i][1] + MOVES[actions[i], 1]
        if 0 <= r < m_r and 0 <= c < m_c and not obstacles[r, c]:
            prop.append((int(r), int(c)))
        else:
            prop.append(cur[i])
            collided[i] = actions[i] != 4
    where_now = {p: i for i, p in enumerate(cur)}
    rounds = 0
    while True:
        reset = set()
        claims: dict[tuple, list[int]] = {}
        for i in range(n):
            claims.setdefault(prop[i], []).append(i)
        for members in claims.values():
            if len(members) > 1:
                reset.update(i for i in members if prop[i] != cur[i])
        for i in range(n):
            if prop[i] == cur[i]:
                continue
            j = where_now.get(prop[i])
            if j is not None and j != i and prop[j] == cur[i]:
                reset.add(i)
                reset.add(j)
        if not reset:
            break
        rounds += 1
        for i in reset:
            prop[i] = cur[i]
            collided[i] = True
    return np.array(prop, dtype=np.int64).reshape(n, 2), np.array(collided, dtype=bool), rounds


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded 'same' patches of an NHWC block, rows ordered (ky, kx, c)."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k, k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, k * k * c)


def col2im(cols: np.ndarray, n: int, h: int, w: int, c: int, k: int) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add patch rows back onto the image."""
    p = k // 2
    g = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + h, dx:dx + w, :] += g[:, :, :, dy, dx, :]
    return out[:, p:p + h, p:p + w, :].copy()
