"""Independent reference implementations used by the self-test and the tests.

Everything here is written with explicit Python loops over scalars and
shares no code with the vectorised paths it checks, apart from reading
parameters out of a model.
"""
from __future__ import annotations

import math
import sys
import time
from collections import deque
from typing import Sequence, TextIO

import numpy as np

STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


# -- grid ------------------------------------------------------------------

def flood_fill(obstacles, goal) -> list[list[int]]:
    m_r, m_c = len(obstacles), len(obstacles[0])
    dist = [[-1] * m_c for _ in range(m_r)]
    gr, gc = goal
    dist[gr][gc] = 0
    frontier = deque([(gr, gc)])
    while frontier:
        r, c = frontier.popleft()
        for dr, dc in STEPS[:4]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < m_r and 0 <= nc < m_c and not obstacles[nr][nc] and dist[nr][nc] == -1:
                dist[nr][nc] = dist[r][c] + 1
                frontier.append((nr, nc))
    return dist


def heuristic_oracle(obstacles, goal) -> np.ndarray:
    """Bit k at a free cell is 1 iff moving k reaches a cell one step closer to the goal."""
    obstacles = np.asarray(obstacles).tolist()
    dist = flood_fill(obstacles, goal)
    m_r, m_c = len(obstacles), len(obstacles[0])
    out = np.zeros((m_r, m_c, 4), dtype=np.uint8)
    for r in range(m_r):
        for c in range(m_c):
            if obstacles[r][c] or dist[r][c] <= 0:
                continue
            for k, (dr, dc) in enumerate(STEPS[:4]):
                nr, nc = r + dr, c + dc
                if 0 <= nr < m_r and 0 <= nc < m_c and dist[nr][nc] == dist[r][c] - 1:
                    out[r, c, k] = 1
    return out


def collision_oracle(positions, actions, obstacles):
    """Pairwise fixed point of the reset rules; returns (positions, collided)."""
    obstacles = np.asarray(obstacles)
    m = obstacles.shape[0]
    cur = [tuple(map(int, p)) for p in positions]
    nxt, hit = [], []
    for p, a in zip(cur, actions):
        dr, dc = STEPS[int(a)]
        q = (p[0] + dr, p[1] + dc)
        ok = 0 <= q[0] < m and 0 <= q[1] < obstacles.shape[1] and not obstacles[q]
        nxt.append(q if ok else p)
        hit.append(not ok and int(a) != 4)
    changed = True
    while changed:
        changed = False
        bad = set()
        for i in range(len(cur)):
            for j in range(i + 1, len(cur)):
                if nxt[i] == nxt[j]:
                    bad.update(k for k in (i, j) if nxt[k] != cur[k])
                elif nxt[i] == cur[j] and nxt[j] == cur[i] and nxt[i] != cur[i]:
                    bad.update((i, j))
        for k in bad:
            nxt[k] = cur[k]
            hit[k] = True
            changed = True
    return np.array(nxt, dtype=np.int64).reshape(-1, 2), np.array(hit, dtype=bool)


# -- network pieces --------------------------------------------------------

def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def gru_oracle(x, h, w_ih, w_hh, b_ih, b_hh) -> np.ndarray:
    x, h = np.asarray(x, float), np.asarray(h, float)
    rows, hid = h.shape
    out = np.zeros((rows, hid))
    for b in range(rows):
        for u in range(hid):
            def pre(gate, src, w, bias):
                return sum(src[b, i] * w[i, gate * hid + u] for i in range(src.shape[1])) + bias[gate * hid + u]
            r = _sig(pre(0, x, w_ih, b_ih) + pre(0, h, w_hh, b_hh))
            z = _sig(pre(1, x, w_ih, b_ih) + pre(1, h, w_hh, b_hh))
            n = math.tanh(pre(2, x, w_ih, b_ih) + r * pre(2, h, w_hh, b_hh))
            out[b, u] = (1 - z) * n + z * h[b, u]
    return out


def attention_oracle(e, l, members: Sequence[Sequence[int]], w_q, w_k, w_v, w_o, b_o, heads: int):
    """Per row r with members: softmax over {r} ∪ members of scaled dot products, per head.

    Queries come from ``e``; keys and values from ``[e, l]``. Returns a
    dict row -> output vector (rows without members are absent).
    """
    e, l = np.asarray(e, float), np.asarray(l, float)
    d = w_q.shape[1] // heads
    out = {}
    for r, mem in enumerate(members):
        if not mem:
            continue
        group = [r] + list(mem)
        kv = [np.concatenate([e[s], l[s]]) for s in group]
        mixed = np.zeros(heads * d)
        for hd in range(heads):
            cols = range(hd * d, (hd + 1) * d)
            q = [sum(e[r, i] * w_q[i, c] for i in range(e.shape[1])) for c in cols]
            scores = []
            for x in kv:
                k = [sum(x[i] * w_k[i, c] for i in range(len(x))) for c in cols]
                scores.append(sum(a * b for a, b in zip(q, k)) / math.sqrt(d))
            top = max(scores)
            ws = [math.exp(s - top) for s in scores]
            total = sum(ws)
            for x, w in zip(kv, ws):
                for t, c in enumerate(cols):
                    mixed[hd * d + t] += (w / total) * sum(x[i] * w_v[i, c] for i in range(len(x)))
        out[r] = np.array([sum(mixed[i] * w_o[i, o] for i in range(len(mixed))) + b_o[o]
                           for o in range(w_o.shape[1])])
    return out


def communicate_oracle(params: dict, e, l, request: Sequence[Sequence[int]], heads: int):
    """Both rounds: requested agents aggregate from requesters, then requesters from their scopes."""
    p = {k: np.asarray(v.data if hasattr(v, "data") else v, float) for k, v in params.items()}
    n = len(request)
    receive = [[i for i in range(n) if j in request[i]] for j in range(n)]
    attn = [p[f"comm.attn.{k}"] for k in ("w_q", "w_k", "w_v", "w_o", "b_o")]
    cur = np.asarray(e, float)
    outs = []
    for members, gru in ((receive, "gru1"), (request, "gru2")):
        mixed = attention_oracle(cur, l, members, *attn, heads)
        nxt = cur.copy()
        g = [p[f"comm.{gru}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
        for r, vec in mixed.items():
            nxt[r] = gru_oracle(vec[None], cur[r][None], *g)[0]
        cur = nxt
        outs.append(cur)
    return outs[0], outs[1]


def dueling_oracle(e, trunk_w, trunk_b, v_w, v_b, a_w, a_b) -> np.ndarray:
    e = np.asarray(e, float)
    out = np.zeros((e.shape[0], a_w.shape[1]))
    for b in range(e.shape[0]):
        trunk = [max(0.0, sum(e[b, i] * trunk_w[i, u] for i in range(e.shape[1])) + trunk_b[u])
                 for u in range(trunk_w.shape[1])]
        value = sum(trunk[u] * v_w[u, 0] for u in range(len(trunk))) + v_b[0]
        adv = [sum(trunk[u] * a_w[u, a] for u in range(len(trunk))) + a_b[a] for a in range(a_w.shape[1])]
        mean = sum(adv) / len(adv)
        for a in range(len(adv)):
            out[b, a] = value + adv[a] - mean
    return out


def td_oracle(rewards, boot_values, length: int, terminal: bool, gamma: float = 0.99, nstep: int = 2):
    """Transition k: up to nstep rewards, then the bootstrap unless it is the final success state."""
    rewards, boot_values = np.asarray(rewards, float), np.asarray(boot_values, float)
    last = boot_values.shape[0] - 1
    out = np.zeros((length, rewards.shape[1]))
    for k in range(length):
        for i in range(rewards.shape[1]):
            total, j = 0.0, 0
            while j < nstep and k + j < last:
                total += gamma ** j * rewards[k + j, i]
                j += 1
            if not (terminal and k + j == last):
                total += gamma ** j * boot_values[k + j, i]
            out[k, i] = total
    return out


def scope_oracle(model, obs: np.ndarray, neighbor_cells, hidden_prev) -> list[int]:
    """Brute force: one separate forward pass per masked neighbour."""
    from .nn import Tensor

    def greedy(o):
        e = model.encode(o[None].astype(np.float64), Tensor(np.asarray(hidden_prev, float)[None]))
        q = model.q_values(e).data[0].tolist()
        best = 0
        for a in range(1, len(q)):
            if q[a] > q[best]:
                best = a
        return best

    base = greedy(obs)
    scope = []
    for idx, (r, c) in enumerate(neighbor_cells):
        masked = obs.copy()
        masked[r, c, 1] = 0
        if greedy(masked) != base:
            scope.append(idx)
    return scope


# -- self-test -------------------------------------------------------------

def _report(out, name, ok, detail, t0):
    out.write(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.monotonic() - t0:.1f}s)\n")
    out.flush()
    return ok


def run_selftest(trials: int = 100, seed: int = 0, out: TextIO | None = None) -> bool:
    """Check the fast paths against the oracles above; prints one line per check."""
    from . import kernels
    from .env import distance_field, generate_map, heuristic_planes
    from .model import DCCModel, ModelConfig, comm_scope
    from .nn import Tensor, gradcheck, gru_cell, ops
    from .training.targets import td_targets

    out = out or sys.stdout
    rng = np.random.default_rng(seed)
    ok = True

    t0 = time.monotonic()
    worst = 0
    for _ in range(trials):
        grid = generate_map(int(rng.integers(4, 16)), rng)
        free = np.argwhere(~grid.obstacles)
        if len(free) == 0:
            continue
        goal = tuple(free[rng.integers(len(free))])
        got = heuristic_planes(grid, distance_field(grid, goal))
        worst = max(worst, int((got != heuristic_oracle(grid.obstacles, goal)).sum()))
    ok &= _report(out, "heuristic channels", worst == 0, f"{worst} mismatching bits", t0)

    t0 = time.monotonic()
    bad = 0
    for _ in range(trials):
        m = int(rng.integers(4, 10))
        obstacles = rng.random((m, m)) < 0.2
        free = np.argwhere(~obstacles)
        n = min(len(free), int(rng.integers(1, 9)))
        pos = free[rng.choice(len(free), n, replace=False)]
        acts = rng.integers(0, 5, n)
        want = collision_oracle(pos, acts, obstacles)
        for backend in filter(None, (kernels.python_backend, kernels.compiled_backend)):
            got = backend.resolve_moves(pos, acts, obstacles.view(np.uint8))
            bad += not (np.array_equal(got[0], want[0]) and np.array_equal(got[1], want[1]))
    ok &= _report(out, "collision resolution", bad == 0, f"{bad} mismatches", t0)

    cfg = ModelConfig(conv_channels=(4, 4), hidden=6, pos_embed=4, heads=2, key_dim=3)
    model = DCCModel(cfg, seed=seed)
    for t in model.params.values():
        t.data = t.data.astype(np.float64)
    p = {k: v.data for k, v in model.params.items()}

    t0 = time.monotonic()
    err = 0.0
    for _ in range(trials):
        rows = int(rng.integers(1, 4))
        x, h = rng.normal(size=(rows, 5)), rng.normal(size=(rows, 6))
        w = [rng.normal(size=s) for s in ((5, 18), (6, 18), (18,), (18,))]
        got = gru_cell(Tensor(x), Tensor(h), dict(zip(("w_ih", "w_hh", "b_ih", "b_hh"), map(Tensor, w)))).data
        err = max(err, float(np.abs(got - gru_oracle(x, h, *w)).max()))
    ok &= _report(out, "gru cell", err < 1e-5, f"max abs err {err:.2e}", t0)

    t0 = time.monotonic()
    err = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 6))
        e, l = rng.normal(size=(n, 6)), rng.normal(size=(n, 4))
        request = [sorted(set(rng.choice([j for j in range(n) if j != i], size=int(rng.integers(0, n)),
                                         replace=False).tolist())) for i in range(n)]
        e1, e2 = model.communicate(Tensor(e), Tensor(l), request)
        o1, o2 = communicate_oracle(p, e, l, request, cfg.heads)
        err = max(err, float(np.abs(e1.data - o1).max()), float(np.abs(e2.data - o2).max()))
    ok &= _report(out, "attention rounds", err < 1e-5, f"max abs err {err:.2e}", t0)

    t0 = time.monotonic()
    err = 0.0
    for _ in range(trials):
        e = rng.normal(size=(int(rng.integers(1, 5)), 6))
        want = dueling_oracle(e, p["head.trunk.w"], p["head.trunk.b"], p["head.v.w"], p["head.v.b"],
                              p["head.a.w"], p["head.a.b"])
        err = max(err, float(np.abs(model.q_values(Tensor(e)).data - want).max()))
    ok &= _report(out, "dueling head", err < 1e-5, f"max abs err {err:.2e}", t0)

    t0 = time.monotonic()
    err = 0.0
    for _ in range(trials):
        length = int(rng.integers(1, 21))
        n_states = min(length + 2, length + int(rng.integers(1, 3)))
        n = int(rng.integers(1, 4))
        rew, boot = rng.normal(size=(n_states - 1, n)), rng.normal(size=(n_states, n))
        term = bool(rng.integers(2))
        got = td_targets(rew, boot, length, term, 0.99, 2)
        err = max(err, float(np.abs(got - td_oracle(rew, boot, length, term, 0.99, 2)).max()))
    ok &= _report(out, "n-step targets", err < 1e-5, f"max abs err {err:.2e}", t0)

    t0 = time.monotonic()
    # larger weights make single neighbours flip greedy actions, so scopes are non-trivial
    sharp = DCCModel(cfg, {k: v * 5.0 for k, v in p.items()})
    for t in sharp.params.values():
        t.data = t.data.astype(np.float64)
    bad = hits = 0
    for _ in range(trials):
        obs, cells = random_fixture(rng, cfg.fov)
        hidden = rng.normal(size=cfg.hidden)
        got = comm_scope(sharp, obs, cells, hidden)
        bad += got != scope_oracle(sharp, obs, cells, hidden)
        hits += bool(got)
    ok &= _report(out, "communication scope", bad == 0, f"{bad} mismatches, {hits} non-empty", t0)

    t0 = time.monotonic()
    worst = 0.0
    for _ in range(max(1, trials // 10)):
        x = Tensor(rng.normal(size=(2, 5, 5, 3)))
        w, b = Tensor(rng.normal(size=(4, 3, 3, 3))), Tensor(rng.normal(size=4))
        r = rng.normal(size=(2, 5, 5, 4))
        res = gradcheck(lambda: ops.sum(ops.mul_const(ops.conv2d(x, w, b), r)), {"x": x, "w": w, "b": b})
        worst = max(worst, max(res.values()))
    ok &= _report(out, "conv gradient", worst < 1e-4, f"max rel err {worst:.2e}", t0)
    return bool(ok)


def random_fixture(rng: np.random.Generator, fov: int = 9, max_agents: int = 6):
    """Random observation with 0..max_agents neighbours; returns (obs, neighbour cells)."""
    obs = np.zeros((fov, fov, 6), dtype=np.uint8)
    obs[..., 0] = rng.random((fov, fov)) < 0.25
    obs[..., 2:] = rng.random((fov, fov, 4)) < 0.3
    c = fov // 2
    obs[c, c, 0] = 0
    spots = [(r, q) for r in range(fov) for q in range(fov) if (r, q) != (c, c) and not obs[r, q, 0]]
    k = int(rng.integers(0, max_agents + 1))
    cells = [spots[i] for i in sorted(rng.choice(len(spots), size=min(k, len(spots)), replace=False))]
    for r, q in cells:
        obs[r, q, 1] = 1
    return obs, [tuple(map(int, x)) for x in cells]
