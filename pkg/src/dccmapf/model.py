"""Decision-causal communication policy network and the nearest-two baseline.

Pipeline per time step for the agents of one environment:

1. encoder: 4 conv layers -> flatten -> affine -> GRU (hidden = last
   step's communication outcome) gives the message ``e``;
2. scope: in ``dcc`` mode agent i requests neighbour j iff masking j out
   of channel 1 changes i's communication-free greedy action; in ``rr-n2``
   mode i requests its two nearest neighbours;
3. two attention rounds (requested agents first, then requesters) each
   followed by a GRU give ``e2``;
4. dueling head on ``e2`` gives Q-values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .env import N_ACTIONS, OBS_CHANNELS
from .nn import Tensor, ops
from .nn.layers import (gru_cell, init_affine, init_attention, init_conv, init_gru,
                        multi_head_attention)

MODES = ("dcc", "rr-n2")


@dataclass(frozen=True)
class ModelConfig:
    fov: int = 9
    conv_channels: tuple[int, ...] = (32, 32, 64, 64)
    hidden: int = 128
    pos_embed: int = 16
    heads: int = 4
    key_dim: int = 32
    n_actions: int = N_ACTIONS
    obs_channels: int = OBS_CHANNELS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def put(prefix, table):
        for k, v in table.items():
            params[f"{prefix}.{k}"] = v

    c_in = cfg.obs_channels
    for li, c_out in enumerate(cfg.conv_channels):
        put(f"enc.conv{li}", init_conv(rng, c_in, c_out))
        c_in = c_out
    put("enc.fc", init_affine(rng, c_in * cfg.fov * cfg.fov, cfg.hidden, relu=True))
    put("enc.gru", init_gru(rng, cfg.hidden, cfg.hidden))
    put("pos", init_affine(rng, cfg.fov * cfg.fov, cfg.pos_embed))
    put("comm.attn", init_attention(rng, cfg.hidden, cfg.hidden + cfg.pos_embed,
                                    cfg.hidden, cfg.heads, cfg.key_dim))
    put("comm.gru1", init_gru(rng, cfg.hidden, cfg.hidden))
    put("comm.gru2", init_gru(rng, cfg.hidden, cfg.hidden))
    put("head.trunk", init_affine(rng, cfg.hidden, cfg.hidden, relu=True))
    put("head.v", init_affine(rng, cfg.hidden, 1))
    put("head.a", init_affine(rng, cfg.hidden, cfg.n_actions))
    return params


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


@dataclass
class CommScope:
    """Request scopes C_i, receive scopes (dual) and the neighbour sets."""

    request: list[list[int]]
    neighbors: list[list[int]] = field(default_factory=list)

    @property
    def receive(self) -> list[list[int]]:
        return receive_scopes(self.request)

    @property
    def count(self) -> int:
        return sum(len(c) for c in self.request)


def receive_scopes(request: Sequence[Sequence[int]]) -> list[list[int]]:
    """C̄_j = {i | j in C_i}."""
    recv: list[list[int]] = [[] for _ in request]
    for i, scope in enumerate(request):
        for j in scope:
            recv[j].append(i)
    return recv


class DCCModel:
    """Parameter table plus the forward pieces of the policy."""

    def __init__(self, cfg: ModelConfig | None = None, params: Mapping[str, np.ndarray] | None = None,
                 seed: int = 0, requires_grad: bool = False):
        self.cfg = cfg or ModelConfig()
        arrays = params if params is not None else init_params(self.cfg, seed)
        expected = init_params(self.cfg, 0) if params is not None else arrays
        for name, ref in expected.items():
            if name not in arrays or tuple(arrays[name].shape) != ref.shape:
                got = None if name not in arrays else tuple(arrays[name].shape)
                raise ValueError(f"parameter {name!r}: expected shape {ref.shape}, got {got}")
        if set(arrays) != set(expected):
            raise ValueError(f"unexpected parameters {sorted(set(arrays) - set(expected))}")
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(arrays[name], dtype=np.float32), requires_grad=requires_grad, name=name)
            for name in expected
        }

    # -- parameter plumbing ------------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            src = arrays[k]
            if src.shape != v.shape:
                raise ValueError(f"parameter {k!r}: shape {src.shape} != {v.shape}")
            v.data = np.array(src, dtype=v.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    # -- forward pieces ----------------------------------------------------

    def _obs_tensor(self, obs) -> Tensor:
        obs = np.asarray(obs)
        cfg = self.cfg
        if obs.ndim != 4 or obs.shape[1:] != (cfg.fov, cfg.fov, cfg.obs_channels):
            raise ValueError(
                f"observations must be (N, {cfg.fov}, {cfg.fov}, {cfg.obs_channels}), got {obs.shape}"
            )
        return Tensor(obs.astype(self.dtype))

    def features(self, obs) -> Tensor:
        """Conv stack, flatten and affine: the pre-GRU encoding ô."""
        p = self.params
        x = self._obs_tensor(obs)
        for li in range(len(self.cfg.conv_channels)):
            x = ops.relu(ops.conv2d(x, p[f"enc.conv{li}.w"], p[f"enc.conv{li}.b"]))
        x = ops.reshape(x, (x.shape[0], -1))
        return ops.relu(ops.affine(x, p["enc.fc.w"], p["enc.fc.b"]))

    def encode_features(self, feats: Tensor, hidden: Tensor) -> Tensor:
        return gru_cell(feats, hidden, _sub(self.params, "enc.gru"))

    def encode(self, obs, hidden) -> Tensor:
        hidden = hidden if isinstance(hidden, Tensor) else Tensor(np.asarray(hidden, dtype=self.dtype))
        return self.encode_features(self.features(obs), hidden)

    def q_values(self, e: Tensor) -> Tensor:
        """Dueling head: V(e) + A(e) - mean(A(e))."""
        p = self.params
        trunk = ops.relu(ops.affine(e, p["head.trunk.w"], p["head.trunk.b"]))
        value = ops.affine(trunk, p["head.v.w"], p["head.v.b"])
        adv = ops.affine(trunk, p["head.a.w"], p["head.a.b"])
        n_act = self.cfg.n_actions
        # V - mean(A) as a (N, 1) column, then replicated across actions
        centre = ops.sub(value, ops.scale(ops.affine(adv, Tensor(np.ones((n_act, 1), dtype=self.dtype))), 1.0 / n_act))
        spread = ops.affine(centre, Tensor(np.ones((1, n_act), dtype=self.dtype)))
        return ops.add(adv, spread)

    def position_embedding(self, obs) -> Tensor:
        """l: embedding of the multi-hot of neighbour cells plus the centre cell."""
        obs = np.asarray(obs)
        cfg = self.cfg
        hot = obs[:, :, :, 1].reshape(len(obs), -1).astype(self.dtype)
        hot[:, (cfg.fov * cfg.fov) // 2] = 1.0
        return ops.affine(Tensor(hot), self.params["pos.w"], self.params["pos.b"])

    def attention_round(self, e: Tensor, l: Tensor, members: Sequence[Sequence[int]],
                        gru: str) -> tuple[Tensor, np.ndarray]:
        """One aggregation round over rows of ``e``.

        ``members[r]`` lists the rows (other than ``r``) that row ``r``
        attends to; rows with no members keep their message. Returns the
        updated messages and the (E, heads) attention weights.
        """
        recv, send = [], []
        for r, mem in enumerate(members):
            if mem:
                recv.append(r)
                send.append(r)
                for s in mem:
                    recv.append(r)
                    send.append(s)
        if not recv:
            return e, np.zeros((0, self.cfg.heads), dtype=self.dtype)
        active = np.zeros(e.shape[0], dtype=bool)
        active[recv] = True
        kv = ops.concat([e, l], axis=-1)
        mixed, weights = multi_head_attention(e, kv, _sub(self.params, "comm.attn"), self.cfg.heads,
                                              np.asarray(recv), np.asarray(send))
        updated = gru_cell(mixed, e, _sub(self.params, f"comm.{gru}"))
        return ops.where_rows(active, updated, e), weights

    def communicate(self, e: Tensor, l: Tensor, request: Sequence[Sequence[int]],
                    neighbors: Sequence[Sequence[int]] | None = None) -> tuple[Tensor, Tensor]:
        """Request round (requested agents aggregate) then reply round.

        When ``neighbors`` is given every request must name one of the
        requester's neighbours.
        """
        n = e.shape[0]
        for i, scope in enumerate(request):
            allowed = set(neighbors[i]) if neighbors is not None else set(range(n)) - {i}
            bad = [j for j in scope if j not in allowed]
            if bad:
                raise ValueError(f"agent {i} requests non-neighbours {bad}")
        e1, _ = self.attention_round(e, l, receive_scopes(request), "gru1")
        e2, _ = self.attention_round(e1, l, request, "gru2")
        return e1, e2


# -- scope rules -----------------------------------------------------------

def argmax_lowest(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest action index."""
    return np.argmax(q, axis=-1)


def mask_neighbor(obs: np.ndarray, cell: tuple[int, int]) -> np.ndarray:
    """Copy of ``obs`` with the agent bit at ``cell`` cleared."""
    r, c = cell
    if obs[r, c, 1] != 1:
        raise ValueError(f"no agent at FOV cell {cell} to mask")
    out = obs.copy()
    out[r, c, 1] = 0
    return out


def temp_action(model: DCCModel, e: Tensor | np.ndarray) -> np.ndarray:
    """Greedy action from the head applied directly to encoder output."""
    e = e if isinstance(e, Tensor) else Tensor(np.atleast_2d(np.asarray(e, dtype=model.dtype)))
    return argmax_lowest(model.q_values(e).data)


def comm_scope(model: DCCModel, obs: np.ndarray, neighbor_cells: Sequence[tuple[int, int]],
               hidden_prev: np.ndarray) -> list[int]:
    """Indices (into ``neighbor_cells``) of neighbours whose removal flips the greedy action."""
    return dcc_scopes(model, obs[None], [list(neighbor_cells)], np.atleast_2d(hidden_prev))[0][0]


def dcc_scopes(model: DCCModel, obs: np.ndarray, neighbor_cells: Sequence[Sequence[tuple[int, int]]],
               hidden: np.ndarray) -> tuple[list[list[int]], Tensor]:
    """Decision-causal scopes for a batch of agents.

    All unmasked and masked observations go through the encoder in one
    batch, sharing each agent's ``hidden``. Returns, per agent, the indices
    into its ``neighbor_cells`` that are requested, and the unmasked
    encodings ``e``.
    """
    n = len(obs)
    rows = [obs]
    owner = []
    for i, cells in enumerate(neighbor_cells):
        for cell in cells:
            rows.append(mask_neighbor(obs[i], cell)[None])
            owner.append(i)
    owner = np.asarray(owner, dtype=np.intp)
    batch = np.concatenate(rows, axis=0)
    hid = np.concatenate([hidden, hidden[owner]], axis=0) if len(owner) else hidden
    e_all = model.encode(batch, hid)
    acts = temp_action(model, e_all)
    base, masked = acts[:n], acts[n:]
    scopes: list[list[int]] = []
    k = 0
    for i, cells in enumerate(neighbor_cells):
        scopes.append([idx for idx in range(len(cells)) if masked[k + idx] != base[i]])
        k += len(cells)
    e = Tensor(e_all.data[:n]) if len(owner) else e_all
    return scopes, e


def rr_n2_scope(neighbor_cells: Sequence[tuple[int, int]], fov: int = 9) -> list[int]:
    """Indices of the ≤2 neighbours nearest the FOV centre (Manhattan, then row/col)."""
    rad = fov // 2
    order = sorted(range(len(neighbor_cells)),
                   key=lambda k: (abs(neighbor_cells[k][0] - rad) + abs(neighbor_cells[k][1] - rad),
                                  neighbor_cells[k][0], neighbor_cells[k][1]))
    return sorted(order[:2])


@dataclass
class ActResult:
    actions: np.ndarray
    scopes: list[list[int]]  # agent indices requested by each agent
    comm_count: int
    hidden: np.ndarray  # e2, carried to the next step
    q: np.ndarray  # (n, n_actions) final Q-values
    temp_actions: np.ndarray | None = None


def act(model: DCCModel, obs: np.ndarray, hidden: np.ndarray,
        neighbors: Sequence[Sequence[tuple[int, tuple[int, int]]]], epsilon: float = 0.0,
        rng: np.random.Generator | None = None, mode: str = "dcc") -> ActResult:
    """Run the full pipeline for all agents of one environment.

    ``neighbors[i]`` holds ``(j, fov_cell)`` pairs as produced by
    :func:`dccmapf.env.neighbors_in_fov`.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    n = len(obs)
    hidden = np.asarray(hidden, dtype=model.dtype)
    cells = [[cell for _, cell in nb] for nb in neighbors]
    if mode == "dcc":
        local, e = dcc_scopes(model, obs, cells, hidden)
    else:
        e = model.encode(obs, hidden)
        local = [rr_n2_scope(c, model.cfg.fov) for c in cells]
    scopes = [[neighbors[i][k][0] for k in local[i]] for i in range(n)]
    if any(scopes):
        l = model.position_embedding(obs)
        _, e2 = model.communicate(e, l, scopes, [[j for j, _ in nb] for nb in neighbors])
    else:
        e2 = e
    q = model.q_values(e2).data
    actions = argmax_lowest(q)
    if epsilon > 0:
        rng = rng or np.random.default_rng()
        explore = rng.random(n) < epsilon
        actions = np.where(explore, rng.integers(0, model.cfg.n_actions, n), actions)
    return ActResult(actions.astype(np.int64), scopes, sum(len(s) for s in scopes), e2.data.copy(), q)
