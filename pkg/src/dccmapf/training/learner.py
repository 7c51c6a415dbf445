"""Single learner: recurrent replay of segments and the multi-step TD loss."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model import DCCModel, ModelConfig
from ..nn import Adam, Tape, Tensor, backward, ops
from .replay import SequenceSegment
from .targets import bootstrap_plan, td_targets


class NumericalError(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class BatchLayout:
    """Where each (state, agent) of each segment lives in the flat batch."""

    lane_start: np.ndarray  # (B,) first lane of each segment
    n_lanes: int
    n_steps: int  # max states over the batch
    row: np.ndarray  # (n_steps, n_lanes) index into the feature rows; -1 if absent
    obs: np.ndarray  # (R, fov, fov, 6) observations in row order
    requests: list  # per state: request lists over lanes, or None when empty
    cut: np.ndarray  # (n_steps, n_lanes) True where burn-in ends before that state


def build_layout(segments: list[SequenceSegment]) -> BatchLayout:
    counts = np.array([s.n_agents for s in segments])
    lane_start = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    n_lanes = int(counts.sum())
    n_steps = max(s.n_states for s in segments)
    row = np.full((n_steps, n_lanes), -1, dtype=np.int64)
    unpacked = [s.observations() for s in segments]
    obs_rows = []
    r = 0
    for t in range(n_steps):
        for b, seg in enumerate(segments):
            if t < seg.n_states:
                n = seg.n_agents
                row[t, lane_start[b]:lane_start[b] + n] = np.arange(r, r + n)
                obs_rows.append(unpacked[b][t])
                r += n
    cut = np.zeros((n_steps, n_lanes), dtype=bool)
    for b, seg in enumerate(segments):
        if seg.burn:
            cut[seg.burn, lane_start[b]:lane_start[b] + seg.n_agents] = True
    requests = []
    for t in range(n_steps):
        req = None
        for b, seg in enumerate(segments):
            if t < seg.n_states and seg.scopes[t].any():
                if req is None:
                    req = [[] for _ in range(n_lanes)]
                base = lane_start[b]
                for i, j in zip(*np.nonzero(seg.scopes[t])):
                    req[base + i].append(int(base + j))
        requests.append(req)
    return BatchLayout(lane_start, n_lanes, n_steps, row, np.concatenate(obs_rows, axis=0), requests, cut)


def unroll(model: DCCModel, segments: list[SequenceSegment], layout: BatchLayout) -> Tensor:
    """Replay the network over every stored state; returns (n_steps * n_lanes, A) Q-values.

    Row ``t * n_lanes + lane`` holds the Q-values of that lane at state t.
    Communication uses the stored scopes. No gradient flows back into
    burn-in states.
    """
    feats = model.features(layout.obs)
    pos = model.position_embedding(layout.obs)
    zero_f = Tensor(np.zeros((1, feats.shape[1]), dtype=model.dtype))
    zero_p = Tensor(np.zeros((1, pos.shape[1]), dtype=model.dtype))
    feats = ops.concat([feats, zero_f], axis=0)
    pos = ops.concat([pos, zero_p], axis=0)
    pad_row = feats.shape[0] - 1
    h = Tensor(np.concatenate([s.hidden0 for s in segments], axis=0).astype(model.dtype))
    qs = []
    for t in range(layout.n_steps):
        if layout.cut[t].any():
            h = ops.where_rows(layout.cut[t], Tensor(h.data.copy()), h)
        idx = np.where(layout.row[t] >= 0, layout.row[t], pad_row)
        e = model.encode_features(ops.gather_rows(feats, idx), h)
        req = layout.requests[t]
        if req is not None:
            _, e = model.communicate(e, ops.gather_rows(pos, idx), req)
        qs.append(model.q_values(e))
        h = e
    return ops.concat(qs, axis=0)


@dataclass
class LossParts:
    loss: Tensor
    td_error: np.ndarray  # per training row
    row_segment: np.ndarray  # segment id of each training row


class Learner:
    def __init__(self, model_cfg: ModelConfig, params=None, seed: int = 0, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, grad_clip: float | None = 40.0,
                 gamma: float = 0.99, nstep: int = 2, target_sync: int = 2000,
                 double_q: bool = True, priority_floor: float = 1e-4, dump_dir: str | None = None):
        self.model = DCCModel(model_cfg, params, seed=seed, requires_grad=True)
        self.target = DCCModel(model_cfg, self.model.snapshot())
        self.optimizer = Adam(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, grad_clip=grad_clip)
        self.gamma = gamma
        self.nstep = nstep
        self.target_sync = target_sync
        self.double_q = double_q
        self.priority_floor = priority_floor
        self.dump_dir = dump_dir
        self.step = 0
        self.last_sync_step = 0

    def sync_target(self) -> None:
        self.target.load_snapshot(self.model.snapshot())
        self.last_sync_step = self.step

    def targets(self, segments, layout, q_online: np.ndarray) -> list[np.ndarray]:
        """Per segment (T, n) returns, bootstrapped from the target network."""
        q_target = unroll(self.target, segments, layout).data
        lanes = layout.n_lanes
        out = []
        for b, seg in enumerate(segments):
            n = seg.n_agents
            L = seg.n_states
            base = layout.lane_start[b]
            rows = (np.arange(L)[:, None] * lanes + base + np.arange(n)[None, :])
            qt = q_target[rows]  # (L, n, A)
            if self.double_q:
                a_star = q_online[rows].argmax(axis=-1)
            else:
                a_star = qt.argmax(axis=-1)
                a_star[:L - 1] = seg.actions
            boot = np.take_along_axis(qt, a_star[..., None], axis=-1)[..., 0]
            k = seg.burn
            out.append(td_targets(seg.rewards[k:].astype(np.float64), boot[k:].astype(np.float64), seg.length,
                                  seg.terminal, self.gamma, self.nstep))
        return out

    def loss(self, segments: list[SequenceSegment], weights: np.ndarray) -> LossParts:
        layout = build_layout(segments)
        with Tape() as tape:
            q_all = unroll(self.model, segments, layout)
            returns = self.targets(segments, layout, q_all.data)
            rows, acts, tgt, w, seg_id = [], [], [], [], []
            for b, seg in enumerate(segments):
                n, T = seg.n_agents, seg.length
                base = layout.lane_start[b]
                steps = seg.burn + np.arange(T)
                r = (steps[:, None] * layout.n_lanes + base + np.arange(n)[None, :]).reshape(-1)
                rows.append(r)
                acts.append(seg.actions[seg.burn:seg.burn + T].reshape(-1).astype(np.int64))
                tgt.append(returns[b].reshape(-1))
                w.append(np.full(T * n, weights[b]))
                seg_id.append(np.full(T * n, b))
            rows = np.concatenate(rows)
            q_taken = ops.take_per_row(ops.gather_rows(q_all, rows), np.concatenate(acts))
            target = np.concatenate(tgt).astype(q_taken.dtype)
            diff = ops.sub(Tensor(target), q_taken)
            weighted = ops.mul_const(ops.square(diff), np.concatenate(w).astype(q_taken.dtype))
            loss = ops.scale(ops.sum(weighted), 1.0 / len(rows))
        self._tape = tape
        return LossParts(loss, diff.data.copy(), np.concatenate(seg_id))

    def learner_step(self, segments: list[SequenceSegment], weights=None):
        """One optimizer step; returns (loss, new per-segment priorities)."""
        weights = np.ones(len(segments), dtype=np.float32) if weights is None else np.asarray(weights)
        self.model.zero_grad()
        parts = self.loss(segments, weights)
        value = parts.loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at learner step {self.step}",
                                 self._dump(segments, weights))
        backward(self._tape, parts.loss)
        self._tape = None
        self.optimizer.step(self.model.params)
        self.step += 1
        if self.step % self.target_sync == 0:
            self.sync_target()
        prio = np.full(len(segments), self.priority_floor)
        np.maximum.at(prio, parts.row_segment, np.abs(parts.td_error) + self.priority_floor)
        return value, prio

    def _dump(self, segments, weights) -> str | None:
        if not self.dump_dir:
            return None
        path = Path(self.dump_dir) / f"bad_batch_step{self.step}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"weights": weights}
        for b, s in enumerate(segments):
            arrays[f"seg{b}_obs"] = s.obs_packed
            arrays[f"seg{b}_rewards"] = s.rewards
            arrays[f"seg{b}_actions"] = s.actions
        np.savez(path, **arrays)
        return str(path)


__all__ = ["BatchLayout", "Learner", "NumericalError", "bootstrap_plan", "build_layout", "unroll"]
