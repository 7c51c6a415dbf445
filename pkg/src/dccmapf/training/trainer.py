"""Runner/learner orchestration, logging and checkpoints.

With ``runners = 0`` episodes are generated in-process between learner
steps. With ``runners > 0`` each runner is a separate process owning its own
environment and a read-only parameter snapshot; it ships finished episodes
over a queue, and the learner process is the single ingress point into the
replay buffer. Snapshots are published as whole messages, so a runner
always switches between complete parameter sets.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import queue
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import __version__
from ..config import RunConfig, parse_stop_when
from ..model import DCCModel, ModelConfig
from ..nn import Checkpoint, load_checkpoint, save_checkpoint
from .curriculum import CurriculumState
from .learner import Learner
from .replay import NotReady, PrioritizedBuffer
from .runner import run_episode

log = logging.getLogger(__name__)

CKPT_NAME = "checkpoint_{:08d}.ckpt"


def epsilon_at(step: int, cfg) -> float:
    anneal = max(1, int(cfg.total_steps * cfg.eps_anneal_fraction))
    frac = min(1.0, step / anneal)
    return float(cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start))


def beta_at(step: int, cfg) -> float:
    frac = min(1.0, step / max(1, cfg.total_steps))
    return float(cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start))


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("checkpoint_*.ckpt"))
    return found[-1] if found else None


def _logged_time(log_path: Path) -> float:
    """Wall time of the last train.log line; keeps checkpoints free of timing data."""
    if not log_path.exists():
        return 0.0
    last = 0.0
    for line in log_path.read_text().splitlines():
        for kv in line.split():
            if kv.startswith("time="):
                last = float(kv[5:])
    return last


@dataclass
class TrainSummary:
    steps: int
    episodes: int
    stop_reason: str
    elapsed: float
    rates: dict = field(default_factory=dict)


def _runner_main(wid, model_cfg, train_cfg, seed, snap_q, out_q, stop_evt):
    model = DCCModel(ModelConfig.from_dict(model_cfg))
    rng = np.random.default_rng(seed)
    msg = snap_q.get()
    version = -1
    while msg is not None and not stop_evt.is_set():
        try:
            while True:
                msg = snap_q.get_nowait()
                if msg is None:
                    return
        except queue.Empty:
            pass
        ver, params, eps, tasks = msg
        if ver != version:
            model.load_snapshot(params)
            version = ver
        task = tuple(tasks[int(rng.integers(len(tasks)))])
        res = run_episode(task, model, rng, eps, train_cfg["mode"], train_cfg["step_limit"],
                          train_cfg["seq_len"], train_cfg["nstep"], train_cfg["gamma"],
                          train_cfg["priority_floor"], train_cfg["burn_in"])
        out_q.put((wid, version, res))


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir, resume: bool = False):
        self.cfg = cfg
        t = cfg.training
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.rng = np.random.default_rng(t.seed)
        self.learner = Learner(cfg.model, seed=t.seed, lr=t.lr, betas=(t.adam_beta1, t.adam_beta2),
                               eps=t.adam_eps, grad_clip=t.grad_clip or None, gamma=t.gamma,
                               nstep=t.nstep, target_sync=t.target_sync, double_q=t.double_q,
                               priority_floor=t.priority_floor, dump_dir=str(self.out_dir))
        self.buffer = PrioritizedBuffer(t.capacity, t.alpha, t.priority_floor)
        c = cfg.curriculum
        self.curriculum = CurriculumState((c.start_size, c.start_agents), c.size_step, c.max_size,
                                          c.max_agents, c.window, c.threshold)
        self.actor = DCCModel(cfg.model, self.learner.model.snapshot())
        self.episodes = 0
        self.elapsed = 0.0
        self._run_start: float | None = None
        self.stop_when = parse_stop_when(c.stop_when) if c.stop_when else []
        self.last_loss = float("nan")
        if resume:
            path = latest_checkpoint(self.out_dir)
            if path is None:
                raise FileNotFoundError(f"no checkpoint to resume in {self.out_dir}")
            self.load(path)
        self._log = open(self.out_dir / "train.log", "a")

    # -- persistence -------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        params = self.learner.model.snapshot()
        params.update({f"target/{k}": v for k, v in self.learner.target.snapshot().items()})
        opt = self.learner.optimizer
        return Checkpoint(
            params=params,
            step=self.learner.step,
            meta={
                "engine_version": __version__,
                "config": self.cfg.to_dict(),
                "curriculum": self.curriculum.to_dict(),
                "episodes": self.episodes,
                "last_sync_step": self.learner.last_sync_step,
            },
            optimizer={"name": "adam", "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                       "eps": opt.eps, "step_count": opt.step_count},
            moments=opt.state_arrays(),
        )

    def save(self) -> Path:
        path = self.out_dir / CKPT_NAME.format(self.learner.step)
        save_checkpoint(path, self.checkpoint())
        return path

    def load(self, path) -> None:
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("config", {}).get("model") != self.cfg.to_dict()["model"]:
            raise ValueError(f"checkpoint {path} was trained with a different model config")
        online = {k: v for k, v in ckpt.params.items() if not k.startswith("target/")}
        target = {k[len("target/"):]: v for k, v in ckpt.params.items() if k.startswith("target/")}
        self.learner.model.load_snapshot(online)
        self.learner.target.load_snapshot(target or online)
        self.learner.optimizer.load_state_arrays(ckpt.moments, ckpt.optimizer.get("step_count", 0))
        self.learner.step = ckpt.step
        self.learner.last_sync_step = ckpt.meta.get("last_sync_step", 0)
        self.curriculum.load_dict(ckpt.meta["curriculum"])
        self.episodes = ckpt.meta.get("episodes", 0)
        self.elapsed = _logged_time(self.out_dir / "train.log")
        self.actor.load_snapshot(online)

    # -- bookkeeping -------------------------------------------------------

    def wall_time(self) -> float:
        """Training seconds so far, including earlier resumed sessions."""
        if self._run_start is None:
            return self.elapsed
        return self.elapsed + time.monotonic() - self._run_start

    def rates(self) -> dict:
        return {t: self.curriculum.rate(t) for t in self.curriculum.unlocked}

    def ingest(self, res) -> None:
        for seg in res.segments:
            self.buffer.add(seg)
        self.episodes += 1
        new = self.curriculum.update(res.task, res.success)
        if new:
            log.info("unlocked tasks %s", new)

    def write_log(self, loss: float) -> None:
        parts = [f"step={self.learner.step}", f"loss={loss:.6g}", f"buffer={len(self.buffer)}",
                 f"episodes={self.episodes}", f"eps={epsilon_at(self.learner.step, self.cfg.training):.4f}",
                 f"time={self.wall_time():.1f}"]
        for (size, n), rate in self.rates().items():
            parts.append(f"success_{size}x{n}={rate:.3f}")
            parts.append(f"n_{size}x{n}={self.curriculum.recorded((size, n))}")
        self._log.write(" ".join(parts) + "\n")
        self._log.flush()

    def _stop_reason(self, steps_target: int, deadline: float | None,
                     should_stop: Callable[["Trainer"], bool] | None) -> str | None:
        if self.learner.step >= steps_target:
            return "steps"
        if deadline is not None and time.monotonic() >= deadline:
            return "time"
        if self.stop_when and all(
            self.curriculum.recorded(task) >= self.curriculum.window and self.curriculum.rate(task) >= rate
            for task, rate in self.stop_when
        ):
            return "stop_when"
        if should_stop is not None and should_stop(self):
            return "callback"
        return None

    def _after_step(self, loss: float) -> None:
        t = self.cfg.training
        self.last_loss = loss
        step = self.learner.step
        if step % t.snapshot_interval == 0:
            self.actor.load_snapshot(self.learner.model.snapshot())
        if t.log_every and step % t.log_every == 0:
            self.write_log(loss)
        if t.checkpoint_every and step % t.checkpoint_every == 0:
            self.save()

    def _learn(self) -> bool:
        t = self.cfg.training
        try:
            segs, w, handle = self.buffer.sample(t.batch_size, self.rng, beta_at(self.learner.step, t))
        except NotReady:
            return False
        loss, prio = self.learner.learner_step(segs, w)
        self.buffer.update_priorities(handle, prio)
        self._after_step(loss)
        return True

    # -- main loops --------------------------------------------------------

    def run(self, steps: int | None = None, time_budget: float | None = None,
            should_stop: Callable[["Trainer"], bool] | None = None) -> TrainSummary:
        """Train until ``steps`` total learner steps, the time budget or a stop rule."""
        t = self.cfg.training
        target = t.total_steps if steps is None else steps
        budget = t.time_budget if time_budget is None else time_budget
        start = time.monotonic()
        self._run_start = start
        deadline = start + budget if budget else None
        if self.learner.step == 0 and latest_checkpoint(self.out_dir) is None:
            self.save()
        if t.runners > 0:
            reason = self._run_parallel(target, deadline, should_stop)
        else:
            reason = self._run_inline(target, deadline, should_stop)
        if t.log_every and self.learner.step % t.log_every:
            self.write_log(self.last_loss)
        self.elapsed += time.monotonic() - start
        self._run_start = None
        self.save()
        return TrainSummary(self.learner.step, self.episodes, reason, self.elapsed,
                            {f"{a}x{b}": r for (a, b), r in self.rates().items()})

    def _run_inline(self, target, deadline, should_stop) -> str:
        t = self.cfg.training
        while True:
            reason = self._stop_reason(target, deadline, should_stop)
            if reason:
                return reason
            collected = 0
            eps = epsilon_at(self.learner.step, t)
            while collected < t.actor_steps_per_update or len(self.buffer) < t.batch_size:
                task = self.curriculum.sample(self.rng)
                res = run_episode(task, self.actor, self.rng, eps, t.mode, t.step_limit, t.seq_len,
                                  t.nstep, t.gamma, t.priority_floor, t.burn_in)
                self.ingest(res)
                collected += res.steps
                if deadline is not None and time.monotonic() >= deadline:
                    return "time"
            self._learn()

    def _run_parallel(self, target, deadline, should_stop) -> str:
        t = self.cfg.training
        ctx = mp.get_context("spawn")
        out_q = ctx.Queue()
        stop_evt = ctx.Event()
        snap_qs = [ctx.Queue() for _ in range(t.runners)]
        train_cfg = {k: getattr(t, k) for k in ("mode", "step_limit", "seq_len", "nstep", "gamma",
                                                 "priority_floor", "burn_in")}
        procs = []
        for wid in range(t.runners):
            seed = int(np.random.SeedSequence([t.seed, wid + 1]).generate_state(1)[0])
            p = ctx.Process(target=_runner_main,
                            args=(wid, self.cfg.model.to_dict(), train_cfg, seed, snap_qs[wid], out_q, stop_evt),
                            daemon=True)
            p.start()
            procs.append(p)
        version = 0

        def publish():
            msg = (version, self.learner.model.snapshot(), epsilon_at(self.learner.step, t),
                   [list(x) for x in self.curriculum.unlocked])
            for q in snap_qs:
                q.put(msg)

        publish()
        try:
            while True:
                reason = self._stop_reason(target, deadline, should_stop)
                if reason:
                    return reason
                block = len(self.buffer) < t.batch_size
                try:
                    while True:
                        _, _, res = out_q.get(timeout=1.0) if block else out_q.get_nowait()
                        self.ingest(res)
                        block = len(self.buffer) < t.batch_size
                except queue.Empty:
                    pass
                if self._learn() and self.learner.step % t.snapshot_interval == 0:
                    version += 1
                    publish()
        finally:
            stop_evt.set()
            for q in snap_qs:
                q.put(None)
            for p in procs:
                p.join(timeout=5)
                if p.is_alive():
                    p.terminate()

    def close(self) -> None:
        self._log.close()
