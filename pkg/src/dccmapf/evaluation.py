"""Benchmark harness: test suites, greedy evaluation, reports and comparisons.

A suite is a directory of instance files plus ``manifest.json``. Reports
are CSV files whose ``#`` header lines carry the suite hash, engine version
and resolved configuration, followed by one row per (size, agents, mode)
cell. Per-case detail goes to a sibling JSON-lines file.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .env import InstanceError, MAPFEnv, generate_map, make_instance, read_instance, write_instance
from .model import MODES, DCCModel, ModelConfig
from .nn import load_checkpoint

MANIFEST = "manifest.json"
CASE_DIR = "cases"
REPORT_COLUMNS = ("size", "agents", "mode", "cases", "success_rate", "mean_steps", "mean_comm_pairs")
COMPARE_COLUMNS = ("size", "agents", "cases", "dcc_success_rate", "rr_n2_success_rate", "dcc_mean_steps",
                   "rr_n2_mean_steps", "dcc_mean_comm_pairs", "rr_n2_mean_comm_pairs", "comm_ratio")
PLOT_COLUMNS = ("size", "agents", "mode", "metric", "value")
METRICS = ("success_rate", "mean_steps", "mean_comm_pairs")
INF = "inf"


class EvaluationError(ValueError):
    """Unusable inputs: unpaired reports, width mismatches, bad suites."""


class ReportError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def step_limit_for(size: int) -> int:
    """256 steps at 40x40, scaled linearly with the side length."""
    return math.ceil(256 * size / 40)


# -- suites ----------------------------------------------------------------

@dataclass
class Case:
    case_id: str
    size: int
    agents: int
    path: Path


@dataclass
class TestSuite:
    root: Path
    seed: int
    density: float
    step_limits: dict
    cases: list[Case]
    warnings: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def cells(self) -> list[tuple[int, int]]:
        return sorted({(c.size, c.agents) for c in self.cases})

    def hash(self) -> str:
        return suite_hash(self.root)


def case_id(size: int, agents: int, k: int) -> str:
    return f"s{size:03d}_a{agents:03d}_c{k:04d}"


def suite_cells(sizes: Sequence[int], agents: Sequence[int], extra_agents_40: Sequence[int] = ()) -> list:
    cells = [(s, a) for s in sizes for a in agents]
    cells += [(40, a) for a in extra_agents_40 if 40 in sizes and a not in agents]
    return sorted(cells)


def generate_suite(out_dir, seed: int = 0, sizes: Sequence[int] = (10, 20, 40),
                   agents: Sequence[int] = (1, 2, 4, 8), cases: int = 50, density: float = 0.3,
                   extra_agents_40: Sequence[int] = (16,), max_maps: int = 200,
                   config: dict | None = None) -> TestSuite:
    """Write a deterministic suite; each cell draws from its own seeded stream."""
    root = Path(out_dir)
    (root / CASE_DIR).mkdir(parents=True, exist_ok=True)
    warnings = []
    written = []
    for size, n in suite_cells(sizes, agents, extra_agents_40):
        if 2 * n > size * size * (1.0 - density):
            warnings.append({"size": size, "agents": n,
                             "reason": f"{n} agents need {2 * n} distinct free cells"})
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, size, n]))
        made = []
        for k in range(cases):
            inst = None
            for _ in range(max_maps):
                try:
                    inst = make_instance(generate_map(size, rng, density), n, rng)
                    break
                except InstanceError:
                    continue
            if inst is None:
                break
            made.append(inst)
        if len(made) < cases:
            warnings.append({"size": size, "agents": n,
                             "reason": f"no feasible instance after {max_maps} maps"})
            continue
        for k, inst in enumerate(made):
            cid = case_id(size, n, k)
            path = root / CASE_DIR / f"{cid}.txt"
            write_instance(path, inst)
            written.append({"id": cid, "size": size, "agents": n, "file": f"{CASE_DIR}/{cid}.txt"})
    limits = {str(s): step_limit_for(s) for s in sorted(set(sizes))}
    manifest = {
        "engine_version": __version__,
        "seed": seed,
        "density": density,
        "sizes": sorted(set(sizes)),
        "agents": sorted(set(agents)),
        "extra_agents_40": sorted(set(extra_agents_40)),
        "cases_per_cell": cases,
        "step_limits": limits,
        "cases": written,
        "warnings": warnings,
        "config": config or {},
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return load_suite(root)


def load_suite(path) -> TestSuite:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise EvaluationError(f"{root} is not a suite: {MANIFEST} missing") from None
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{root / MANIFEST}: {exc}") from None
    cases = [Case(c["id"], int(c["size"]), int(c["agents"]), root / c["file"]) for c in manifest["cases"]]
    missing = [c.case_id for c in cases if not c.path.exists()]
    if missing:
        raise EvaluationError(f"suite {root} is missing case files: {missing[:3]}")
    return TestSuite(root, manifest["seed"], manifest["density"],
                     {int(k): v for k, v in manifest["step_limits"].items()},
                     sorted(cases, key=lambda c: c.case_id), manifest.get("warnings", []), manifest)


def suite_hash(root) -> str:
    """SHA-256 over the instance files in name order."""
    h = hashlib.sha256()
    for path in sorted((Path(root) / CASE_DIR).glob("*.txt")):
        h.update(path.name.encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


# -- evaluation ------------------------------------------------------------

@dataclass
class EpisodeMetrics:
    case_id: str
    size: int
    agents: int
    mode: str
    success: bool
    steps: int
    comm_pairs: int
    trace: list  # per step, per agent: list of requested agent ids

    def to_json(self) -> str:
        return json.dumps({"case": self.case_id, "size": self.size, "agents": self.agents, "mode": self.mode,
                           "success": self.success, "steps": self.steps, "comm_pairs": self.comm_pairs,
                           "trace": self.trace}, sort_keys=True, separators=(",", ":"))


def run_case(model: DCCModel, case: Case, limit: int, mode: str) -> EpisodeMetrics:
    from .training.runner import play

    env = MAPFEnv(read_instance(case.path), step_limit=limit, fov=model.cfg.fov)
    traj = play(model, env, 0.0, None, mode, record=False)
    trace = [[sorted(int(j) for j in s) for s in scopes] for scopes in traj.comm_trace]
    steps = traj.steps if traj.success else limit
    return EpisodeMetrics(case.case_id, case.size, case.agents, mode, traj.success, steps,
                          int(traj.comm_pairs), trace)


def load_model(checkpoint, expected: ModelConfig | None = None) -> tuple[DCCModel, dict]:
    ckpt = load_checkpoint(checkpoint)
    cfg_dict = ckpt.meta.get("config", {}).get("model")
    if cfg_dict is None:
        raise EvaluationError(f"{checkpoint}: no model config embedded")
    cfg = ModelConfig.from_dict(cfg_dict)
    if expected is not None and expected.to_dict() != cfg.to_dict():
        raise EvaluationError(f"{checkpoint}: model config {cfg.to_dict()} does not match {expected.to_dict()}")
    params = {k: v for k, v in ckpt.params.items() if not k.startswith("target/")}
    try:
        model = DCCModel(cfg, params)
    except ValueError as exc:
        raise EvaluationError(f"{checkpoint}: {exc}") from None
    return model, {"step": ckpt.step, "config": ckpt.meta.get("config", {}),
                   "engine_version": ckpt.meta.get("engine_version")}


_worker_model: DCCModel | None = None


def _worker_init(cfg_dict, params):
    global _worker_model
    _worker_model = DCCModel(ModelConfig.from_dict(cfg_dict), params)


def _worker_run(args):
    case, limit, mode = args
    return run_case(_worker_model, case, limit, mode)


def evaluate(checkpoint, suite: TestSuite, mode: str = "dcc", workers: int = 0,
             expected: ModelConfig | None = None) -> tuple[list[EpisodeMetrics], dict]:
    """Greedy rollouts of every case; results are sorted by case id."""
    if mode not in MODES:
        raise EvaluationError(f"unknown mode {mode!r}; expected one of {MODES}")
    model, info = load_model(checkpoint, expected)
    jobs = [(c, suite.step_limits[c.size], mode) for c in suite.cases]
    if workers > 0:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn"), initializer=_worker_init,
                                 initargs=(model.cfg.to_dict(), model.snapshot())) as pool:
            results = list(pool.map(_worker_run, jobs, chunksize=4))
    else:
        results = [run_case(model, *job) for job in jobs]
    return sorted(results, key=lambda m: m.case_id), info


# -- reports ---------------------------------------------------------------

@dataclass
class CellStats:
    size: int
    agents: int
    mode: str
    cases: int
    success_rate: float
    mean_steps: float
    mean_comm_pairs: float

    def row(self) -> list[str]:
        return [str(self.size), str(self.agents), self.mode, str(self.cases), f"{self.success_rate:.6f}",
                f"{self.mean_steps:.6f}", f"{self.mean_comm_pairs:.6f}"]


@dataclass
class Report:
    header: dict
    cells: list[CellStats]

    def cell(self, size: int, agents: int) -> CellStats | None:
        for c in self.cells:
            if (c.size, c.agents) == (size, agents):
                return c
        return None


def aggregate(metrics: Iterable[EpisodeMetrics]) -> list[CellStats]:
    """Exact per-cell means over every case; cells without cases are omitted."""
    groups: dict[tuple[int, int, str], list[EpisodeMetrics]] = {}
    for m in metrics:
        groups.setdefault((m.size, m.agents, m.mode), []).append(m)
    out = []
    for (size, n, mode), ms in sorted(groups.items()):
        k = len(ms)
        out.append(CellStats(size, n, mode, k, sum(m.success for m in ms) / k,
                             sum(m.steps for m in ms) / k, sum(m.comm_pairs for m in ms) / k))
    return out


def format_report(cells: Sequence[CellStats], header: dict) -> str:
    buf = io.StringIO()
    for key in sorted(header):
        buf.write(f"# {key}={header[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for c in cells:
        w.writerow(c.row())
    return buf.getvalue()


def report_header(suite: TestSuite, mode: str, info: dict) -> dict:
    return {
        "suite_hash": suite.hash(),
        "suite_seed": suite.seed,
        "mode": mode,
        "engine_version": __version__,
        "checkpoint_step": info.get("step", 0),
        "config": json.dumps(info.get("config", {}), sort_keys=True, separators=(",", ":")),
    }


def write_report(out_dir, suite: TestSuite, mode: str, metrics: list[EpisodeMetrics], info: dict,
                 stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"report_{mode}"
    csv_path, detail_path = out / f"{stem}.csv", out / f"{stem}.jsonl"
    detail_path.write_text("".join(m.to_json() + "\n" for m in metrics))
    csv_path.write_text(format_report(aggregate(metrics), report_header(suite, mode, info)))
    return csv_path, detail_path


def parse_report(text: str, path="<report>") -> Report:
    header: dict = {}
    cells = []
    seen_columns = False
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if not sep:
                raise ReportError(path, lineno, "header line must be '# key=value'")
            header[key] = value
            continue
        fields = next(csv.reader([line]))
        if not seen_columns:
            if tuple(fields) != REPORT_COLUMNS:
                raise ReportError(path, lineno, f"expected columns {','.join(REPORT_COLUMNS)}")
            seen_columns = True
            continue
        if len(fields) != len(REPORT_COLUMNS):
            raise ReportError(path, lineno, f"expected {len(REPORT_COLUMNS)} fields, got {len(fields)}")
        try:
            cells.append(CellStats(int(fields[0]), int(fields[1]), fields[2], int(fields[3]),
                                   float(fields[4]), float(fields[5]), float(fields[6])))
        except ValueError as exc:
            raise ReportError(path, lineno, str(exc)) from None
    if not seen_columns and cells == [] and any(not ln.startswith("#") and ln.strip() for ln in text.splitlines()):
        raise ReportError(path, 1, "missing column header")
    return Report(header, cells)


def read_report(path) -> Report:
    return parse_report(Path(path).read_text(), path)


def comm_ratio(dcc: float, rr: float) -> str:
    if dcc == 0:
        return "1.000000" if rr == 0 else INF
    return f"{rr / dcc:.6f}"


def compare_modes(dcc: Report, rr: Report) -> str:
    """Side-by-side table of two reports over the same suite."""
    ha, hb = dcc.header.get("suite_hash"), rr.header.get("suite_hash")
    if not ha or ha != hb:
        raise EvaluationError(f"suite hash mismatch ({ha} vs {hb}); reports are not paired")
    buf = io.StringIO()
    buf.write(f"# suite_hash={ha}\n# engine_version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    other = {(c.size, c.agents): c for c in rr.cells}
    for a in sorted(dcc.cells, key=lambda c: (c.size, c.agents)):
        b = other.get((a.size, a.agents))
        if b is None:
            continue
        w.writerow([a.size, a.agents, a.cases, f"{a.success_rate:.6f}", f"{b.success_rate:.6f}",
                    f"{a.mean_steps:.6f}", f"{b.mean_steps:.6f}", f"{a.mean_comm_pairs:.6f}",
                    f"{b.mean_comm_pairs:.6f}", comm_ratio(a.mean_comm_pairs, b.mean_comm_pairs)])
    return buf.getvalue()


def plot_rows(reports: Sequence[Report]) -> str:
    """Long-format rows: one per (cell, metric)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for rep in reports:
        for c in rep.cells:
            for metric in METRICS:
                w.writerow([c.size, c.agents, c.mode, metric, f"{getattr(c, metric):.6f}"])
    return buf.getvalue()


def recount_comm(trace: list) -> tuple[int, int]:
    """(sum of |C_i|, sum of |C̄_j|) recomputed from a per-step scope trace."""
    requests = replies = 0
    for scopes in trace:
        requests += sum(len(s) for s in scopes)
        recv: dict[int, int] = {}
        for i, s in enumerate(scopes):
            for j in s:
                recv[j] = recv.get(j, 0) + 1
        replies += sum(recv.values())
    return requests, replies
