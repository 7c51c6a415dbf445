import json

import numpy as np
import pytest

from dccmapf import evaluation as ev
from dccmapf.config import RunConfig, load_config
from dccmapf.env import GridMap, Instance, distance_field, read_instance, write_instance
from dccmapf.model import DCCModel
from dccmapf.nn import Checkpoint, save_checkpoint
from dccmapf.oracles import flood_fill

from .conftest import SMALL


def make_checkpoint(path, model_cfg=SMALL, seed=0, step=0):
    cfg = RunConfig(model=model_cfg)
    model = DCCModel(model_cfg, seed=seed)
    save_checkpoint(path, Checkpoint(model.snapshot(), step, {"engine_version": "test", "config": cfg.to_dict()}))
    return path


@pytest.fixture
def suite(tmp_path):
    return ev.generate_suite(tmp_path / "suite", seed=3, sizes=(10,), agents=(1, 2, 4), cases=4, extra_agents_40=())


@pytest.fixture
def ckpt(tmp_path):
    return make_checkpoint(tmp_path / "model.ckpt")


# -- suites -------------------------------------------------------------------

def test_step_limits():
    assert ev.step_limit_for(40) == 256
    assert ev.step_limit_for(80) == 512
    assert ev.step_limit_for(10) == 64
    assert ev.step_limit_for(15) == 96


def test_suite_regeneration_byte_identical(tmp_path):
    a = ev.generate_suite(tmp_path / "a", seed=5, sizes=(10, 20), agents=(2, 4), cases=3, extra_agents_40=())
    b = ev.generate_suite(tmp_path / "b", seed=5, sizes=(10, 20), agents=(2, 4), cases=3, extra_agents_40=())
    assert a.hash() == b.hash()
    assert (tmp_path / "a" / ev.MANIFEST).read_bytes() == (tmp_path / "b" / ev.MANIFEST).read_bytes()
    c = ev.generate_suite(tmp_path / "c", seed=6, sizes=(10, 20), agents=(2, 4), cases=3, extra_agents_40=())
    assert c.hash() != a.hash()


def test_suite_case_count_arithmetic(tmp_path):
    s = ev.generate_suite(tmp_path / "s", seed=0, sizes=(10, 20), agents=(1, 2, 4), cases=7, extra_agents_40=())
    assert len(s.cases) == 2 * 3 * 7
    assert s.cells() == [(10, 1), (10, 2), (10, 4), (20, 1), (20, 2), (20, 4)]


def test_suite_instances_valid(suite):
    for case in suite.cases:
        inst = read_instance(case.path)
        inst.validate()
        assert inst.map.size == case.size and inst.n_agents == case.agents
        assert abs(inst.map.obstacles.mean() - 0.3) < 0.25
        for s, g in zip(inst.starts, inst.goals):
            assert flood_fill(inst.map.obstacles.tolist(), tuple(g))[s[0]][s[1]] >= 0


def test_suite_infeasible_cell_warned(tmp_path):
    s = ev.generate_suite(tmp_path / "s", seed=0, sizes=(4,), agents=(1, 8), cases=2, extra_agents_40=())
    assert {c.agents for c in s.cases} == {1}
    assert s.warnings and s.warnings[0]["agents"] == 8
    assert json.loads((tmp_path / "s" / ev.MANIFEST).read_text())["warnings"] == s.warnings


def test_suite_extra_agents_only_at_40():
    assert ev.suite_cells((10, 40), (1, 2), (16,)) == [(10, 1), (10, 2), (40, 1), (40, 2), (40, 16)]
    assert ev.suite_cells((10,), (1,), (16,)) == [(10, 1)]


def test_suite_roundtrip(suite):
    again = ev.load_suite(suite.root)
    assert [c.case_id for c in again.cases] == [c.case_id for c in suite.cases]
    assert again.step_limits == {10: 64}
    assert again.hash() == suite.hash()


def test_load_suite_errors(tmp_path):
    with pytest.raises(ev.EvaluationError):
        ev.load_suite(tmp_path)
    (tmp_path / ev.MANIFEST).write_text("{not json")
    with pytest.raises(ev.EvaluationError):
        ev.load_suite(tmp_path)


def test_hash_changes_with_content(suite):
    before = suite.hash()
    path = suite.cases[0].path
    path.write_text(path.read_text() + "\n")
    assert suite.hash() != before


# -- evaluation -----------------------------------------------------------------

def test_goal_adjacent_single_agent(tmp_path):
    root = tmp_path / "tiny"
    (root / ev.CASE_DIR).mkdir(parents=True)
    inst = Instance(GridMap(np.zeros((6, 6), bool)), [(2, 2)], [(2, 3)])
    write_instance(root / ev.CASE_DIR / "s006_a001_c0000.txt", inst)
    (root / ev.MANIFEST).write_text(json.dumps({
        "seed": 0, "density": 0.0, "step_limits": {"6": 10},
        "cases": [{"id": "s006_a001_c0000", "size": 6, "agents": 1, "file": "cases/s006_a001_c0000.txt"}]}))
    suite = ev.load_suite(root)
    # a model whose head always prefers "right"
    model = DCCModel(SMALL, seed=0)
    params = model.snapshot()
    params["head.a.w"][:] = 0
    params["head.a.b"][:] = [0, 0, 0, 1, 0]
    path = tmp_path / "right.ckpt"
    save_checkpoint(path, Checkpoint(params, 0, {"config": RunConfig(model=SMALL).to_dict()}))
    (m,), _ = ev.evaluate(path, suite, "dcc")
    assert m.success and m.steps == 1 and m.comm_pairs == 0


def test_unsolved_case_counts_limit(suite, ckpt):
    metrics, _ = ev.evaluate(ckpt, suite, "dcc")
    for m in metrics:
        assert m.steps <= suite.step_limits[m.size] and m.comm_pairs >= 0
        if not m.success:
            assert m.steps == suite.step_limits[m.size]
    assert [m.case_id for m in metrics] == sorted(m.case_id for m in metrics)


@pytest.mark.parametrize("mode", ["dcc", "rr-n2"])
def test_comm_recount(suite, ckpt, mode):
    metrics, _ = ev.evaluate(ckpt, suite, mode)
    for m in metrics:
        requests, replies = ev.recount_comm(m.trace)
        assert m.comm_pairs == requests == replies
    if mode == "rr-n2":
        assert any(m.comm_pairs > 0 for m in metrics if m.agents > 1)


def test_width_mismatch_rejected(suite, tmp_path):
    other = SMALL.__class__(**{**SMALL.to_dict(), "conv_channels": (4, 4, 8, 8), "hidden": 16})
    path = make_checkpoint(tmp_path / "wide.ckpt", other)
    with pytest.raises(ev.EvaluationError):
        ev.evaluate(path, suite, "dcc", expected=SMALL)
    with pytest.raises(ev.EvaluationError):
        ev.evaluate(path, suite, "broadcast")


def test_parallel_matches_serial(suite, ckpt):
    a, _ = ev.evaluate(ckpt, suite, "dcc")
    b, _ = ev.evaluate(ckpt, suite, "dcc", workers=2)
    assert [m.to_json() for m in a] == [m.to_json() for m in b]


def test_report_deterministic(suite, ckpt, tmp_path):
    texts = []
    for k in range(2):
        metrics, info = ev.evaluate(ckpt, suite, "dcc")
        csv_path, detail = ev.write_report(tmp_path / f"r{k}", suite, "dcc", metrics, info)
        texts.append((csv_path.read_bytes(), detail.read_bytes()))
    assert texts[0] == texts[1]
    rep = ev.read_report(tmp_path / "r0" / "report_dcc.csv")
    assert rep.header["suite_hash"] == suite.hash() and rep.header["mode"] == "dcc"
    assert json.loads(rep.header["config"])["model"]["hidden"] == 12
    assert len(rep.cells) == 3


# -- aggregation and reports -----------------------------------------------------

def _m(size, agents, mode, success, steps, comm=0):
    return ev.EpisodeMetrics(f"s{size}_{steps}", size, agents, mode, success, steps, comm, [])


def test_aggregate_examples():
    ms = [_m(10, 1, "dcc", k < 150, 10) for k in range(200)]
    (cell,) = ev.aggregate(ms)
    assert cell.success_rate == 0.75 and cell.cases == 200
    (cell,) = ev.aggregate([_m(10, 2, "dcc", True, 10), _m(10, 2, "dcc", False, 256)])
    assert cell.mean_steps == 133.0
    assert ev.aggregate([]) == []


def test_report_roundtrip():
    cells = ev.aggregate([_m(10, 1, "dcc", True, 5, 0), _m(20, 4, "dcc", False, 128, 9)])
    text = ev.format_report(cells, {"suite_hash": "abc", "mode": "dcc"})
    assert text.splitlines()[2] == ",".join(ev.REPORT_COLUMNS)
    rep = ev.parse_report(text)
    assert rep.cells == cells and rep.header == {"mode": "dcc", "suite_hash": "abc"}
    assert rep.cell(20, 4).mean_comm_pairs == 9.0 and rep.cell(40, 1) is None


@pytest.mark.parametrize("text, line", [
    ("size,agents\n", 1),
    ("# k=v\n" + ",".join(ev.REPORT_COLUMNS) + "\n10,1,dcc,1,1.0\n", 3),
    (",".join(ev.REPORT_COLUMNS) + "\n10,x,dcc,1,1.0,2.0,3.0\n", 2),
    ("# broken\n", 1),
])
def test_malformed_report_line_numbers(text, line):
    with pytest.raises(ev.ReportError) as info:
        ev.parse_report(text)
    assert info.value.line == line


def test_compare_identical_ratio_one():
    cells = ev.aggregate([_m(10, 2, "dcc", True, 5, 4), _m(10, 4, "dcc", True, 7, 0)])
    rep = ev.Report({"suite_hash": "h"}, cells)
    rows = ev.compare_modes(rep, rep).splitlines()
    assert rows[2] == ",".join(ev.COMPARE_COLUMNS)
    assert [r.split(",")[-1] for r in rows[3:]] == ["1.000000", "1.000000"]


def test_compare_ratio_and_inf():
    assert float(ev.comm_ratio(2.42, 36.88)) == pytest.approx(15.24, abs=0.01)
    assert ev.comm_ratio(0.0, 3.0) == ev.INF


def test_compare_rejects_unpaired():
    a = ev.Report({"suite_hash": "h1"}, [])
    b = ev.Report({"suite_hash": "h2"}, [])
    with pytest.raises(ev.EvaluationError):
        ev.compare_modes(a, b)
    with pytest.raises(ev.EvaluationError):
        ev.compare_modes(ev.Report({}, []), ev.Report({}, []))


def test_plot_rows_count():
    cells = ev.aggregate([_m(10, 1, "dcc", True, 5), _m(10, 2, "dcc", True, 5), _m(20, 2, "dcc", False, 9)])
    out = ev.plot_rows([ev.Report({}, cells), ev.Report({}, cells[:1])]).splitlines()
    assert out[0] == ",".join(ev.PLOT_COLUMNS)
    assert len(out) - 1 == (3 + 1) * len(ev.METRICS)
    assert ev.plot_rows([ev.Report({}, [])]).splitlines() == [",".join(ev.PLOT_COLUMNS)]


def test_recount_identity():
    trace = [[[1], [], [1]], [[1, 2], [0], []]]
    assert ev.recount_comm(trace) == (5, 5)
