import json

import pytest

from dccmapf import cli
from dccmapf.evaluation import PLOT_COLUMNS, METRICS, read_report

SMALL_SET = ["model.conv_channels=4 4 8 8", "model.hidden=12", "model.pos_embed=4", "model.heads=2",
             "model.key_dim=4", "training.runners=0", "training.batch_size=4", "training.step_limit=16",
             "training.actor_steps_per_update=8", "training.capacity=64", "training.checkpoint_every=0"]


def _sets():
    out = []
    for s in SMALL_SET:
        out += ["--set", s]
    return out


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture
def trained(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--out", str(out), "--steps", "0", *_sets())
    assert code == 0
    return out


@pytest.fixture
def suite_dir(tmp_path, capsys):
    out = tmp_path / "suite"
    code, stdout, _ = run(capsys, "suite", "--out", str(out), "--seed", "2", "--sizes", "10",
                          "--agents", "1,2", "--cases", "2", "--extra-agents-40", "")
    assert code == 0 and "hash=" in stdout
    return out


def test_train_zero_steps_writes_checkpoint(trained):
    assert (trained / "checkpoint_00000000.ckpt").exists()


def test_train_resume(tmp_path, capsys, trained):
    code, out, _ = run(capsys, "train", "--out", str(trained), "--steps", "2", "--resume", *_sets())
    assert code == 0 and "steps=2" in out
    code, out, _ = run(capsys, "train", "--out", str(trained), "--steps", "3", "--resume", *_sets())
    assert code == 0 and "steps=3" in out


def test_train_config_errors(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "x"), "--set", "training.bogus=1")
    assert code == 2 and "training.bogus" in err
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "x"), "--set", "training.gamma=2")
    assert code == 2 and "training.gamma" in err
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nbatch_size = many\n")
    code, _, err = run(capsys, "train", "--config", str(bad), "--out", str(tmp_path / "y"))
    assert code == 2 and "training.batch_size" in err
    code, _, _ = run(capsys, "train", "--out", str(tmp_path / "z"), "--resume", *_sets())
    assert code == 2


def test_train_numerical_failure(tmp_path, capsys, monkeypatch):
    from dccmapf.training import NumericalError, Trainer

    def boom(self, *a, **k):
        raise NumericalError("non-finite loss nan", str(tmp_path / "dump.npz"))

    monkeypatch.setattr(Trainer, "run", boom)
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "n"), "--steps", "1", *_sets())
    assert code == 3 and "dump.npz" in err


def test_usage_errors(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "nonsense")[0] == 2
    assert run(capsys, "train", "--steps", "many")[0] == 2
    assert run(capsys, "--version")[0] == 0


def test_missing_checkpoint_no_files(tmp_path, capsys, suite_dir):
    out = tmp_path / "eval"
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "nope.ckpt"),
                       "--suite", str(suite_dir), "--out", str(out))
    assert code == 2 and not out.exists()


def test_evaluate_compare_plotdata(tmp_path, capsys, trained, suite_dir):
    ckpt = trained / "checkpoint_00000000.ckpt"
    out = tmp_path / "eval"
    for mode in ("dcc", "rr-n2"):
        code, stdout, _ = run(capsys, "evaluate", "--checkpoint", str(ckpt), "--suite", str(suite_dir),
                              "--mode", mode, "--out", str(out))
        assert code == 0
    first = (out / "report_dcc.csv").read_bytes()
    run(capsys, "evaluate", "--checkpoint", str(ckpt), "--suite", str(suite_dir), "--out", str(out))
    assert (out / "report_dcc.csv").read_bytes() == first

    code, table, _ = run(capsys, "compare", str(out / "report_dcc.csv"), str(out / "report_rr-n2.csv"))
    assert code == 0 and table.splitlines()[2].startswith("size,agents,cases")
    assert len(table.splitlines()) == 3 + 2

    plot = tmp_path / "plot.csv"
    code, _, _ = run(capsys, "plotdata", str(out / "report_dcc.csv"), str(out / "report_rr-n2.csv"),
                     "--out", str(plot))
    rows = plot.read_text().splitlines()
    assert code == 0 and rows[0] == ",".join(PLOT_COLUMNS)
    n_cells = len(read_report(out / "report_dcc.csv").cells) * 2
    assert len(rows) - 1 == n_cells * len(METRICS)

    rep = read_report(out / "report_dcc.csv")
    assert json.loads(rep.header["config"])["model"]["hidden"] == 12


def test_compare_unpaired_exit_2(tmp_path, capsys, trained):
    ckpt = trained / "checkpoint_00000000.ckpt"
    reports = []
    for seed in (1, 2):
        sdir = tmp_path / f"s{seed}"
        run(capsys, "suite", "--out", str(sdir), "--seed", str(seed), "--sizes", "10", "--agents", "1",
            "--cases", "1")
        run(capsys, "evaluate", "--checkpoint", str(ckpt), "--suite", str(sdir), "--out", str(tmp_path / f"e{seed}"))
        reports.append(str(tmp_path / f"e{seed}" / "report_dcc.csv"))
    code, _, err = run(capsys, "compare", *reports)
    assert code == 2 and "mismatch" in err


def test_evaluate_width_mismatch_exit_2(tmp_path, capsys, trained, suite_dir):
    ini = tmp_path / "wide.ini"
    ini.write_text("[model]\nhidden = 32\n")
    code, _, _ = run(capsys, "evaluate", "--checkpoint", str(trained / "checkpoint_00000000.ckpt"),
                     "--suite", str(suite_dir), "--config", str(ini), "--out", str(tmp_path / "w"))
    assert code == 2


def test_plotdata_errors_and_empty(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("size,agents,mode,cases,success_rate,mean_steps,mean_comm_pairs\n10,1,dcc\n")
    code, _, err = run(capsys, "plotdata", str(bad))
    assert code == 2 and ":2:" in err
    empty = tmp_path / "empty.csv"
    empty.write_text("# suite_hash=x\nsize,agents,mode,cases,success_rate,mean_steps,mean_comm_pairs\n")
    code, out, _ = run(capsys, "plotdata", str(empty))
    assert code == 0 and out.splitlines() == [",".join(PLOT_COLUMNS)]


def test_suite_regenerate_equal(tmp_path, capsys, suite_dir):
    again = tmp_path / "again"
    code, out, _ = run(capsys, "suite", "--out", str(again), "--seed", "2", "--sizes", "10", "--agents", "1,2",
                       "--cases", "2", "--extra-agents-40", "")
    assert code == 0
    for a in sorted(suite_dir.rglob("*")):
        if a.is_file():
            assert a.read_bytes() == (again / a.relative_to(suite_dir)).read_bytes()


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DCCMAPF_OUT", str(tmp_path / "root"))
    code, _, _ = run(capsys, "suite", "--seed", "4", "--sizes", "10", "--agents", "1", "--cases", "1")
    assert code == 0 and (tmp_path / "root" / "suite_seed4" / "manifest.json").exists()


def test_selftest(capsys):
    code, out, _ = run(capsys, "selftest", "--trials", "5")
    assert code == 0
    assert all(line.startswith("PASS") for line in out.splitlines())


def test_checkpoints_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", "--out", str(tmp_path / name), "--steps", "2", "--seed", "7", *_sets())[0] == 0
    for ck in ("checkpoint_00000000.ckpt", "checkpoint_00000002.ckpt"):
        assert (tmp_path / "a" / ck).read_bytes() == (tmp_path / "b" / ck).read_bytes()
