"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
The default output root is ``$DCCMAPF_OUT`` (``./runs`` when unset).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get("DCCMAPF_OUT", "runs"))


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def cmd_train(args) -> int:
    from .config import load_config
    from .training import NumericalError, Trainer

    overrides = _overrides(args.set)
    if args.runners is not None:
        overrides["training.runners"] = args.runners
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    cfg = load_config(args.config, overrides)
    out = Path(args.out) if args.out else output_root() / f"train_seed{cfg.training.seed}"
    trainer = Trainer(cfg, out, resume=args.resume)
    try:
        summary = trainer.run(steps=args.steps, time_budget=args.time_budget)
    except NumericalError as exc:
        print(f"error: {exc}; diagnostics: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        trainer.close()
    rates = " ".join(f"success_{k}={v:.3f}" for k, v in summary.rates.items())
    print(f"steps={summary.steps} episodes={summary.episodes} stop={summary.stop_reason} {rates}".rstrip())
    print(f"checkpoint={out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .config import load_config
    from .evaluation import evaluate, load_suite, write_report

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    suite = load_suite(args.suite)
    expected = load_config(args.config).model if args.config else None
    metrics, info = evaluate(ckpt, suite, args.mode, workers=args.workers, expected=expected)
    out = Path(args.out) if args.out else output_root() / "eval"
    csv_path, detail = write_report(out, suite, args.mode, metrics, info, args.stem)
    print(f"report={csv_path}\ndetail={detail}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .evaluation import compare_modes, read_report

    table = compare_modes(read_report(args.dcc), read_report(args.rr_n2))
    _emit(table, args.out)
    return EXIT_OK


def cmd_suite(args) -> int:
    from .config import load_config
    from .evaluation import generate_suite

    overrides = _overrides(args.set)
    for key in ("seed", "cases", "density"):
        if getattr(args, key) is not None:
            overrides[f"evaluation.{key}"] = getattr(args, key)
    for key in ("sizes", "agents", "extra_agents_40"):
        if getattr(args, key) is not None:
            overrides[f"evaluation.{key}"] = getattr(args, key)
    cfg = load_config(args.config, overrides)
    ev = cfg.evaluation
    out = Path(args.out) if args.out else output_root() / f"suite_seed{ev.seed}"
    suite = generate_suite(out, ev.seed, ev.sizes, ev.agents, ev.cases, ev.density, ev.extra_agents_40,
                           config=cfg.to_dict())
    for w in suite.warnings:
        print(f"warning: skipped {w['size']}x{w['agents']}: {w['reason']}", file=sys.stderr)
    print(f"suite={out} cases={len(suite.cases)} hash={suite.hash()}")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    from .evaluation import plot_rows, read_report

    _emit(plot_rows([read_report(p) for p in args.reports]), args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .oracles import run_selftest

    ok = run_selftest(trials=args.trials, seed=args.seed, out=sys.stdout)
    return EXIT_OK if ok else EXIT_NUMERIC


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dccmapf", description="Decision causal communication for MAPF.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the runner/learner loop")
    t.add_argument("--config", help="INI file with [model]/[training]/[curriculum] sections")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    t.add_argument("--out", help="run directory")
    t.add_argument("--steps", type=int, help="total learner steps (overrides training.total_steps)")
    t.add_argument("--time-budget", type=float, help="wall-clock seconds")
    t.add_argument("--runners", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint on a suite")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", required=True)
    e.add_argument("--mode", choices=("dcc", "rr-n2"), default="dcc")
    e.add_argument("--out", help="report directory")
    e.add_argument("--stem", help="report file stem (default report_<mode>)")
    e.add_argument("--workers", type=int, default=0)
    e.add_argument("--config", help="reject the checkpoint unless its model section matches this file")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="paired table of a dcc and an rr-n2 report")
    c.add_argument("dcc")
    c.add_argument("rr_n2")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("suite", help="generate a test suite")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--sizes", type=_ints)
    s.add_argument("--agents", type=_ints)
    s.add_argument("--extra-agents-40", dest="extra_agents_40", type=_ints)
    s.add_argument("--cases", type=int, help="cases per cell (default 50)")
    s.add_argument("--density", type=float)
    s.set_defaults(func=cmd_suite)

    d = sub.add_parser("plotdata", help="long-format CSV for plotting")
    d.add_argument("reports", nargs="+")
    d.add_argument("--out")
    d.set_defaults(func=cmd_plotdata)

    st = sub.add_parser("selftest", help="run the oracle and invariant checks")
    st.add_argument("--trials", type=int, default=100)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .evaluation import EvaluationError, ReportError
    from .nn import CheckpointError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, EvaluationError, ReportError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
