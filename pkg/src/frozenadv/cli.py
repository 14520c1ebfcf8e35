"""Command-line entry point: ``frozenadv <command> [options]``.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attack import KINDS
from .harness import (ARCHS, ConfigError, ExperimentConfig, ScenarioReport, Workdir, export_report, get_dataset,
                      get_heads, get_upstream, import_report, report_csv, report_json, run_experiment)


def _config(args, **extra) -> ExperimentConfig:
    over = {"master_seed": args.seed, **extra}
    if args.config:
        return ExperimentConfig.from_file(args.config, **over)
    return ExperimentConfig.parse("", **over)


def cmd_gen_data(args):
    cfg = _config(args)
    ds = get_dataset(cfg, Workdir(args.workdir))
    print(f"dataset: {', '.join(f'{k}={len(v)}' for k, v in ds.splits.items())} -> {Path(args.workdir) / 'dataset.frad'}")


def cmd_pretrain(args):
    cfg = _config(args)
    m = get_upstream(cfg, Workdir(args.workdir), args.arch)
    lg = m.pretrain_log
    msg = f"arch {args.arch}: {m.n_params()} params"
    if "heldout_before" in lg:
        msg += f", held-out loss {lg['heldout_before']:.4f} -> {lg['heldout_after']:.4f}"
    print(msg)


def cmd_train_heads(args):
    cfg = _config(args)
    th = get_heads(cfg, Workdir(args.workdir), args.target)
    for task, m in th.clean.items():
        print(f"{args.target} {task}: val {m['val']:.2f} test {m['test']:.2f}")


def cmd_attack(args):
    extra = {"scenarios": (args.scenario,), "epsilon": args.epsilon, "alpha": args.alpha, "n_iters": args.iters}
    if args.target:
        extra["targets"] = (args.target,)
    cfg = _config(args, **extra)
    report = run_experiment(cfg, threads=args.threads, workdir=args.workdir)
    out = Path(args.workdir) / "rows"
    out.mkdir(parents=True, exist_ok=True)
    name = args.scenario + (f"_{args.target}" if args.target else "")
    export_report(report, "json", out / f"{name}.json")
    sys.stdout.write(report_csv(report))


def cmd_report(args):
    files = sorted((Path(args.workdir) / "rows").glob("*.json"))
    if not files:
        raise RuntimeError(f"no scenario rows under {Path(args.workdir) / 'rows'}; run the attack command first")
    rows = []
    for p in files:
        rows.extend(import_report(p).rows)
    seen = {(r.scenario, r.task, r.target_arch, r.rep): r for r in rows}   # later files win on duplicates
    report = ScenarioReport(list(seen.values()))
    report.rows = report.sorted_rows()
    text = report_csv(report) if args.format == "csv" else report_json(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run_all(args):
    cfg = _config(args)
    report = run_experiment(cfg, threads=args.threads, workdir=args.workdir)
    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    export_report(report, "csv", wd / "report.csv")
    export_report(report, "json", wd / "report.json")
    sys.stdout.write(report_csv(report))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="work", help="artifact directory (default: ./work)")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for attacks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="frozenadv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, config=True):
        sp = sub.add_parser(name, parents=[common], help=help)
        if config:
            sp.add_argument("--config", default=None, help="key = value config file")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    add("pretrain", cmd_pretrain, "pretrain one encoder").add_argument("--arch", choices=ARCHS, required=True)
    add("train-heads", cmd_train_heads, "train the four downstream heads").add_argument(
        "--target", choices=ARCHS, required=True)
    sp = add("attack", cmd_attack, "run one scenario on the sampled test items")
    sp.add_argument("--scenario", choices=KINDS, required=True)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--target", choices=ARCHS, default=None, help="default: every target in the config")
    sp = add("report", cmd_report, "merge scenario rows from the workdir into one report", config=False)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out", default=None, help="write here instead of stdout")
    sp = add("run-all", cmd_run_all, "full pipeline from one config file", config=False)
    sp.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
