"""Command-line entry point: ``flchallenge <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 budget violation,
4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import BudgetError, ConfigError, FLChallengeError
from ..flcore import COMPLETED
from ..synthdata import load_federation
from .bundles import bundle_by_name
from .commands import (EXTERNAL, INTERNAL, cmd_central_baseline, cmd_demographics,
                       cmd_evaluate, cmd_gen_data, cmd_leaderboard, cmd_rank, cmd_run,
                       challenge_entries, compare_phases, train_entries)
from .config import load_config

log = logging.getLogger("flchallenge")


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    return load_config(args.config, overrides)


def _federation(cfg, path):
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"file {path} does not exist", "--data")
        return load_federation(path)
    return cfg.data.load(cfg.seed)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def do_gen_data(args):
    cfg = _config(args)
    fed = cmd_gen_data(cfg)
    _emit({str(ds.primary_site): ds.counts() for ds in fed})


def do_run(args) -> int:
    cfg = _config(args)
    fed = _federation(cfg, args.data)
    entry = None
    if args.bundle:
        try:
            entry = bundle_by_name(args.bundle, cfg.model.d, cfg.rounds.n_rounds)
        except KeyError:
            raise ConfigError(f"unknown bundle {args.bundle!r}", "--bundle") from None
    record = cmd_run(cfg, fed, entry)
    _emit(record.summary() | {"wall_time_secs": round(record.wall_time, 3)})
    if record.termination != COMPLETED:
        print(f"budget violation: run stopped with {record.termination}", file=sys.stderr)
        return BudgetError.exit_code
    return 0


def do_central(args) -> None:
    cfg = _config(args)
    _, reports = cmd_central_baseline(cfg, _federation(cfg, args.data))
    _emit([r.to_dict(per_image=False) for r in reports])


def do_evaluate(args) -> None:
    cfg = _config(args)
    fed = _federation(cfg, args.data)
    groupings = args.grouping or list(cfg.groupings)
    reports = cmd_evaluate(args.checkpoint, fed, args.split or cfg.split, groupings,
                           args.mode, args.out)
    _emit([r.to_dict(per_image=False) for r in reports])


def do_leaderboard(args) -> None:
    cfg = _config(args)
    fed = _federation(cfg, args.data)
    entries = challenge_entries(cfg)
    phases = {"internal": [INTERNAL], "external": [EXTERNAL],
              "both": [INTERNAL, EXTERNAL]}[args.phase]
    if args.train and INTERNAL in phases:
        train_entries(cfg, fed, entries, reuse=True)
        central = cfg.output_dir / "runs" / "central"
        if args.central and not (central / "predictor.json").exists():
            cmd_central_baseline(cfg, fed, central)
    central = cfg.output_dir / "runs" / "central"
    extra = {"central": central} if (central / "predictor.json").exists() else None
    boards = {}
    for phase in phases:
        out = cfg.output_dir / ("leaderboard_internal" if phase == INTERNAL
                                else "leaderboard_external")
        boards[phase] = cmd_leaderboard(entries, fed, phase, cfg, out, unranked=extra)
        print(f"# {phase}")
        print(boards[phase].to_csv(), end="")
    if len(boards) == 2:
        _emit(compare_phases(boards[INTERNAL], boards[EXTERNAL],
                             cfg.output_dir / "phase_comparison.json"))


def do_demographics(args) -> None:
    cfg = _config(args)
    fed = _federation(cfg, args.data)
    bundle = cmd_demographics(challenge_entries(cfg), fed, args.split or cfg.split,
                              cfg.output_dir / "demographics")
    print(f"{len(bundle.race_rows)} race rows, {len(bundle.age_rows)} age rows written to "
          f"{cfg.output_dir / 'demographics'}")


def do_rank(args) -> None:
    columns = args.columns.split(",") if args.columns else None
    lower = args.lower_better.split(",") if args.lower_better else ()
    result = cmd_rank(args.csv, columns, lower, args.out)
    print(result.to_csv(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flchallenge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value (dotted path), repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="federation JSON or CSV; regenerated from the seed if omitted")

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic federation")
    p.set_defaults(func=do_gen_data)

    p = sub.add_parser("run", parents=[common, data], help="train one federated model")
    p.add_argument("--bundle", help="train a built-in strategy bundle instead of the config model")
    p.set_defaults(func=do_run)

    p = sub.add_parser("central", parents=[common, data], help="pooled-data baseline")
    p.set_defaults(func=do_central)

    p = sub.add_parser("evaluate", parents=[common, data], help="score saved checkpoints")
    p.add_argument("--checkpoint", required=True, help="run directory or predictor.json")
    p.add_argument("--split", choices=["Train", "Test1", "Test2", "External"])
    p.add_argument("--grouping", action="append",
                   choices=["BySite", "Overall", "ByRace", "ByAgeDecade"])
    p.add_argument("--mode", choices=["global", "per_site", "ensemble", "global_only"])
    p.add_argument("--out", help="write reports JSON here")
    p.set_defaults(func=do_evaluate)

    p = sub.add_parser("leaderboard", parents=[common, data],
                       help="rank the built-in bundles")
    p.add_argument("--phase", choices=["internal", "external", "both"], default="both")
    p.add_argument("--no-train", dest="train", action="store_false",
                   help="fail instead of training bundles without checkpoints")
    p.add_argument("--no-central", dest="central", action="store_false",
                   help="skip the unranked pooled-data row")
    p.set_defaults(func=do_leaderboard)

    p = sub.add_parser("demographics", parents=[common, data],
                       help="race and age subgroup tables for saved bundles")
    p.add_argument("--split", choices=["Train", "Test1", "Test2"])
    p.set_defaults(func=do_demographics)

    p = sub.add_parser("rank", help="consensus-rank a metric CSV")
    p.add_argument("csv")
    p.add_argument("--columns", help="comma-separated metric columns to use")
    p.add_argument("--lower-better", help="comma-separated columns where lower is better")
    p.add_argument("--out", help="directory for ranks.csv and ranks.json")
    p.set_defaults(func=do_rank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except BudgetError as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return exc.exit_code
    except FLChallengeError as exc:
        kind = "config error" if isinstance(exc, ConfigError) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    return code or 0


if __name__ == "__main__":
    raise SystemExit(main())
