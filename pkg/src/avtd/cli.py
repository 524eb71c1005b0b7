"""Command-line entry point.

    avtd online      --env pendulum --seed 0 1 --steps 30000 --reg plain
    avtd log-dataset --env noisy_pendulum --utd 9 --reg reset10k --dataset data/np.avtd
    avtd offline     --mode shuffled --dataset data/np.avtd --utd 1 9
    avtd avtd        --pool ln ln+wd0.01 wd0.01 --epsilon 0.1
    avtd report      runs/a runs/b

Any config key can also be set with ``--set section.key=value`` or through
an INI file given with ``--config``.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import KEYS, RunConfig, apply_overrides, load_config


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with [run], [sac], [reg], [avtd], [offline], [eval] sections")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any dotted config key, e.g. sac.batch_size=128")
    p.add_argument("--env")
    p.add_argument("--seed", nargs="+", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--utd", nargs="+", type=int)
    p.add_argument("--reg")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="seeds run in parallel processes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avtd", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("online", "avtd", "log-dataset", "offline"):
        p = sub.add_parser(name)
        _common(p)
        if name == "avtd":
            p.add_argument("--pool", nargs="+")
            p.add_argument("--epsilon", type=float)
        if name in ("offline", "log-dataset"):
            p.add_argument("--dataset")
        if name == "offline":
            p.add_argument("--mode", choices=("stream", "shuffled"), default="stream")
            p.add_argument("--regs", nargs="+")
    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+")
    p.add_argument("--window", type=int)
    p.add_argument("--step-scale", type=float, default=1.1)
    p.add_argument("--json", action="store_true")
    return ap


KIND = {"online": "online", "avtd": "avtd", "log-dataset": "log_dataset"}


def resolve_config(args) -> RunConfig:
    raw: dict[str, str] = load_config(args.config) if args.config else {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        raw[key.strip()] = value.strip()
    if args.command == "offline":
        raw["run.kind"] = "offline_shuffled" if args.mode == "shuffled" else "offline_stream"
    else:
        raw["run.kind"] = KIND[args.command]

    flags = {"env": "run.env", "steps": "run.steps", "out": "run.out", "jobs": "run.jobs",
             "reg": "reg.preset", "epsilon": "avtd.epsilon", "dataset": "offline.dataset"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            raw[key] = str(v)
    if args.seed:
        raw["run.seeds"] = " ".join(map(str, args.seed))
    if getattr(args, "pool", None):
        raw["avtd.pool"] = " ".join(args.pool)
    if getattr(args, "regs", None):
        raw["offline.regs"] = " ".join(args.regs)
    if args.utd:
        if args.command == "offline":
            raw["offline.utds"] = " ".join(map(str, args.utd))
        elif len(args.utd) == 1:
            raw["sac.utd"] = str(args.utd[0])
        else:
            raise SystemExit("--utd takes several values only for offline sweeps")

    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise SystemExit(f"unknown config keys: {unknown}")
    kind = raw.pop("run.kind")
    try:
        return apply_overrides(RunConfig(kind=kind), raw)
    except ValueError as e:
        raise SystemExit(str(e)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"avtd {args.command}: error: {e}", file=sys.stderr)
        return 2


def _run(args) -> int:
    if args.command == "report":
        rep = harness.report(args.runs, args.window, args.step_scale)
        print(json.dumps(rep, indent=2) if args.json else harness.format_report(rep))
        return 0
    cfg = resolve_config(args)
    if cfg.kind == "online":
        log = harness.run_online(cfg)
    elif cfg.kind == "avtd":
        log = harness.run_avtd_cli(cfg)
    elif cfg.kind == "log_dataset":
        if not cfg.dataset:
            raise SystemExit("log-dataset needs --dataset PATH")
        d, h = harness.run_log_dataset(cfg, cfg.dataset)
        print(f"wrote {d} and {h}")
        return 0
    else:
        log = harness.run_offline_analysis(cfg)
    print(f"{len(log)} records written to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
