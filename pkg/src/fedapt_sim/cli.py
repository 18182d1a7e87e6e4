"""Command-line experiment runner.

    fedapt-sim run --config cfg.json --mode fedapt --rounds 30 --out runs/a
    fedapt-sim compare runs/a runs/b --out runs/cmp

Any config field can be overridden with a dotted flag, e.g.
``--fed.rounds=50`` or ``--training.unsup.lam=0.5``; named flags below are
shortcuts for the common ones. Exit codes: 0 success, 1 runtime failure
(with round/client context), 2 invalid config or arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import (
    apply_overrides,
    compare_runs,
    config_from_dict,
    config_to_dict,
    run_experiment,
)
from .federation import FederationRoundError
from .numerics import DegenerateInputError, InvalidArgumentError

_FLAG_PATHS = {
    "mode": "fed.mode",
    "supervision": "fed.supervision",
    "rounds": "fed.rounds",
    "beta": "partition.beta",
    "domains": "world.num_domains",
    "clients_per_domain": "partition.clients_per_domain",
    "tau_q": "fed.tau_q",
    "key_scheme": "fed.key_scheme",
    "out": "output_dir",
    "repeats": "repeats",
}

_SEED_PATHS = ("world.seed", "partition.seed", "encoder.seed", "fed.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedapt-sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated experiment")
    run.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    run.add_argument("--mode", choices=["fedapt", "promptfl", "clipfc", "zeroshot"])
    run.add_argument("--supervision", choices=["supervised", "unsupervised"])
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", type=int, help="base seed for world/partition/encoder/fed")
    run.add_argument("--beta", help="Dirichlet beta or 'iid'")
    run.add_argument("--domains", type=int)
    run.add_argument("--clients-per-domain", dest="clients_per_domain", type=int)
    run.add_argument("--tau-q", dest="tau_q", type=float)
    run.add_argument("--key-scheme", dest="key_scheme",
                     choices=["rand_U", "rand_N", "rand_01", "rand_O", "zeros"])
    run.add_argument("--out")
    run.add_argument("--repeats", type=int)
    run.add_argument("--no-figures", action="store_true",
                     help="skip rendering PNG figures next to the data files")

    cmp_p = sub.add_parser("compare", help="tabulate per-domain accuracy across runs")
    cmp_p.add_argument("run_dirs", nargs="+", help="completed run directories")
    cmp_p.add_argument("--out", help="directory for comparison.csv/.txt/.png")
    cmp_p.add_argument("--no-figures", action="store_true")
    return parser


def _collect_overrides(args: argparse.Namespace, extras: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[path] = str(value)
    if getattr(args, "seed", None) is not None:
        for path in _SEED_PATHS:
            overrides[path] = str(args.seed)
    for extra in extras:
        if not (extra.startswith("--") and "=" in extra):
            raise InvalidArgumentError(
                f"unrecognized argument {extra!r} (expected --dotted.path=value)"
            )
        path, raw = extra[2:].split("=", 1)
        overrides[path] = raw
    return overrides


def _run_command(args: argparse.Namespace, extras: list[str]) -> int:
    doc = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            print(f"error: config file not found: {cfg_path}", file=sys.stderr)
            return 2
        try:
            doc = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as err:
            print(f"error: {cfg_path}:{err.lineno}:{err.colno}: {err.msg}", file=sys.stderr)
            return 2
    try:
        doc = apply_overrides(doc, _collect_overrides(args, extras))
        cfg = config_from_dict(doc)
    except (InvalidArgumentError, TypeError) as err:
        print(f"error: invalid config: {err}", file=sys.stderr)
        return 2
    try:
        out = run_experiment(cfg, figures=not args.no_figures)
    except FederationRoundError as err:
        print(f"error: run failed at {err}", file=sys.stderr)
        return 1
    except (InvalidArgumentError, DegenerateInputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"run complete: {out}")
    print(json.dumps(config_to_dict(cfg), sort_keys=True))
    return 0


def _compare_command(args: argparse.Namespace) -> int:
    try:
        text = compare_runs(
            args.run_dirs,
            out_path=Path(args.out) if args.out else None,
            figures=not args.no_figures,
        )
    except InvalidArgumentError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    if args.command == "run":
        return _run_command(args, extras)
    return _compare_command(args)


if __name__ == "__main__":
    raise SystemExit(main())
