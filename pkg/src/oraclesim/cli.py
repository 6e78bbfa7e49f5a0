"""Command line entry point: ``oraclesim simulate|verify|gen``.

Exit status is 0 when everything passes, 1 when a criterion fails and 2 on
a configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields, replace
from pathlib import Path

from . import acceptance
from .exceptions import ConfigurationError
from .harness import OUTPUT_ENV, output_dir, run, write_outputs
from .instances import MODES, RunConfig, generate_instance, instance_to_dict, preset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("oraclesim")


def _flag_type(f):
    hint = typing.get_type_hints(RunConfig)[f.name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return args[0] if args else hint


def _add_config_flags(p: argparse.ArgumentParser, with_mode_all: bool) -> None:
    modes = MODES + (("all",) if with_mode_all else ())
    p.add_argument("--mode", choices=modes, default="quadratic")
    p.add_argument("--config", metavar="PATH", help="JSON file whose keys override the flags")
    for f in fields(RunConfig):
        if f.name == "mode":
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = _flag_type(f)
        if kind is bool:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def _overrides(args: argparse.Namespace) -> dict:
    out = {f.name: getattr(args, f.name) for f in fields(RunConfig) if f.name != "mode"}
    out = {k: v for k, v in out.items() if v is not None}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - {f.name for f in fields(RunConfig)})
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {unknown}")
        out.update(data)
    return out


def configs_from_args(args: argparse.Namespace) -> list[RunConfig]:
    """Preset for the mode, then command-line flags, then the config file."""
    over = _overrides(args)
    mode = over.pop("mode", args.mode)
    modes = MODES if mode == "all" else (mode,)
    return [replace(preset(m), **over).validate() for m in modes]


def _cmd_simulate(args) -> int:
    cfgs = configs_from_args(args)
    reports = [run(c) for c in cfgs]
    paths = write_outputs(reports, cfgs[0].output_path)
    for rep in reports:
        failed = [k for k, ok in rep.criteria.items() if not ok]
        status = "PASS" if rep.passed else "FAIL (" + ", ".join(failed) + ")"
        expected = rep.expected_calls
        if isinstance(expected, dict):
            expected = sum(expected.values())
        print(
            f"{rep.mode}: {status}  max_rel_error={rep.max_rel_error:.3e}  "
            f"calls={rep.calls_total}/{expected}  rounds={rep.rounds}"
        )
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def _cmd_verify(args) -> int:
    results = acceptance.run_all(args.seed)
    if args.json:
        print(json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True, default=float))
    else:
        for r in results:
            print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _cmd_gen(args) -> int:
    cfgs = configs_from_args(args)
    data = {c.mode: {"config": c.to_dict(), "instance": instance_to_dict(generate_instance(c))} for c in cfgs}
    if args.stdout:
        print(json.dumps(data, sort_keys=True))
        return EXIT_OK
    out = output_dir(cfgs[0].output_path)
    out.mkdir(parents=True, exist_ok=True)
    for mode, body in data.items():
        path = out / f"{mode}_instance.json"
        path.write_text(json.dumps(body, sort_keys=True) + "\n", encoding="utf-8")
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oraclesim",
        description="Simulate long-context transformers with a length-capped oracle.",
        epilog=f"Reports go to --output-path, else ${OUTPUT_ENV}, else ./oraclesim-out.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="run one mode (or all) and write JSON/CSV reports")
    _add_config_flags(sim, with_mode_all=True)
    sim.set_defaults(func=_cmd_simulate)

    ver = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--json", action="store_true", help="structured results per criterion")
    ver.set_defaults(func=_cmd_verify)

    gen = sub.add_parser("gen", parents=[common], help="write the seeded instance for a configuration")
    _add_config_flags(gen, with_mode_all=True)
    gen.add_argument("--stdout", action="store_true", help="print instead of writing a file")
    gen.set_defaults(func=_cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
