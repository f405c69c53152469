"""Command line entry point.

``qmpc run <scenario> [--config path] [--set k=v ...] [--out dir] [--seed n] [--jobs n]``
``qmpc list``
``qmpc validate --config path``

Config files are YAML with a ``scenario`` name and a flat ``params`` mapping.
The output directory defaults to ``$QMPC_OUT/<scenario>``.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import yaml

from . import __version__, outputs, scenarios


class ConfigError(ValueError):
    pass


def load_config(path) -> tuple[str | None, dict]:
    """Read ``scenario`` and ``params`` from a YAML file."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(doc) - {"scenario", "params"}
    if unknown:
        raise ConfigError(f"config {path}: unknown top-level keys {sorted(unknown)}")
    params = doc.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError(f"config {path}: 'params' must be a mapping")
    return doc.get("scenario"), params


def parse_set(items) -> dict:
    """``key=value`` pairs with YAML-typed values."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {item!r}: {exc}") from exc
    return out


def resolve(scenario: str | None, config: str | None, sets, seed=None, jobs=None) -> tuple[str, dict]:
    """Merge defaults, config file and flags into validated parameters."""
    params: dict = {}
    if config is not None:
        cfg_scenario, params = load_config(config)
        if scenario is None:
            scenario = cfg_scenario
        elif cfg_scenario is not None and cfg_scenario != scenario:
            raise ConfigError(f"config is for scenario {cfg_scenario!r}, not {scenario!r}")
    if scenario is None:
        raise ConfigError("no scenario given")
    params = {**params, **parse_set(sets)}
    for key, val in (("seed", seed), ("jobs", jobs)):
        if val is not None:
            if key not in scenarios.DEFAULTS.get(scenario, {}):
                raise ConfigError(f"--{key} does not apply to scenario {scenario!r}")
            params[key] = val
    try:
        return scenario, scenarios.resolve_params(scenario, params)
    except (KeyError, TypeError, ValueError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ConfigError(str(msg)) from exc


def _cmd_list(args) -> int:
    for name in scenarios.SCENARIOS:
        print(name)
        for key, val in scenarios.DEFAULTS[name].items():
            print(f"  {key}: {val!r}")
    return 0


def _cmd_validate(args) -> int:
    name, params = resolve(None, args.config, args.set)
    print(f"{args.config}: valid {name} config ({len(params)} parameters)")
    return 0


def _cmd_run(args) -> int:
    name, params = resolve(args.scenario, args.config, args.set, args.seed, args.jobs)
    out_dir = Path(args.out) if args.out else outputs.default_out_dir(name)
    outputs.ensure_writable(out_dir)  # fail before any computation
    t0 = time.perf_counter()
    result = scenarios.RUNNERS[name](params)
    elapsed = time.perf_counter() - t0
    manifest = outputs.RunManifest(name, result.params, params.get("seed"),
                                   timings_s={"scenario": elapsed})
    t1 = time.perf_counter()
    files = outputs.emit_outputs(result, manifest, out_dir)
    print(f"{name}: {len(files)} files in {out_dir} "
          f"(compute {elapsed:.1f} s, output {time.perf_counter() - t1:.1f} s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmpc", description="MPC for quantum state preparation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its outputs")
    run.add_argument("scenario", choices=scenarios.SCENARIOS)
    run.add_argument("--config", help="YAML config with 'scenario' and 'params'")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one parameter")
    run.add_argument("--out", help="output directory (default $QMPC_OUT/<scenario>)")
    run.add_argument("--seed", type=int, help="seed for random simplexes")
    run.add_argument("--jobs", type=int, help="worker processes for sweeps")
    run.set_defaults(func=_cmd_run)

    lst = sub.add_parser("list", help="list scenarios and their defaults")
    lst.set_defaults(func=_cmd_list)

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("--config", required=True)
    val.add_argument("--set", action="append", metavar="KEY=VALUE")
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"qmpc: config error: {exc}", file=sys.stderr)
        return 2
    except outputs.OutputError as exc:
        print(f"qmpc: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
