"""Command line entry point: ``cmvlab <experiment> [flags]``.

Settings are layered as defaults < ``--config`` file < flags.  Exit status
is 0 when every check passes, 1 on a threshold failure, 2 for a tainted run
(the summary is still written) and 3 for a configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .experiments import EXPERIMENTS, ConfigError, resolve_config, run_experiment, write_outputs

EXIT_OK, EXIT_FAIL, EXIT_TAINTED, EXIT_CONFIG = 0, 1, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _workers(text: str) -> int:
    if text == "max":
        return os.cpu_count() or 1
    return int(text)


def _param(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the config-error status instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmvlab", description="Simulation and verification lab for conditional McKean-Vlasov SDEs.")
    sub = parser.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file (flags override it)")
        p.add_argument("--output", type=Path, help="output directory (default: cmvlab-out/<experiment>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=_workers, help="worker threads, or 'max'")
        if name == "validate":
            p.add_argument("--samples", type=int, help="samples per condition")
            continue
        p.add_argument("--preset", help="scenario preset")
        p.add_argument("--variant", choices=["CASE1", "CASE2", "HAMILTONIAN"])
        p.add_argument("--param", type=_param, action="append", default=[], metavar="KEY=VALUE",
                       help="scenario parameter, value parsed as JSON (repeatable)")
        p.add_argument("--replicas", type=int)
        p.add_argument("--M", type=int, help="cloud size")
        p.add_argument("--steps", type=int)
        if name in ("harnack", "chaos"):
            p.add_argument("--horizon", type=float)
        if name == "couple":
            p.add_argument("--case", type=int, choices=[1, 2])
            p.add_argument("--delta-frac", type=float)
        if name in ("couple", "hamiltonian"):
            p.add_argument("--t0", type=_floats, help="comma-separated coupling times")
            p.add_argument("--gamma-max", type=float)
            p.add_argument("--measure", choices=["P", "Q"])
        if name == "harnack":
            p.add_argument("--t", type=_floats, help="comma-separated evaluation times")
        if name == "chaos":
            p.add_argument("--N", type=_ints, help="comma-separated particle counts")
            p.add_argument("--no-entropy", action="store_true", help="skip the particle entropy cost")
    return parser


def flags_layer(args: argparse.Namespace) -> dict:
    """Config fragment holding only the flags that were given."""
    layer: dict = {}

    def put(path: str, value):
        if value is None:
            return
        node = layer
        *head, last = path.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[last] = value

    get = lambda name: getattr(args, name, None)  # noqa: E731
    put("mc.seed", get("seed"))
    put("mc.samples", get("samples"))
    put("mc.replicas", get("replicas"))
    put("mc.M", get("M"))
    put("mc.N_list", get("N"))
    put("grid.steps", get("steps"))
    put("grid.horizon", get("horizon"))
    put("coupling.case", get("case"))
    put("coupling.delta_frac", get("delta_frac"))
    put("coupling.t0_list", get("t0"))
    put("coupling.gamma_max", get("gamma_max"))
    put("coupling.measure", get("measure"))
    put("t_list", get("t"))
    if get("no_entropy"):
        put("entropy.enabled", False)
    put("scenario.preset", get("preset"))
    put("scenario.variant", get("variant"))
    for key, value in get("param") or []:
        put(f"scenario.params.{key}", value)
    return layer


def load_config_file(path: Path, experiment: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    if data.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {data['experiment']!r}, not {experiment!r}")
    return data


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    exp = args.experiment
    try:
        file_layer = load_config_file(args.config, exp) if args.config else {}
        flags = flags_layer(args)
        if "scenario" in flags and "scenario" in file_layer:
            flags["scenario"] = {**file_layer["scenario"], **flags["scenario"]}
        cfg = resolve_config(exp, file_layer, flags)
        cfg["output"] = str(args.output or file_layer.get("output") or Path("cmvlab-out") / exp)
        cfg["workers"] = args.workers or file_layer.get("workers", 1)
        record = run_experiment(cfg)
    except ConfigError as exc:
        print(f"cmvlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_outputs(record, cfg["output"])
    status = "TAINTED" if record.tainted else ("PASS" if record.passed else "FAIL")
    n_pass = sum(c.passed for c in record.checks)
    print(f"{exp}: {status} ({n_pass}/{len(record.checks)} checks) -> {cfg['output']}")
    for check in record.checks:
        if not check.passed:
            print(f"  failed: {check.name}: {check.value} vs {check.threshold}")
    return record.exit_code


if __name__ == "__main__":
    sys.exit(main())
