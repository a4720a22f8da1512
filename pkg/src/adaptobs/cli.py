"""Command line: run, sweep, plot, list-scenarios."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .numerics import NumericsError
from .observer import ConfigError
from .hybrid import SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptobs", description="Hybrid adaptive observer experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("config", help="builtin name or YAML file")
    r.add_argument("--out", default=None, help="output directory (default runs/<name>)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--plots", action="store_true", help="also write the SVG plots")

    s = sub.add_parser("sweep", help="run a scenario for several values of one field")
    s.add_argument("config")
    s.add_argument("--param", default=None, help="dotted field (default: the scenario's sweep section)")
    s.add_argument("--values", default=None, help="comma separated values")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    pl = sub.add_parser("plot", help="write an SVG plot for a run directory")
    pl.add_argument("run_dir")
    pl.add_argument("--kind", required=True, choices=["error_norm", "theta_traces", "model_fit"])
    pl.add_argument("--output", default=None)

    sub.add_parser("list-scenarios", help="list builtin scenarios")
    return p


def _values(text: str) -> list:
    import yaml

    return [yaml.safe_load(v) for v in text.split(",") if v.strip()]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "list-scenarios":
            from .scenario import BUILTIN_HELP

            for name, text in BUILTIN_HELP.items():
                print(f"{name:14s} {text}")
            return EXIT_OK

        if args.cmd == "plot":
            from .plotting import plot

            print(plot(args.run_dir, args.kind, args.output))
            return EXIT_OK

        from .runner import run, sweep
        from .scenario import Scenario, ScenarioError, sweep_spec

        sc = Scenario.load(args.config)
        if args.cmd == "run":
            out = args.out or f"runs/{sc.name}"
            art = run(sc, out, args.seed, args.overrides)
            if args.plots:
                from .plotting import KINDS, plot

                for kind in KINDS:
                    plot(out, kind)
            print(json.dumps({k: art.summary[k] for k in ("scenario", "n_jumps", "j_star",
                                                           "asym_err_norm", "final_err_norm")}))
            print(f"artifacts in {out}")
            return EXIT_OK

        spec = sweep_spec(sc.with_overrides(args.overrides))
        param = args.param or (spec[0] if spec else None)
        if param is None:
            raise ScenarioError("sweep.param", "no --param given and the scenario has no sweep section")
        values = _values(args.values) if args.values is not None else (spec[1] if spec else [])
        out = args.out or f"runs/{sc.name}_sweep"
        _, rows = sweep(sc, param, values, out, args.seed, args.overrides)
        for row in rows:
            print(json.dumps(row))
        print(f"summary in {out}/summary.csv")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, NumericsError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
