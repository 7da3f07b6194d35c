"""Command-line front end.

Exit codes: 0 success, 2 when the solver (or an oracle check) flags a
problem, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import VBInverseError
from .experiment import (
    PRESETS,
    ExperimentConfig,
    build_setup,
    preset,
    read_data_csv,
    run_experiment,
    write_data_csv,
    write_report,
    _physical_layout,
)

log = logging.getLogger("vbinverse")

DEFAULT_PRESET = {"gaussian": "gaussian-1d", "laplace": "laplace-1d", "sequential": "sequential-1d"}


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON config, layered over the preset")
    p.add_argument("--preset", help="built-in preset to start from")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbinverse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic data and truth")
    _add_common(p)

    p = sub.add_parser("invert", help="run an inversion")
    p.add_argument("model", choices=sorted(DEFAULT_PRESET))
    p.add_argument("--data", type=Path, help="data.csv to invert instead of regenerating")
    _add_common(p)

    p = sub.add_parser("oracle-suite", help="run the brute-force cross-checks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("presets", help="built-in presets")
    p.add_argument("action", choices=["list", "show"])
    p.add_argument("name", nargs="?")
    return parser


def resolve_config(args, model=None) -> ExperimentConfig:
    name = args.preset or DEFAULT_PRESET.get(model, "gaussian-1d")
    config = preset(name)
    if args.config is not None:
        config = ExperimentConfig.load(args.config, base=config)
    if model is not None:
        config.solver.model = model
    if args.seed is not None:
        config.output.seed = args.seed
    if args.out is not None:
        config.output.directory = str(args.out)
    return config.validate()


def cmd_generate(args) -> int:
    config = resolve_config(args)
    setup = build_setup(config, config.output.seed)
    out = Path(config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    write_data_csv(out / "data.csv", _physical_layout(setup.gen_stack), setup.d, setup.d_clean, setup.mask)
    np.savetxt(out / "truth.csv", np.column_stack([setup.gen_problem.grid.nodes, setup.truth_gen]),
               delimiter=",", header="x,value", comments="", fmt="%.17g")
    (out / "config.json").write_text(config.to_json() + "\n")
    print(f"wrote {setup.d.size} data values to {out}")
    return 0


def cmd_invert(args) -> int:
    config = resolve_config(args, args.model)
    d = read_data_csv(args.data) if args.data is not None else None
    report = run_experiment(config, d=d)
    write_report(report, config.output.directory)
    print(f"{report.model}: status={report.status} iterations={report.iterations} "
          f"rel_error={report.rel_error:.4g} sigma_hat={report.sigma_hat:.4g} ({report.timing:.1f} s)")
    return 0 if report.converged else 2


def cmd_oracle(args) -> int:
    from .oracle import run_oracle_suite

    checks = run_oracle_suite(seed=args.seed)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.discrepancy:.3g} (tol {c.tolerance:g})")
    return 0 if all(c.passed for c in checks) else 2


def cmd_presets(args) -> int:
    if args.action == "list":
        for name, (desc, _) in sorted(PRESETS.items()):
            print(f"{name:15s} {desc}")
        return 0
    if args.name is None:
        raise ValueError("presets show needs a preset name")
    print(preset(args.name).to_json())
    return 0


COMMANDS = {"generate-data": cmd_generate, "invert": cmd_invert, "oracle-suite": cmd_oracle, "presets": cmd_presets}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (VBInverseError, ValueError, OSError, np.linalg.LinAlgError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
