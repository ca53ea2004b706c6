"""Command-line entry point: ``qstruct <scenario> --config <path>``.

Exit status is 0 when every scenario invariant holds, 2 when the run
finished with violations, and 1 on configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from qstruct.config import SCENARIOS, load_config
from qstruct.errors import QstructError
from qstruct.scenarios import run_scenario

EXIT_OK, EXIT_ERROR, EXIT_VIOLATIONS = 0, 1, 2

DESCRIPTIONS = {
    "sg-run": "Stern-Gerlach branch formation in CM+R coordinates",
    "er-demo": "entanglement relativity of Gaussian products under e+p <-> CM+R",
    "bohm-run": "Bohmian trajectory ensemble guided through a Stern-Gerlach run",
    "classical-sweep": "factorizability of classical densities across the CM+R map",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    scenarios = "\n".join(f"  {name:<16} {DESCRIPTIONS[name]}" for name in SCENARIOS)
    parser = _Parser(
        prog="qstruct",
        description="Run a structure-relative / Bohmian Stern-Gerlach scenario.",
        epilog=f"scenarios:\n{scenarios}\n\nexit status: 0 ok, 1 error, 2 invariant violations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("scenario", choices=SCENARIOS, metavar="scenario",
                        help="one of: " + ", ".join(SCENARIOS))
    parser.add_argument("--config", required=True, help="path to the scenario config file")
    parser.add_argument("--output", help="output directory (overrides [scenario] output_dir)")
    parser.add_argument("--seed", type=int, help="RNG seed (overrides [scenario] seed)")
    parser.add_argument("--save-every", type=int, help="record every k steps (overrides [numerics] save_every)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.scenario)
    except (OSError, QstructError) as exc:
        print(f"qstruct: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.output is not None:
        cfg.output_dir = args.output
    if args.seed is not None:
        cfg.seed = args.seed
    if args.save_every is not None:
        if args.save_every < 1:
            print("qstruct: --save-every must be at least 1", file=sys.stderr)
            return EXIT_ERROR
        cfg.numerics["save_every"] = args.save_every
    try:
        result = run_scenario(cfg)
    except OSError as exc:
        print(f"qstruct: I/O error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except QstructError as exc:
        print(f"qstruct: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if result.passed:
        print(f"{cfg.scenario}: all invariants within tolerance ({cfg.output_dir}/summary.json)")
        return EXIT_OK
    print(f"{cfg.scenario}: {len(result.violations)} invariant violation(s):", file=sys.stderr)
    for v in result.violations:
        print(f"  {v}", file=sys.stderr)
    return EXIT_VIOLATIONS


if __name__ == "__main__":
    sys.exit(main())
