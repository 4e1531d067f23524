"""``chromoforge <stage> --config <file> [--seed S] [key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 numerical fault,
4 missing input, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import STAGES, RunConfig
from .exceptions import ChromoforgeError, ConfigError, MissingInputError, NumericalFault

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MISSING = 0, 1, 2, 3, 4


def _limit_blas_threads():
    # CHROMOFORGE_THREADS caps worker processes; BLAS inside each stays single-threaded
    n = os.environ.get("CHROMOFORGE_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chromoforge", description="Hi-C conditioned chromosome ensemble pipeline")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="sampler steps (generate)")
    p.add_argument("--cfg-scale", type=float, default=None, help="guidance scale (generate)")
    p.add_argument("--count", type=int, default=None, help="structures per condition (generate)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv=None) -> int:
    _limit_blas_threads()
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    for flag, key in ((args.steps, "gen_steps"), (args.cfg_scale, "cfg_scale"),
                      (args.count, "gen_count")):
        if flag is not None:
            overrides.append(f"{key}={flag}")
    from .pipeline import run_stage
    try:
        cfg = RunConfig.load(args.config, overrides, args.seed)
        run_stage(args.stage, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ChromoforgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
