"""Command line entry point.

    fusionbench gen-data --config exp.yaml --out data/exp [--seed N] [--force]
    fusionbench run --config exp.yaml [--seed N] [--out DIR]
    fusionbench tune --config exp.yaml [--seed N] [--out DIR]
    fusionbench report [--out DIR] [--format md|csv]
    fusionbench sweep-redundancy --config exp.yaml [--out DIR]

Exit codes: 0 ok, 1 runtime failure, 2 config/arity error. Errors print one
line ``error[CODE]: message`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .data import DatasetError
from .encoders import EncoderError
from .fusion import ArityError
from .training import TrainingError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusionbench", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, config=True, **kw):
        sp = sub.add_parser(name, **kw)
        if config:
            sp.add_argument("--config", required=True)
            sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        return sp

    g = add("gen-data", help="generate a synthetic dataset container")
    g.add_argument("--force", action="store_true")
    add("run", help="(optionally tune) then run the 3-seed protocol")
    add("tune", help="run with a required search space")
    r = add("report", config=False, help="render the result store as a table")
    r.add_argument("--format", choices=("md", "csv"), default="md")
    r.add_argument("--config", default=None)
    add("sweep-redundancy", help="accuracy vs redundancy for several architectures")
    return p


def _with_seed(cfg: harness.ExperimentConfig, seed):
    if seed is None:
        return cfg
    cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    if cfg.generator is not None:
        cfg = replace(cfg, generator=replace(cfg.generator, seed=seed))
    return cfg


def _dispatch(args) -> int:
    if args.command == "report":
        base = (harness.output_dir(harness.load_config(args.config), args.out) if args.config
                else Path(args.out or os.environ.get("MBPP_OUT") or "results"))
        sys.stdout.write(harness.cmd_report(base / harness.RESULTS_FILE, args.format))
        return 0

    cfg = _with_seed(harness.load_config(args.config), args.seed)
    if args.command == "gen-data":
        if not args.out:
            raise harness.ConfigError("gen-data needs --out <dir>")
        ds = harness.cmd_gen_data(cfg, args.out, force=args.force)
        print(f"wrote {ds.n_samples} samples x {ds.n_modalities} modalities to {args.out}")
    elif args.command in ("run", "tune"):
        if args.command == "tune" and cfg.space is None:
            raise harness.ConfigError("tune needs a 'search' section in the config", code="E_SPACE")
        rec = harness.cmd_run(cfg, out=args.out)
        for name, (mean, std) in rec.aggregate.items():
            print(f"{rec.dataset} {rec.architecture} {name}: {harness.format_cell(name, mean, std)}")
    elif args.command == "sweep-redundancy":
        print(harness.cmd_redundancy_sweep(cfg, out=args.out).table(), end="")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except harness.HarnessError as exc:
        err, code, status = exc, exc.code, exc.exit_status
    except ArityError as exc:
        err, code, status = exc, "E_ARITY", 2
    except (DatasetError, EncoderError, ValueError) as exc:
        err, code, status = exc, "E_CONFIG", 2
    except (TrainingError, OSError, RuntimeError) as exc:
        err, code, status = exc, "E_RUNTIME", 1
    msg = str(err).replace("\n", " ")
    print(f"error[{code}]: {msg}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
