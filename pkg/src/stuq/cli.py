"""``stuq`` command line entry point.

Exit codes: 0 ok, 2 config error, 3 data/input error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .dataio import DataError
from .trainer import CheckpointError, TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

COMMANDS = ("synth", "train", "retrain-awa", "calibrate", "evaluate", "predict", "baseline", "run")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stuq", description="Spatio-temporal forecasting with uncertainty.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="override run.out (run directory)")
    p.add_argument("--mode", choices=pipeline.BASELINE_MODES, help="baseline mode (baseline command)")
    p.add_argument("--stages", default=",".join(pipeline.STAGES),
                   help="comma-separated stages for `run` (default: all)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    return cfg.with_overrides(seed=args.seed, out=args.out)


def dispatch(args) -> object:
    cfg = _config(args)
    cmd = args.command
    if cmd == "synth":
        return pipeline.run_synth(cfg)
    if cmd == "train":
        return pipeline.stage_train(cfg)
    if cmd == "retrain-awa":
        return pipeline.stage_awa(cfg)
    if cmd == "calibrate":
        return pipeline.stage_calibrate(cfg)
    if cmd == "evaluate":
        rep = pipeline.stage_evaluate(cfg)
        pipeline.write_run_report(cfg, {})
        return rep
    if cmd == "predict":
        return {"predictions": str(pipeline.stage_predict(cfg))}
    if cmd == "baseline":
        if not args.mode:
            raise ConfigError("baseline needs --mode")
        return pipeline.run_baseline(cfg, args.mode)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    bad = [s for s in stages if s not in pipeline.STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; choose from {pipeline.STAGES}")
    return pipeline.run_stages(cfg, stages)["metrics"]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
