"""Command-line entry point: ``diml <command> ...`` or ``python -m diml <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import ESTIMATORS, PRESETS, ExperimentConfig, load_config, parse_config
from .errors import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC, EXIT_OK, ConfigError, DomainError, InfeasibleError, \
    ShapeError

log = logging.getLogger("diml")


def _config_from_manifest(manifest: dict, source: str) -> ExperimentConfig:
    return parse_config(yaml.safe_dump(manifest["config"], sort_keys=False), source)


def _resolve_config(args, data_manifest: dict | None = None) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config, getattr(args, "paper_scale", False))
    elif data_manifest is not None and "config" in data_manifest:
        cfg = _config_from_manifest(data_manifest, f"{args.data}/manifest.json")
    else:
        raise ConfigError("no --config given")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _progress(row: dict) -> None:
    log.info("%s epoch %d  train_nll %.3f  heldout_nll %.3f  diff_mse %.4g  cfkl %.4g", row["estimator"],
             row["epoch"], row["train_nll"], row["heldout_nll"], row["diff_mse"], row["cfkl_params"])


def cmd_simulate(args) -> int:
    from .experiment import make_dataset, save_dataset

    cfg = _resolve_config(args)
    ds = make_dataset(cfg)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train + {len(ds.heldout)} heldout trajectories "
          f"(n={cfg.game.n}, k={cfg.game.k}, T={cfg.data.horizon}) to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .experiment import fit_from_dir, read_manifest

    cfg = _resolve_config(args, read_manifest(args.data))
    res = fit_from_dir(args.data, args.estimator, cfg, args.out, args.record_wallclock, _progress)
    f = res.final
    print(f"{args.estimator}: {len(res.loss_history)} epochs, train_nll {f['train_nll']:.4f}, "
          f"heldout_nll {f['heldout_nll']:.4f}, diff_mse {f['diff_mse']:.4g}, cfkl_params {f['cfkl_params']:.4g}")
    print(f"wrote {Path(args.out) / 'mechanism.json'} and {Path(args.out) / 'metrics.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    import numpy as np

    from .experiment import evaluation_csv, evaluate_mechanisms, load_dataset
    from .mechanisms import load_mechanism

    manifest, _, _, heldout = load_dataset(args.data)
    cfg = _resolve_config(args, manifest)
    truth, est = load_mechanism(args.truth), load_mechanism(args.est)
    meta = json.loads(Path(args.est).read_text()).get("meta", {})
    q0 = None if meta.get("q_init") is None else np.asarray(meta["q_init"], dtype=np.float64)
    row = evaluate_mechanisms(truth, est, heldout, cfg, q0=q0, beta=meta.get("beta"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(evaluation_csv(row))
    for key, value in row.items():
        print(f"{key:>18}: {value:.6g}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import preset_configs, run_experiment

    for cfg in preset_configs(args.preset, args.paper_scale, args.seed):
        out = Path(args.out) / cfg.name
        print(f"== {cfg.name}: n={cfg.game.n} k={cfg.game.k} M={cfg.data.train_trajectories} T={cfg.data.horizon}")
        outcome = run_experiment(cfg, out, args.workers, args.record_wallclock, _progress)
        for name, why in outcome.skipped.items():
            print(f"   {name}: omitted ({why})")
        for name, res in outcome.results.items():
            f = res.final
            print(f"   {name:<10} diff_mse {f['diff_mse']:.4g}  cfkl_params {f['cfkl_params']:.4g}  "
                  f"heldout_nll {f['heldout_nll']:.2f}")
        print(f"   results in {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import grad_check_suite

    lines = grad_check_suite(points=args.points, seed=args.seed)
    for line in lines:
        print(line.render())
    return EXIT_OK if all(line.passed for line in lines) else EXIT_NUMERIC


def cmd_theory_check(args) -> int:
    from .checks import consistency_lines, consistency_trend, identifiability_check

    lines = identifiability_check(seeds=args.seeds)
    for line in lines:
        print(line.render())
    if not args.skip_consistency:
        more = consistency_lines(consistency_trend(seeds=args.seeds))
        for line in more:
            print(line.render())
        lines += more
    return EXIT_OK if all(line.passed for line in lines) else EXIT_NUMERIC


def cmd_preset_dump(args) -> int:
    cfg = load_config(args.name, args.paper_scale)
    if args.seed is not None:
        cfg.seed = args.seed
    text = cfg.to_yaml()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diml", description="Infer payoff mechanisms from learning trajectories.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a trajectory dataset from a config or preset")
    s.add_argument("--config", required=True, help="YAML file or preset name (e1..e4)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--paper-scale", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit one estimator to a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--estimator", required=True, choices=ESTIMATORS)
    s.add_argument("--config", help="YAML file or preset name; defaults to the dataset's config echo")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--record-wallclock", action="store_true", help="fill the wallclock_s column of metrics.csv")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("evaluate", help="compare an estimated mechanism with the truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="CSV file to write")
    s.add_argument("--config")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("experiment", help="simulate, fit every applicable estimator and write learning curves")
    s.add_argument("--preset", required=True, choices=(*PRESETS, "all"))
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--out", default="runs")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--workers", type=int, default=1, help="maximum estimators fitted concurrently")
    s.add_argument("--record-wallclock", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("grad-check", help="finite-difference check of the likelihood gradients")
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("theory-check", help="identifiability oracle and the tabular consistency trend")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--skip-consistency", action="store_true", help="run only the identifiability oracle")
    s.set_defaults(func=cmd_theory_check)

    s = sub.add_parser("preset-dump", help="print a preset as an editable YAML config")
    s.add_argument("name", choices=PRESETS)
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_preset_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ShapeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
