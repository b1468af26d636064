"""Command-line entry point: ``nolab {train,attack,analyze,report,reproduce}``.

Exit codes: 0 success, 1 invalid config (JSON report on stdout), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import yaml

from .experiment import SCENARIOS, ConfigError, Run, RunFailed, load_config, read_csv, write_manifest

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def scenario_path(name: str) -> Path:
    return Path(str(resources.files("nolab") / "scenarios" / f"{name}.yaml"))


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([{"field": item, "message": "override must look like KEY=VALUE"}])
        out[key] = yaml.safe_load(value)
    for flag in ("seed", "epochs", "eta", "eta_noise", "batch_size", "name"):
        v = getattr(args, flag, None)
        if v is not None:
            out[flag] = v
    return out


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("config", help="experiment config (YAML)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, dotted for nesting; repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--eta-noise", dest="eta_noise", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--name", help="run name (directory under $NOLAB_RUNS)")
    p.add_argument("--run-dir", help="explicit run directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nolab", description="Noise-prior learning and adversarial robustness lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the target model (and any in-run source models)")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    p = sub.add_parser("attack", help="evaluate clean and adversarial accuracy of a trained run")
    _add_common(p)

    p = sub.add_parser("analyze", help="PCA, GAAS and loss-surface analyses of a trained run")
    _add_common(p)

    p = sub.add_parser("report", help="summarise a run directory and refresh its manifest")
    p.add_argument("run_dir")

    p = sub.add_parser("reproduce", help="run a packaged scenario end to end")
    p.add_argument("scenario", choices=SCENARIOS)
    _add_common(p, config=False)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--print-config", action="store_true", help="print the packaged config and exit")
    return ap


def _report(run_dir: Path) -> dict:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{run_dir} has no config.json; is it a run directory?")
    from .experiment import validate_config

    cfg = validate_config(json.loads(cfg_path.read_text()))
    write_manifest(run_dir, cfg)
    summary = {"run": str(run_dir), "scenario": cfg.scenario, "failed": (run_dir / "FAILED").exists()}
    if (run_dir / "train_metrics.csv").exists():
        rows = read_csv(run_dir / "train_metrics.csv")
        summary["epochs"] = len(rows)
        if rows:
            summary["final"] = {k: rows[-1][k] for k in ("loss", "accuracy")}
    if (run_dir / "eval.csv").exists():
        summary["eval"] = read_csv(run_dir / "eval.csv")
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(json.dumps(_report(Path(args.run_dir)), indent=2, sort_keys=True))
            return EXIT_OK
        path = scenario_path(args.scenario) if args.command == "reproduce" else Path(args.config)
        if args.command == "reproduce" and args.print_config:
            print(path.read_text(), end="")
            return EXIT_OK
        cfg = load_config(path, _overrides(args))
        run = Run(cfg, args.run_dir)
        if args.command == "train":
            run.train(resume=args.resume)
        elif args.command == "attack":
            rows = run.attack()
            for r in rows:
                print(",".join(str(v) for v in r))
        elif args.command == "analyze":
            run.analyze()
        else:
            state = run.train(resume=args.resume)
            run.attack(state)
            run.analyze(state)
        run.finish()
        print(str(run.dir))
        return EXIT_OK
    except ConfigError as exc:
        print(exc.report())
        return EXIT_INVALID
    except (RunFailed, FileNotFoundError, OSError) as exc:
        print(f"nolab: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except yaml.YAMLError as exc:
        print(json.dumps({"status": "invalid", "errors": [{"field": "<file>", "message": str(exc)}]}, indent=2))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
