"""Command line entry point ``lrsep``.

Exit codes: 0 pass, 1 statistical failure, 2 configuration or runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, load_config
from .experiments import WORKERS_ENV, RunManifest, run_experiment
from .hydro import PRESETS

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    manifest = run_experiment(cfg, out_dir=args.output, workers=args.workers)
    root = Path(args.output if args.output is not None else cfg.output)
    print(f"{cfg.experiment}: {'PASS' if manifest.verdict else 'FAIL'}  ({root / 'manifest.json'})")
    for k, v in manifest.summary.items():
        print(f"  {k} = {v}")
    return EXIT_PASS if manifest.verdict else EXIT_FAIL


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"ok: {cfg.experiment} (config hash {cfg.digest()[:12]})")
    return EXIT_PASS


def _cmd_presets(args) -> int:
    print("profile presets:")
    for name, (_, defaults) in PRESETS.items():
        params = ", ".join(f"{k}={v}" for k, v in defaults.items())
        print(f"  {name}: {params}")
    print("experiments:")
    for e in EXPERIMENTS:
        print(f"  {e}")
    return EXIT_PASS


def _cmd_report(args) -> int:
    manifest = RunManifest.load(args.manifest)
    root = Path(args.manifest).parent
    print(f"experiment: {manifest.experiment}")
    print(f"verdict:    {'PASS' if manifest.verdict else 'FAIL'}")
    print(f"config:     {manifest.config_hash[:12]}  code {manifest.code_version}")
    print(f"runtime:    {manifest.timing.get('seconds', float('nan')):.1f} s")
    for name, digest in sorted(manifest.outputs.items()):
        print(f"  {name}  {digest[:12]}")
    report = root / "report.json"
    if report.exists():
        doc = json.loads(report.read_text(encoding="utf-8"))
        print(f"statistic:  {json.dumps(doc.get('statistic'))}")
    return EXIT_PASS if manifest.verdict else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrsep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("-o", "--output", default=None, help="output directory (overrides the config)")
    r.add_argument("-j", "--workers", type=int, default=None, help=f"worker threads (default ${WORKERS_ENV})")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="check a config and list every violation")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    sub.add_parser("list-presets", help="profile presets and experiment ids").set_defaults(func=_cmd_presets)
    m = sub.add_parser("report", help="summarise a finished run")
    m.add_argument("manifest")
    m.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, RuntimeError, NotImplementedError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
