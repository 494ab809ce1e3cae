"""Command-line entry point.

Exit codes: 0 success, 1 check failed, 2 configuration error, 3 numeric or
runtime failure.  ``DRF_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .bench import run_experiment, run_single
from .config import resolve
from .errors import ConfigError, DimensionError, DRFError
from .gradcheck import run_gradcheck
from .metrics import write_metric_csv
from .ppm import write_ppm

log = logging.getLogger("drfsample")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

EPILOG = """\
exit codes:
  0  success
  1  check failed (gradcheck tolerance exceeded)
  2  configuration or validation error (message names the field)
  3  numeric or runtime failure (message names the step)

environment:
  DRF_LOG  log level: DEBUG, INFO, WARNING (default), ERROR
"""


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (.json accepted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted path; repeatable")
    common.add_argument("--out", help="output directory (io.out_dir)")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--workers", type=int, help="parallel bench workers")

    parser = argparse.ArgumentParser(
        prog="drfsample", description="Guided diffusion sampling with dual recursive feedback.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("sample", "run one controlled sampling run and write its artifacts"),
        ("bench", "run an ablation plan and write aggregate results"),
        ("gradcheck", "verify DRF noise gradients against finite differences"),
    ):
        sub.add_parser(name, parents=[common], help=help_text, epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def _write_config(rc, out):
    (out / "config.json").write_text(json.dumps({"hash": rc.hash, "config": rc.raw}, indent=2))


def cmd_sample(rc):
    model = rc.model()
    plan = rc.plan()
    variant = rc.variant()
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    z, trace, report, info = run_single(plan, variant, rc.seed, model, rc.sched)
    z_s, z_a, _ = plan.context()
    write_ppm(out / "out.ppm", z)
    write_ppm(out / "structure.ppm", z_s)
    write_ppm(out / "appearance.ppm", z_a)
    trace.meta["config_hash"] = rc.hash
    trace.write_jsonl(out / "trace.jsonl")
    trace.write_summary_csv(out / "steps.csv")
    write_metric_csv([report.as_row(rc.seed, rc.hash)], out / "metrics.csv")
    _write_config(rc, out)
    print(f"config {rc.hash}  variant {variant.name}  drf calls {info['drf_calls']}")
    print(f"struct_iou {report.struct_iou:.4f}  app_stat_dist {report.app_stat_dist:.4f}  "
          f"self_sim_dist {report.self_sim_dist:.4f}  success {report.success}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_bench(rc):
    plan = rc.plan(validate=True)
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    summary = run_experiment(plan, rc.model(), out, rc.sched)
    _write_config(rc, out)
    print(f"config {rc.hash}  {len(plan.variants)} variants x {len(plan.seeds)} seeds")
    for rank, name in enumerate(summary["ranking"], 1):
        s = summary["variants"][name]
        print(f"{rank:2d}. {name:28s} app {s['app_stat_dist']['median']:.4f}  "
              f"iou {s['struct_iou']['median']:.4f}  success {s['success_rate']:.2f}  "
              f"runtime {s['runtime_s']['median']:.3f}s")
    if summary["failed_runs"]:
        print(f"{len(summary['failed_runs'])} runs failed; see results.csv")
    print(f"results in {out}")
    return EXIT_OK


def cmd_gradcheck(rc):
    g = rc.gradcheck
    results = run_gradcheck(rc.sched, int(g["instances"]), seed=rc.seed, max_dim=int(g["max_dim"]),
                            rel_step=float(g["rel_step"]))
    tol = float(g["tol"])
    status = EXIT_OK
    for mode, r in results.items():
        ok = r["max_rel_err"] < tol
        print(f"{mode:18s} max relative error {r['max_rel_err']:.3e}  {'ok' if ok else 'FAILED'}")
        if not ok:
            status = EXIT_CHECK
            print("worst instance: " + json.dumps(r["worst"]))
    return status


COMMANDS = {"sample": cmd_sample, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get("DRF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args.config, args.overrides, seed=args.seed, out=args.out, workers=args.workers)
        log.info("resolved config %s", rc.hash)
        return COMMANDS[args.command](rc)
    except (ConfigError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DRFError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
