"""``layerbudget`` command line.

    layerbudget gen-data  --config run.yaml --split eval --kind B-fog --out scenes.jsonl
    layerbudget train     --config run.yaml --stage 3 [--force]
    layerbudget eval      --config run.yaml
    layerbudget report    --run-dir runs/default
    layerbudget run       --config run.yaml          # all stages, eval and report
    layerbudget gradcheck [--check NAME ...]

Every subcommand takes ``--set key=value`` overrides (values parsed as YAML)
on top of the optional config file. Exit status is 0 only when everything
invoked succeeded and every check it ran passed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .data import KINDS, dump_scenes, gen_dataset
from .autodiff import SeededRng

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


def _parse_overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def load_config(args) -> pipeline.RunConfig:
    base = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    base = dict(base or {})
    base.update(_parse_overrides(args.set))
    if getattr(args, "out_dir", None):
        base["out_dir"] = args.out_dir
    return pipeline.RunConfig.from_dict(base)


def cmd_gen_data(args):
    cfg = load_config(args)
    if args.split == "train":
        rng = SeededRng(cfg.seed).child("data", "train", "corrupt")
        scenes = gen_dataset(rng, args.n or cfg.n_train, KINDS, cfg.train_severity, cfg.scene_config)
    else:
        rng = SeededRng(cfg.seed).child("data", "eval", args.kind)
        scenes = gen_dataset(rng, args.n or cfg.n_eval, (args.kind,), cfg.eval_severity, cfg.scene_config)
    path = dump_scenes(scenes, args.out, cfg.scene_config)
    print(f"wrote {len(scenes)} scenes to {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(cfg.out_dir) / "config.yaml")
    pipeline.train_stage(cfg, args.stage, force=args.force)
    print(f"stage {args.stage} checkpoints in {cfg.ckpt_dir}")
    return EXIT_OK


def _finish(report, out_dir):
    bad = [c for c in report.cells if not (c.budget_ok and c.executed_subset_ok)]
    print(f"{len(report.cells)} cells written to {out_dir}")
    for c in bad:
        print(f"budget violation: {c.corruption} b={c.budget} {c.variant}", file=sys.stderr)
    return EXIT_CHECK_FAILED if bad else EXIT_OK


def cmd_eval(args):
    cfg = load_config(args)
    report = pipeline.run_pipeline(cfg, train=False)
    return _finish(report, cfg.out_dir)


def cmd_run(args):
    cfg = load_config(args)
    report = pipeline.run_pipeline(cfg, train=True)
    return _finish(report, cfg.out_dir)


def cmd_report(args):
    run_dir = Path(args.run_dir)
    report = pipeline.load_report(run_dir / "report.json")
    out = Path(args.out) if args.out else run_dir
    pipeline.write_report(report, out)
    rows = [c for c in report.cells if args.budget is None or c.budget == args.budget]
    print(f"{'corruption':<11} {'b':>3} {'variant':<14} {'loss':>8} {'f1':>6} {'sel':>11} {'exec':>11} {'cost':>7}")
    for c in rows:
        sel = "/".join(f"{x:.1f}" for x in c.selected)
        exe = "/".join(f"{x:.1f}" for x in c.executed)
        print(f"{c.corruption:<11} {c.budget:>3} {c.variant:<14} {c.detection_loss:8.4f} {c.f1:6.3f} {sel:>11} {exe:>11} {c.cost:7.2f}")
    if report.studies:
        print(json.dumps(report.studies, indent=1))
    return _finish(report, out)


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    result = run_suite(args.check or None)
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="layerbudget", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out-dir", help="shorthand for --set out_dir=...")
        return p

    p = with_config(sub.add_parser("gen-data", help="dump a scene dataset as JSON lines"))
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--kind", choices=KINDS, default="clean", help="corruption kind for the eval split")
    p.add_argument("--n", type=int, help="number of scenes (defaults to the config size)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train one stage"))
    p.add_argument("--stage", type=int, choices=range(1, 6), required=True)
    p.add_argument("--force", action="store_true", help="skip the prerequisite-checkpoint check")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate the grid from trained checkpoints"))
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("run", help="train all stages, evaluate and write reports"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="rewrite CSV files from report.json and print a table")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="directory for the rewritten files (default: the run directory)")
    p.add_argument("--budget", type=int, help="only print cells at this budget")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="run the registered gradient and invariant checks")
    p.add_argument("--check", action="append", help="run only this check (repeatable)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (pipeline.StageOrderError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
