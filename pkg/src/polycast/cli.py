"""Command-line entry point: ``polycast <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .core import FrameError, InvariantViolation, PolycastError
from .evaluate import EvalReport, EvalRow, mae, rmse

log = logging.getLogger("polycast")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3

FEATURE_SET_FLAGS = {
    "yield": "yield-only",
    "yield+mo": "yield+MO",
    "yield+sensor": "yield+sensor",
    "yield+sensor+mo": "yield+sensor+MO",
}
DATA_MODE_FLAGS = {"real": "real-only", "syn+real": "syn+real"}

STAGE_FOR = {
    "preprocess": "preprocess",
    "correlate": "correlate",
    "backcast": "backcast",
    "synthesize": "synthesize",
    "forecast": "forecast",
    "run": "forecast",
}


class UsageError(PolycastError):
    pass


def _holdout(text: str):
    site, sep, season = text.rpartition(":")
    if not sep or not site:
        raise argparse.ArgumentTypeError(f"expected SITE:SEASON, got {text!r}")
    try:
        return site, int(season)
    except ValueError:
        raise argparse.ArgumentTypeError(f"season in {text!r} is not an integer") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config (JSON)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument(
        "--log-level", default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    common.add_argument("--threads", type=int, default=1, help="intra-stage worker threads")
    common.add_argument(
        "--force", action="store_true", help="clear an existing output directory first"
    )

    parser = argparse.ArgumentParser(
        prog="polycast",
        description="Backcast missing polytunnel sensor seasons and forecast weekly yield.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sw = sub.add_parser("synthworld", parents=[common], help="write a seeded oracle world")
    sw.add_argument("--mode", choices=["tree", "smooth"], default="tree")
    sw.add_argument("--noise", type=float, default=0.0, help="scale of the sensor noise preset")
    sw.add_argument("--yield-noise", type=float, default=0.0)
    sw.add_argument("--season-days", type=int, default=70)

    for name, text in (
        ("preprocess", "resample, fill and join real sensor seasons"),
        ("correlate", "Pearson matrices over preprocessed frames"),
        ("backcast", "train and select backcast models"),
        ("synthesize", "generate synthetic sensor seasons"),
        ("run", "full pipeline"),
    ):
        sub.add_parser(name, parents=[common], help=text)

    fc = sub.add_parser("forecast", parents=[common], help="yield forecasting matrix")
    fc.add_argument("--feature-set", choices=list(FEATURE_SET_FLAGS), action="append")
    fc.add_argument("--data-mode", choices=list(DATA_MODE_FLAGS), action="append")
    fc.add_argument("--holdout", type=_holdout, action="append", metavar="SITE:SEASON")

    ev = sub.add_parser("evaluate", parents=[common], help="metrics from prediction files")
    ev.add_argument("predictions", nargs="+", type=Path, help="CSV files with an 'actual' column")
    return parser


def _prepare_out(out: Path, force: bool, inputs=()) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        root = out.resolve()
        for p in inputs:
            if root == p.resolve() or root in p.resolve().parents:
                raise UsageError(f"--force would delete input {p} inside {out}")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _simple_manifest(out: Path, command: str, status: str, outputs=()) -> None:
    doc = {"format": "polycast-manifest", "status": status, "command": command}
    if outputs:
        doc["outputs"] = sorted(outputs)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _cmd_synthworld(args) -> None:
    from .synthworld import WorldParams, noise_preset, write_world

    params = WorldParams(
        seed=0 if args.seed is None else args.seed,
        mode=args.mode,
        noise=noise_preset(args.noise) if args.noise > 0 else {},
        yield_noise=args.yield_noise,
        season_days=args.season_days,
        wu_outage=("Multispan", 2024, args.season_days * 3 // 7, max(1, args.season_days // 10)),
    )
    _simple_manifest(args.out, "synthworld", "incomplete")
    write_world(params, args.out)
    files = [p.relative_to(args.out).as_posix() for p in args.out.rglob("*") if p.is_file()]
    _simple_manifest(args.out, "synthworld", "complete", [f for f in files if f != "manifest.json"])


def _load(args):
    if args.config is None:
        raise UsageError("--config is required")
    overrides = {} if args.seed is None else {"seed": args.seed}
    return load_config(args.config, overrides)


def _cmd_pipeline(args, config) -> None:
    from .pipeline import RunContext, run_stages

    ctx = RunContext(config, args.out, args.threads)
    kwargs = {}
    if args.command == "forecast":
        if args.feature_set:
            kwargs["feature_sets"] = [FEATURE_SET_FLAGS[f] for f in args.feature_set]
        if args.data_mode:
            kwargs["data_modes"] = [DATA_MODE_FLAGS[m] for m in args.data_mode]
        if args.holdout:
            kwargs["held_out"] = args.holdout
    run_stages(ctx, STAGE_FOR[args.command], **kwargs)


def _cmd_evaluate(args) -> None:
    _simple_manifest(args.out, "evaluate", "incomplete")
    report = EvalReport([], "predictions")
    for path in args.predictions:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            if "actual" not in fields:
                raise FrameError(f"{path}: no 'actual' column")
            models = [f for f in fields if f not in ("timestamp", "actual")]
            rows = list(reader)
        if not rows:
            raise FrameError(f"{path}: no prediction rows")
        try:
            actual = [float(r["actual"]) for r in rows]
            preds = {m: [float(r[m]) for r in rows] for m in models}
        except (TypeError, ValueError) as exc:
            raise FrameError(f"{path}: non-numeric prediction cell ({exc})") from None
        for m, pred in preds.items():
            report.add(EvalRow(m, path.stem, path.stem, "file", rmse(pred, actual), mae(pred, actual), len(rows)))
    report.to_csv(args.out / "metrics.csv")
    (args.out / "metrics.txt").write_text(report.summary())
    _simple_manifest(args.out, "evaluate", "complete", ["metrics.csv", "metrics.txt"])


def _write_crash_manifest(out: Path, command: str, error: str) -> None:
    manifest = out / "manifest.json"
    if manifest.exists():
        return
    doc = {"format": "polycast-manifest", "status": "incomplete", "command": command, "error": error}
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s"
    )
    config = None
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        inputs = []
        if args.command == "evaluate":
            inputs = list(args.predictions)
        elif args.command != "synthworld":
            config = _load(args)
            inputs = [args.config] + [
                config.path(p)
                for group in (config.weather, config.sensors, config.yield_)
                for p in group.values()
            ]
        _prepare_out(args.out, args.force, inputs)
    except UsageError as exc:
        print(f"polycast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"polycast: config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        if args.command == "synthworld":
            _cmd_synthworld(args)
        elif args.command == "evaluate":
            _cmd_evaluate(args)
        else:
            _cmd_pipeline(args, config)
    except UsageError as exc:
        print(f"polycast: error: {exc}", file=sys.stderr)
        _write_crash_manifest(args.out, args.command, str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"polycast: config error: {exc}", file=sys.stderr)
        _write_crash_manifest(args.out, args.command, str(exc))
        return EXIT_DATA
    except PolycastError as exc:
        cause = getattr(exc, "cause", exc)
        print(f"polycast: {exc}", file=sys.stderr)
        _write_crash_manifest(args.out, args.command, str(exc))
        if isinstance(cause, InvariantViolation):
            return EXIT_INVARIANT
        return EXIT_DATA
    except AssertionError as exc:
        print(f"polycast: invariant violated: {exc}", file=sys.stderr)
        _write_crash_manifest(args.out, args.command, str(exc))
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
