"""Command line entry point: ``gsbuild <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 fatal config or I/O error, 2 backend failure,
3 validation failure (bad config values, stale or missing upstream
artifacts, infeasible partition, unusable checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from gsbuild import pipeline
from gsbuild.backends.client import BackendError
from gsbuild.config import ConfigError, PipelineConfig
from gsbuild.manifest import SplitError, compute_stats, load_manifest
from gsbuild.refine import CheckpointError
from gsbuild.reference import reference_table

EXIT_OK, EXIT_IO, EXIT_BACKEND, EXIT_VALIDATION = 0, 1, 2, 3

# named flags and the config keys they override
FLAG_KEYS = {
    "work_dir": "paths.work_dir",
    "audio_root": "paths.audio_root",
    "language": "language.code",
    "seed": "partition.seed",
    "dev_hours": "partition.dev_hours",
    "test_hours": "partition.test_hours",
    "lid_threshold": "filter.lid_threshold",
    "tau": "refine.tau",
    "iterations": "refine.n",
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsbuild", description="Build an ASR corpus from raw channel audio.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every record-level event")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", help="TOML config file (defaults to ./gsbuild.toml if present)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set filter.min_duration_s=1.5")
        p.add_argument("--work-dir", dest="work_dir")
        p.add_argument("--audio-root", dest="audio_root")
        p.add_argument("--language")
        p.add_argument("--seed", type=int)

    for stage in pipeline.STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        common(p)
        if stage == "partition":
            p.add_argument("--dev-hours", dest="dev_hours", type=float)
            p.add_argument("--test-hours", dest="test_hours", type=float)
        if stage == "filter":
            p.add_argument("--lid-threshold", dest="lid_threshold", type=float)
        if stage == "refine":
            p.add_argument("--tau", type=float)
            p.add_argument("--iterations", type=int, help="number of refinement iterations (n)")
            p.add_argument("--no-relabel", action="store_true", help="gate only, never relabel")
            p.add_argument("--stop-after", dest="stop_after", type=int,
                           help="checkpoint and stop after this iteration")

    p = sub.add_parser("run-all", help="run every stage in order")
    common(p)
    p = sub.add_parser("stats", help="split hours and duration histogram of a manifest")
    common(p)
    p.add_argument("--manifest", help="manifest to describe (default: latest stage output)")
    p.add_argument("--json", action="store_true", help="print JSON records instead of a table")
    p = sub.add_parser("timing-report", help="wall time and RTF per stage")
    common(p)
    p.add_argument("--reference", action="store_true", help="also print the published full-scale timings")
    p = sub.add_parser("toy-corpus", help="write the synthetic toy corpus and a matching config")
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05, help="mock transcriber base noise")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    path = args.config
    if path is None and Path("gsbuild.toml").exists():
        path = "gsbuild.toml"
    overrides = list(args.set)
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if getattr(args, "no_relabel", False):
        overrides.append("refine.relabel=false")
    return PipelineConfig.load(path, overrides)


def _latest_manifest(cfg: PipelineConfig) -> Path:
    ws = pipeline.Workspace(cfg)
    for stage in reversed(pipeline.STAGES):
        p = ws.artifact(stage)
        if p.exists() and stage != "align":
            return p
    raise FileNotFoundError(f"no manifest in {ws.root}; run `gsbuild ingest` first")


def cmd_stats(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    path = Path(args.manifest) if args.manifest else _latest_manifest(cfg)
    stats = compute_stats(load_manifest(path), float(cfg.section("stats")["bin_width_s"]))
    if args.json:
        for rec in stats.to_records():
            print(json.dumps(rec, ensure_ascii=False, sort_keys=True))
    else:
        print(f"# {path}")
        print(stats.table())


def cmd_toy(args: argparse.Namespace) -> None:
    from gsbuild.toy import make_toy_corpus, toy_config

    truth = make_toy_corpus(args.root, seed=args.seed)
    cfg = toy_config(args.root, truth, python=sys.executable, noise=args.noise)
    print(f"toy corpus written to {args.root}; config {cfg}")


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        if args.command == "toy-corpus":
            cmd_toy(args)
            return EXIT_OK
        cfg = load_config(args)
        if args.command == "stats":
            cfg.validate()
            cmd_stats(cfg, args)
        elif args.command == "timing-report":
            print(pipeline.timing_table(pipeline.load_timings(cfg.work_dir)))
            if args.reference:
                print()
                print(reference_table())
        elif args.command == "run-all":
            for stage in pipeline.STAGES:
                result = pipeline.run_stage(cfg, stage)
                print(f"[{stage}] {result.summary}")
            print()
            print(pipeline.timing_table(pipeline.load_timings(cfg.work_dir)))
        else:
            kw = {"stop_after": args.stop_after} if args.command == "refine" else {}
            result = pipeline.run_stage(cfg, args.command, **kw)
            print(f"[{args.command}] {result.summary}")
    except ConfigError as exc:
        print(f"gsbuild: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pipeline.StageError, SplitError, CheckpointError) as exc:
        print(f"gsbuild: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"gsbuild: backend failure: {exc}", file=sys.stderr)
        if getattr(exc, "diagnostics", None):
            print(exc.diagnostics, file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, ValueError) as exc:
        print(f"gsbuild: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
