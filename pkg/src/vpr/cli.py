"""Command-line entry point.

    vpr run <config|preset> [--set key=value ...] [--output-dir DIR]
    vpr validate <config|preset> [--set key=value ...]
    vpr presets list
    vpr presets show <name>

Relative output directories resolve against $VPR_OUTPUT_ROOT when it is set.
Exit status: 0 on success, 1 when a run fails, 2 for invalid usage or config.
"""

from __future__ import annotations

import argparse
import sys

from .experiments import (OUTPUT_ROOT_ENV, PRESET_DESCRIPTIONS, PRESETS, SCHEMA, ConfigError, load_config,
                          resolve_output_dir, run_experiment)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpr", description="Variational predictive resampling experiments.",
                                epilog=f"Relative output directories resolve against ${OUTPUT_ROOT_ENV}.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config (file path or preset name)")
    run.add_argument("config")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    run.add_argument("--output-dir", help="write here instead of the config's output_dir")
    run.add_argument("--quiet", action="store_true", help="no per-replicate progress lines")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    pre = sub.add_parser("presets", help="list or print the shipped presets")
    pre_sub = pre.add_subparsers(dest="action", required=True)
    pre_sub.add_parser("list", help="list preset names")
    show = pre_sub.add_parser("show", help="print a preset config")
    show.add_argument("name")

    sub.add_parser("keys", help="list every config key with its default")
    return p


def _error(msg: str, code: int) -> int:
    print(f"vpr: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)

    if args.command == "presets":
        if args.action == "list":
            width = max(len(n) for n in PRESETS)
            for name in PRESETS:
                print(f"{name:<{width}}  {PRESET_DESCRIPTIONS[name]}")
            return EXIT_OK
        if args.name not in PRESETS:
            return _error(f"no preset named {args.name!r} (try 'vpr presets list')", EXIT_USAGE)
        sys.stdout.write(PRESETS[args.name])
        return EXIT_OK

    if args.command == "keys":
        for key, (_, default, desc) in SCHEMA.items():
            print(f"{key} = {'' if default is None else default}    # {desc}")
        return EXIT_OK

    try:
        config = load_config(args.config, args.overrides)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"vpr: config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        return _error(str(exc), EXIT_USAGE)

    if args.command == "validate":
        print(f"ok: {config.experiment} with methods {', '.join(config.methods)}, "
              f"{config.replicates} replicate(s) -> {resolve_output_dir(config)}")
        return EXIT_OK

    out_dir = args.output_dir
    progress = None
    if not args.quiet:
        def progress(k, rep):
            print(f"replicate {k + 1}/{config.replicates} done", file=sys.stderr, flush=True)
    try:
        result = run_experiment(config, output_dir=out_dir, progress=progress)
    except KeyboardInterrupt:
        return _error("interrupted", EXIT_FAILURE)
    except Exception as exc:  # any failure maps to a diagnostic and a nonzero exit
        return _error(f"{type(exc).__name__}: {exc}", EXIT_FAILURE)
    target = out_dir or resolve_output_dir(config)
    print(f"wrote {target}/manifest.json")
    for method, metrics in result.manifest["summary"].items():
        shown = ", ".join(f"{k}={v['mean']:.4g}" for k, v in metrics.items() if v["mean"] is not None)
        print(f"  {method}: {shown}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
