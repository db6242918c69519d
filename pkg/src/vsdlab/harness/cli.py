"""``vsdlab`` command line.

Exit codes: 0 success, 2 config error, 3 numeric abort, 4 acceptance check
failure (``run --check`` only).
"""

import argparse
import json
import sys
from pathlib import Path

from .. import _kernels
from ..distill import NumericAbort
from .config import ConfigError, parse_config
from .experiment import (
    _threads,
    baseline_samples,
    build_renderer,
    build_target,
    ensemble_metrics,
    _clean,
    flatten,
    json_bytes,
    points_csv,
    read_points_csv,
    run_experiment,
)
from .presets import PRESETS

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


def _load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8 text") from None
    return parse_config(text)


def cmd_run(args):
    cfg = _load(args.config)
    out = args.out or str(Path("vsdlab-out") / cfg.name)
    manifest = run_experiment(cfg, out, check=args.check)
    print(f"wrote {len(manifest.files)} files to {out}")
    if args.check:
        for c in manifest.checks:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}")
    if args.check and not manifest.checks:
        print(f"no acceptance checks are attached to preset {cfg['']['preset'] or '(none)'!r}")
    return manifest.exit_status


def cmd_sample(args):
    cfg = _load(args.config)
    data = points_csv(baseline_samples(cfg), "sample")
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    return EXIT_OK


def cmd_metrics(args):
    cfg = _load(args.config)
    particles = read_points_csv(args.ensemble)
    renderer = build_renderer(cfg)
    if particles.shape[1] != renderer.param_dim:
        raise ConfigError(f"ensemble has dimension {particles.shape[1]} but renderer.param_dim is {renderer.param_dim}", key="renderer.param_dim")
    m = ensemble_metrics(cfg, particles, baseline_samples(cfg), renderer, build_target(cfg))
    sys.stdout.buffer.write(json_bytes(flatten(_clean(m))))
    return EXIT_OK


def cmd_presets(args):
    width = max(len(n) for n in PRESETS)
    for name in sorted(PRESETS):
        print(f"{name:<{width}}  {PRESETS[name].description}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="vsdlab", description="Score-distillation laboratory on analytic diffusion targets.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default vsdlab-out/<name>)")
    r.add_argument("--check", action="store_true", help="evaluate acceptance thresholds; exit 4 on failure")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sample", help="ancestral samples from the config's target as CSV")
    s.add_argument("config")
    s.add_argument("--out", help="write to this file instead of stdout")
    s.set_defaults(func=cmd_sample)
    m = sub.add_parser("metrics", help="metrics of a final-ensemble CSV against the config's target")
    m.add_argument("ensemble")
    m.add_argument("config")
    m.set_defaults(func=cmd_metrics)
    sub.add_parser("presets", help="list shipped presets").set_defaults(func=cmd_presets)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _kernels.set_threads(_threads())
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
