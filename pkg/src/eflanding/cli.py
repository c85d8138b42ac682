"""Command line entry point: ``eflanding run|gen-data|replay|estimate``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .config import AUTO, ESTIMATE, ConfigError, RunConfig, build_config, config_keys, load_config

THREADS_ENV = "EFLANDING_THREADS"

_PLACEHOLDERS = {"gamma", "eta", "mu", "grad_bound", "merit_smooth"}
_BOOLS = {"error_feedback", "theory_mode", "extended_metrics"}


def _value(key: str, text: str):
    """Parse a command-line override into the type the config expects."""
    if key in _BOOLS:
        low = text.lower()
        if low not in ("true", "false"):
            raise ConfigError(f"--{key.replace('_', '-')}: expected true or false")
        return low == "true"
    if key in _PLACEHOLDERS and text in (AUTO, ESTIMATE):
        return text
    if key in ("decay", "blocks"):
        pairs = [p for p in text.split(";") if p.strip()]
        return [[float(x) if "." in x or "e" in x else int(x) for x in p.split(",")] for p in pairs]
    if text.lower() == "none":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _add_config_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", help="TOML file with run settings")
    grp = ap.add_argument_group("config overrides (same names as the config keys)")
    for key in config_keys():
        if key == "threads":
            continue
        grp.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE")
    ap.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads for node rounds (default: ${THREADS_ENV} or 1)",
    )


def _resolve_config(args) -> RunConfig:
    base = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in config_keys():
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            overrides[key] = _value(key, raw)
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    if threads is not None:
        overrides["threads"] = threads
    return build_config(overrides, base)


def _seed_list(text: str | None) -> list[int] | None:
    if not text:
        return None
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    seeds = _seed_list(args.seeds)
    if not seeds:
        return harness.run(cfg, dataset=getattr(args, "dataset", None))
    status = 0
    for seed in seeds:
        one = build_config({"seed": seed}, cfg)
        rc = harness.run(one, dataset=getattr(args, "dataset", None), output=harness.seed_output(cfg.output, seed))
        status = max(status, rc)
    return status


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    prob = harness.gen_data(cfg, args.out)
    rows, n = prob.data.shape
    print(f"wrote {args.out}: n={n} rows={rows} N={prob.num_nodes} p={prob.p} seed={prob.seed}")
    return 0


def cmd_replay(args) -> int:
    cfg = _resolve_config(args)
    seeds = _seed_list(args.seeds)
    if not seeds:
        return harness.replay(args.dataset, cfg)
    status = 0
    for seed in seeds:
        one = build_config({"seed": seed}, cfg)
        status = max(status, harness.replay(args.dataset, one, harness.seed_output(cfg.output, seed)))
    return status


def cmd_estimate(args) -> int:
    cfg = _resolve_config(args)
    for key, value in harness.estimate(cfg, args.dataset).items():
        print(f"{key} = {value:.17g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eflanding", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", allow_abbrev=False, help="run one experiment and write the metrics CSV")
    _add_config_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds; one CSV per seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-data", allow_abbrev=False, help="generate a PCA dataset file")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("replay", allow_abbrev=False, help="run on a saved dataset")
    _add_config_flags(p)
    p.add_argument("dataset", help="dataset written by gen-data")
    p.add_argument("--seeds", help="comma-separated seeds; one CSV per seed")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("estimate", allow_abbrev=False, help="print gradient bound, smoothness constants, mu and merit smoothness")
    _add_config_flags(p)
    p.add_argument("--dataset", help="estimate on a saved dataset instead of generating one")
    p.set_defaults(func=cmd_estimate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
