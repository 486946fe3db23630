"""Command-line entry point: ``aptamine ingest|search|export|config show``.

Exit codes: 0 on success (Tier3-only runs included), 1 when ingest finds no
readable files, 2 for configuration errors, 3 for storage or report I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .config import Config, load_config, read_targets_file
from .curate import Store
from .docingest import KeywordIndex
from .errors import ConfigError, EmptyRun, ReportIOError, StorageError
from .pipeline import Services, current_target, ingest_directory, run_search
from .tierreport import summarize_run

logger = logging.getLogger("aptamine")

EXIT_OK = 0
EXIT_NO_INPUT = 1
EXIT_CONFIG = 2
EXIT_STORAGE = 3


class _TargetFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.target = current_target.get()
        return True


def setup_logging(quiet: bool = False, verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.addFilter(_TargetFilter())
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s target=%(target)s %(name)s: %(message)s"))
    root = logging.getLogger("aptamine")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $APTAMINE_CONFIG)")
    common.add_argument("--store", help="sqlite store path")
    common.add_argument("--out", help="output directory")
    common.add_argument("--targets", nargs="+", action="extend", help="target names")
    common.add_argument("--targets-file", help="file with one target per line")
    common.add_argument("--pdf-dir", help="directory of PDFs or text files to ingest")
    common.add_argument("--offline", action="store_true", default=None, help="use the local store only")
    common.add_argument("--workers", type=int, help="parallel target pipelines")
    common.add_argument("--min-len", type=int, help="minimum sequence length")
    common.add_argument("--max-len", type=int, help="maximum sequence length")
    common.add_argument("--endpoint", help="local language-model HTTP endpoint")
    common.add_argument("--backend", choices=["model", "heuristic"], help="semantic filter backend")
    common.add_argument("--fixed-time", help="pin all timestamps (ISO-8601) for reproducible output")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override any config option",
    )
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="aptamine", description="Mine aptamer sequences from the literature.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="ingest local documents into the store")
    sub.add_parser("search", parents=[common], help="search targets locally, then online")
    export = sub.add_parser("export", parents=[common], help="export the store as CSV")
    export.add_argument("--output", help="CSV path (default: <out>/export.csv)")
    config = sub.add_parser("config", help="inspect configuration")
    config_sub = config.add_subparsers(dest="config_command", required=True)
    config_sub.add_parser("show", parents=[common], help="print the effective configuration")
    return parser


_FLAG_OPTIONS = {
    "store": "run.store_path",
    "out": "run.out_dir",
    "targets_file": "run.targets_file",
    "pdf_dir": "run.pdf_dir",
    "offline": "run.offline",
    "workers": "run.workers",
    "min_len": "sequence.min_length",
    "max_len": "sequence.max_length",
    "endpoint": "semfilter.endpoint",
    "backend": "semfilter.backend",
    "fixed_time": "run.fixed_time",
}


def resolve_config(args: argparse.Namespace) -> Config:
    """Defaults < file < ``--set`` < named flags."""
    config = load_config(args.config)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        config.set(key.strip(), value)
    for attr, option in _FLAG_OPTIONS.items():
        value = getattr(args, attr, None)
        if value is not None:
            config.set(option, value)
    if args.targets:
        config.set("run.targets", args.targets)
    config.validate()
    return config


def resolve_targets(config: Config) -> list[str]:
    targets = list(config.run.targets)
    if config.run.targets_file:
        try:
            targets.extend(read_targets_file(config.run.targets_file))
        except OSError as exc:
            raise ConfigError(f"cannot read targets file: {exc}") from exc
    # keep first occurrence, case-insensitively
    seen: set[str] = set()
    unique = []
    for target in (t.strip() for t in targets):
        if target and target.lower() not in seen:
            seen.add(target.lower())
            unique.append(target)
    return unique


def run_timestamp(config: Config) -> str:
    if config.run.fixed_time:
        return re.sub(r"[^0-9A-Za-z]", "", config.run.fixed_time)
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def index_path(config: Config) -> Path:
    return Path(f"{config.run.store_path}.index.json")


def _load_index(config: Config) -> KeywordIndex | None:
    path = index_path(config)
    if not path.is_file():
        return None
    try:
        return KeywordIndex.load(path)
    except (OSError, ValueError) as exc:
        logger.warning("ignoring unreadable keyword index %s: %s", path, exc)
        return None


def cmd_ingest(config: Config) -> int:
    pdf_dir = config.run.pdf_dir
    if not pdf_dir or not Path(pdf_dir).is_dir():
        raise ConfigError(f"--pdf-dir must name an existing directory (got {pdf_dir!r})")
    with Store(config.run.store_path) as store:
        services = Services.build(config, store, index=_load_index(config))
        summary = ingest_directory(services, pdf_dir, resolve_targets(config), index_path(config))
        store.record_run("ingest", services.now(), config.fingerprint(), summary.to_dict())
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    if summary.readable == 0:
        print(f"no readable documents in {pdf_dir}", file=sys.stderr)
        return EXIT_NO_INPUT
    return EXIT_OK


def cmd_search(config: Config) -> int:
    targets = resolve_targets(config)
    if not targets:
        raise ConfigError("no targets given (use --targets or --targets-file)")
    out_dir = Path(config.run.out_dir) / run_timestamp(config)
    started = time.perf_counter()
    with Store(config.run.store_path) as store:
        services = Services.build(config, store, index=_load_index(config))
        reports = run_search(services, targets, out_dir)
        wall = 0.0 if config.run.fixed_time else time.perf_counter() - started
        try:
            summary = summarize_run(reports, wall, services.now(), config.fingerprint())
        except EmptyRun as exc:  # pragma: no cover - targets checked above
            raise ConfigError(str(exc)) from exc
        payload = summary.to_dict()
        payload["metrics"] = services.metrics.snapshot()
        payload["targets"] = [{"target_name": r.target_name, "tier": r.tier.value} for r in reports]
        try:
            (out_dir / "summary.json").write_text(
                json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
        except OSError as exc:
            raise ReportIOError(f"cannot write summary: {exc}") from exc
        store.record_run("search", summary.timestamp, config.fingerprint(), payload)
    for report in reports:
        print(f"{report.target_name}\t{report.tier.value}\t{len(report.curated)} sequences")
    print(f"reports written to {out_dir}")
    return EXIT_OK


def cmd_export(config: Config, output: str | None = None) -> int:
    if not Path(config.run.store_path).is_file():
        raise StorageError(f"store not found: {config.run.store_path}")
    path = Path(output) if output else Path(config.run.out_dir) / "export.csv"
    with Store(config.run.store_path) as store:
        store.export_csv(path)
    print(path)
    return EXIT_OK


def cmd_config_show(config: Config) -> int:
    sys.stdout.write(config.to_ini())
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.quiet, args.verbose)
    try:
        config = resolve_config(args)
        if args.command == "ingest":
            return cmd_ingest(config)
        if args.command == "search":
            return cmd_search(config)
        if args.command == "export":
            return cmd_export(config, args.output)
        return cmd_config_show(config)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (StorageError, ReportIOError) as exc:
        logger.error("%s", exc)
        return EXIT_STORAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
