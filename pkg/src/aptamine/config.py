"""Layered configuration: built-in defaults < INI file < command-line flags.

The file is a plain INI document whose sections mirror the pipeline stages::

    [run]
    store_path = aptamine.db
    workers = 4

    [sequence]
    min_length = 20

List-valued options take one item per line.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, get_type_hints

from .errors import ConfigError

CONFIG_ENV = "APTAMINE_CONFIG"


@dataclass
class RunSection:
    targets: list[str] = field(default_factory=list)
    targets_file: str = ""
    pdf_dir: str = ""
    store_path: str = "aptamine.db"
    out_dir: str = "out"
    offline: bool = False
    workers: int = 4
    formats: list[str] = field(default_factory=lambda: ["csv", "json", "txt"])
    # ISO-8601 instant; pins every timestamp for reproducible runs
    fixed_time: str = ""


@dataclass
class QueriesSection:
    signal_terms: list[str] = field(
        default_factory=lambda: [
            "sequence[Title/Abstract]",
            "5'-[Title/Abstract]",
            "oligonucleotide[Title/Abstract]",
        ]
    )
    fallback_templates: list[str] = field(
        default_factory=lambda: ["{target} aptamer", "{target} SELEX", "{target} nucleic acid"]
    )
    biorxiv_templates: list[str] = field(default_factory=lambda: ["{target} aptamer"])
    retmax: int = 20


@dataclass
class NetworkSection:
    eutils_base: str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/"
    biorxiv_search_url: str = "https://www.biorxiv.org/search/{query}"
    pmc_landing_url: str = "https://www.ncbi.nlm.nih.gov/pmc/articles/{pmcid}/"
    ncbi_rps: float = 3.0
    ncbi_rps_with_key: float = 10.0
    biorxiv_rps: float = 1.0
    publisher_rps: float = 1.0
    max_retries: int = 4
    base_backoff: float = 1.0
    jitter: float = 0.5
    timeout_s: float = 30.0
    efetch_batch: int = 200
    user_agent: str = "aptamine/0.1"
    contact_email: str = ""
    harvest_supplements: bool = True
    max_supplements: int = 5
    always_fallback: bool = False
    # external command run for anti-bot protected files: "{url}" and "{output}"
    browser_cmd: str = ""


@dataclass
class SequenceSection:
    min_length: int = 20
    max_length: int = 100


@dataclass
class ValidationSection:
    gc_min: float = 0.20
    gc_max: float = 0.80


@dataclass
class SemfilterSection:
    backend: str = "model"
    endpoint: str = "http://localhost:11434/api/generate"
    model: str = "llama3.2:1b"
    max_concurrent: int = 1
    timeout_s: float = 60.0
    max_tokens: int = 128
    template_dir: str = ""
    negative_keywords: list[str] = field(
        default_factory=lambda: ["primer", "forward", "reverse", "probe", "amplification", "PCR"]
    )
    positive_keywords: list[str] = field(
        default_factory=lambda: ["aptamer", "SELEX", "binding", "Kd", "dissociation"]
    )
    negative_window: int = 200
    min_confidence: float = 0.0


@dataclass
class IngestSection:
    converter_cmd: str = ""
    max_tokens: int = 1000


@dataclass
class Config:
    run: RunSection = field(default_factory=RunSection)
    queries: QueriesSection = field(default_factory=QueriesSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)
    validation: ValidationSection = field(default_factory=ValidationSection)
    semfilter: SemfilterSection = field(default_factory=SemfilterSection)
    ingest: IngestSection = field(default_factory=IngestSection)

    def set(self, dotted: str, value: Any) -> None:
        section_name, _, key = dotted.partition(".")
        section = getattr(self, section_name, None)
        if section is None or key not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown option {dotted!r}")
        hint = get_type_hints(type(section))[key]
        setattr(section, key, _coerce(value, hint, dotted))

    def validate(self) -> None:
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        seq = self.sequence
        if not (10 <= seq.min_length < seq.max_length <= 500):
            raise ConfigError("sequence lengths must satisfy 10 <= min_length < max_length <= 500")
        if not (0 <= self.validation.gc_min <= self.validation.gc_max <= 1):
            raise ConfigError("validation gc bounds must satisfy 0 <= gc_min <= gc_max <= 1")
        if self.network.ncbi_rps <= 0 or self.network.base_backoff <= 0:
            raise ConfigError("network.ncbi_rps and network.base_backoff must be > 0")
        if self.semfilter.backend not in ("model", "heuristic"):
            raise ConfigError("semfilter.backend must be 'model' or 'heuristic'")
        unknown = set(self.run.formats) - {"csv", "json", "txt"}
        if unknown:
            raise ConfigError(f"unknown report formats: {sorted(unknown)}")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            parser[section_field.name] = {
                f.name: _render(getattr(section, f.name)) for f in fields(section)
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def fingerprint(self) -> str:
        payload = asdict(self)
        # run-location options do not change results
        for key in ("targets", "targets_file", "out_dir", "store_path", "fixed_time"):
            payload["run"].pop(key)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "\n".join(str(v) for v in value)
    return str(value)


def _coerce(value: Any, hint: Any, name: str) -> Any:
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            lowered = str(value).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        if hint == list[str]:
            if isinstance(value, (list, tuple)):
                return [str(v) for v in value]
            return [line.strip() for line in str(value).splitlines() if line.strip()]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Defaults, overlaid with the file at ``path`` or ``$APTAMINE_CONFIG``."""
    config = Config()
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return config
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(file, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {file}: {exc}") from exc
    for section in parser.sections():
        for key, value in parser.items(section):
            config.set(f"{section}.{key}", value)
    return config


def read_targets_file(path: str | os.PathLike) -> list[str]:
    """One target per line; blank lines and ``#`` comments ignored."""
    targets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            targets.append(line)
    return targets
