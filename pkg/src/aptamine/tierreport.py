"""Three-tier outcome per target, report files, and run summaries.

A target's tier is exclusive: Tier1 when sequences were curated, Tier2 when
only aptamer-relevant leads were found, Tier3 otherwise. Run-level hit rates
are nested instead: a target "hits" tier n when it produced at least tier-n
evidence (sequences for 1, leads for 2, any source at all for 3), so
Tier1 % <= Tier2 % <= Tier3 % always holds.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import EmptyRun, ReportIOError
from .models import ArticleMetadata, CuratedSequence

FORMAT_VERSION = 1

SEQUENCE_COLUMNS = [
    "sequence",
    "length",
    "gc",
    "validation",
    "confidence",
    "affinity_kind",
    "affinity_value",
    "affinity_unit",
    "pmid",
    "doi",
    "title",
    "journal",
    "year",
    "context_snippet",
]
SOURCE_COLUMNS = ["source_role", "pmid", "pmcid", "doi", "title", "journal", "year", "source", "url"]
SNIPPET_LIMIT = 300


class Tier(str, Enum):
    TIER1 = "Tier1"
    TIER2 = "Tier2"
    TIER3 = "Tier3"


@dataclass(frozen=True)
class RunStats:
    queries_issued: int = 0
    fetches: int = 0
    model_calls: int = 0
    fallbacks: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "queries_issued": self.queries_issued,
            "fetches": self.fetches,
            "model_calls": self.model_calls,
            "fallbacks": self.fallbacks,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunStats:
        return cls(**{k: data[k] for k in ("queries_issued", "fetches", "model_calls", "fallbacks", "wall_time")})


@dataclass(frozen=True)
class TargetReport:
    target_name: str
    tier: Tier
    curated: tuple[CuratedSequence, ...] = ()
    leads: tuple[ArticleMetadata, ...] = ()
    all_sources: tuple[ArticleMetadata, ...] = ()
    run_stats: RunStats = field(default_factory=RunStats)
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        expected = classify_tier(self.curated, self.leads, self.all_sources)
        if Tier(self.tier) is not expected:
            raise ValueError(f"tier {self.tier} contradicts evidence ({expected.value})")
        source_keys = {a.key for a in self.all_sources}
        if any(a.key not in source_keys for a in self.leads):
            raise ValueError("every lead must be listed among all_sources")
        if any(a.key not in source_keys for c in self.curated for a in c.articles):
            raise ValueError("every curated article must be listed among all_sources")

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "target_name": self.target_name,
            "tier": Tier(self.tier).value,
            "curated": [c.to_dict() for c in self.curated],
            "leads": [a.to_dict() for a in self.leads],
            "all_sources": [a.to_dict() for a in self.all_sources],
            "run_stats": self.run_stats.to_dict(),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TargetReport:
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported report format_version {data.get('format_version')!r}")
        return cls(
            target_name=data["target_name"],
            tier=Tier(data["tier"]),
            curated=tuple(CuratedSequence.from_dict(c) for c in data["curated"]),
            leads=tuple(ArticleMetadata.from_dict(a) for a in data["leads"]),
            all_sources=tuple(ArticleMetadata.from_dict(a) for a in data["all_sources"]),
            run_stats=RunStats.from_dict(data["run_stats"]),
            warnings=tuple(data.get("warnings", ())),
        )


def classify_tier(
    curated: Sequence[CuratedSequence],
    leads: Sequence[ArticleMetadata],
    all_sources: Sequence[ArticleMetadata] = (),
) -> Tier:
    if curated:
        return Tier.TIER1
    if leads:
        return Tier.TIER2
    return Tier.TIER3


def slug(target_name: str) -> str:
    """Lowercase, runs of non-alphanumerics collapsed to one hyphen."""
    value = re.sub(r"[^a-z0-9]+", "-", target_name.lower()).strip("-")
    return value or "target"


def report_json(report: TargetReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def load_report(text: str) -> TargetReport:
    return TargetReport.from_dict(json.loads(text))


def _cells(row: Sequence[Any]) -> list[Any]:
    # the csv module cannot write NUL
    return [v.replace("\x00", "") if isinstance(v, str) else v for v in row]


def _article_row(role: str, article: ArticleMetadata) -> list[Any]:
    return _cells([
        role,
        article.pmid or "",
        article.pmcid or "",
        article.doi or "",
        article.title,
        article.journal,
        article.year or "",
        article.source.value,
        article.link or "",
    ])


def report_csv(report: TargetReport) -> str:
    """Sequence rows under one header, then source rows under a second header."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(SEQUENCE_COLUMNS)
    for record in report.curated:
        affinity = record.affinities[0] if record.affinities else None
        article = record.articles[0] if record.articles else None
        writer.writerow(
            _cells([
                record.core,
                record.length,
                f"{record.gc_fraction:.4f}",
                record.validation.status.value,
                f"{record.confidence:.2f}",
                affinity.kind if affinity else "",
                str(affinity.value) if affinity else "",
                affinity.unit if affinity else "",
                (article.pmid or "") if article else "",
                (article.doi or "") if article else "",
                article.title if article else "",
                article.journal if article else "",
                (article.year or "") if article else "",
                " ".join(record.context_snippet.split())[:SNIPPET_LIMIT],
            ])
        )
    writer.writerow(SOURCE_COLUMNS)
    lead_keys = {a.key for a in report.leads}
    for article in report.all_sources:
        writer.writerow(_article_row("lead" if article.key in lead_keys else "source", article))
    return buf.getvalue()


def read_report_csv(text: str) -> tuple[list[dict[str, str]], list[dict[str, str]]]:
    """Split a report CSV back into (sequence rows, source rows)."""
    rows = list(csv.reader(io.StringIO(text, newline="")))
    split = next(i for i, row in enumerate(rows) if row == SOURCE_COLUMNS)
    sequences = [dict(zip(SEQUENCE_COLUMNS, row)) for row in rows[1:split]]
    sources = [dict(zip(SOURCE_COLUMNS, row)) for row in rows[split + 1 :]]
    return sequences, sources


def report_txt(report: TargetReport) -> str:
    lines = [
        f"Target: {report.target_name}",
        f"Tier: {Tier(report.tier).value}",
        f"Sequences: {len(report.curated)}  Leads: {len(report.leads)}  Sources: {len(report.all_sources)}",
        "",
    ]
    if report.curated:
        lines.append("Sequences")
        for record in report.curated:
            lines.append(
                f"  {record.core}  ({record.length} nt, GC {record.gc_fraction:.2f}, "
                f"{record.validation.status.value}, confidence {record.confidence:.2f})"
            )
            for affinity in record.affinities:
                lines.append(f"    {affinity.kind} = {affinity.value} {affinity.unit} ({affinity.value_nM} nM)")
            for article in record.articles:
                lines.append(f"    {article.title} {article.link or ''}".rstrip())
        lines.append("")
    if report.leads:
        lines.append("Leads")
        for article in report.leads:
            lines.append(f"  {article.title}")
            lines.append(f"    {article.link or ''}")
        lines.append("")
    if report.all_sources:
        lines.append("Sources")
        for article in report.all_sources:
            year = f" ({article.year})" if article.year else ""
            lines.append(f"  {article.title}{year} {article.link or ''}".rstrip())
        lines.append("")
    if report.warnings:
        lines.append("Warnings")
        lines.extend(f"  {w}" for w in report.warnings)
        lines.append("")
    return "\n".join(lines)


_WRITERS = {"json": report_json, "csv": report_csv, "txt": report_txt}


def emit_report(report: TargetReport, formats: Iterable[str], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    paths = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for fmt in sorted(set(f.lower() for f in formats)):
            path = out / f"{slug(report.target_name)}.{fmt}"
            path.write_text(_WRITERS[fmt](report), encoding="utf-8", newline="")
            paths.append(path)
    except OSError as exc:
        raise ReportIOError(f"cannot write report for {report.target_name!r}: {exc}") from exc
    return paths


@dataclass(frozen=True)
class RunSummary:
    total: int
    tier_counts: dict[str, int]
    hit_counts: dict[str, int]
    hit_rates: dict[str, float]
    wall_time: float
    targets_per_hour: float | None
    timestamp: str
    config_fingerprint: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "tier_counts": self.tier_counts,
            "hit_counts": self.hit_counts,
            "hit_rates": self.hit_rates,
            "wall_time": self.wall_time,
            "targets_per_hour": self.targets_per_hour,
            "timestamp": self.timestamp,
            "config_fingerprint": self.config_fingerprint,
        }


def summarize_run(
    reports: Sequence[TargetReport],
    wall_time: float,
    timestamp: str | None = None,
    config_fingerprint: str = "",
) -> RunSummary:
    """Exclusive tier counts plus nested hit rates (percent of all targets)."""
    if not reports:
        raise EmptyRun("no target reports to summarize")
    total = len(reports)
    tier_counts = {t.value: sum(1 for r in reports if Tier(r.tier) is t) for t in Tier}
    hits = {
        Tier.TIER1.value: sum(1 for r in reports if r.curated),
        Tier.TIER2.value: sum(1 for r in reports if r.curated or r.leads),
        Tier.TIER3.value: sum(1 for r in reports if r.curated or r.leads or r.all_sources),
    }
    rates = {k: round(100.0 * v / total, 4) for k, v in hits.items()}
    throughput = total / (wall_time / 3600.0) if wall_time > 0 else None
    stamp = timestamp or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return RunSummary(total, tier_counts, hits, rates, wall_time, throughput, stamp, config_fingerprint)
