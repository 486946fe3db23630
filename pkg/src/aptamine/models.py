"""Domain records passed between pipeline stages.

Every record knows how to turn itself into a plain JSON-compatible dict and
back. Decimals travel as strings so values survive a round trip exactly.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from decimal import Decimal
from enum import Enum
from typing import Any, Mapping


class Source(str, Enum):
    PUBMED = "PubMed"
    PMC = "PMC"
    BIORXIV = "BioRxiv"
    LOCAL_PDF = "LocalPDF"


class ValidationState(str, Enum):
    VALID = "Valid"
    FLAGGED_LENGTH = "FlaggedLength"
    FLAGGED_GC = "FlaggedGC"
    FLAGGED_ALPHABET = "FlaggedAlphabet"
    FLAGGED_MULTIPLE = "FlaggedMultiple"


def _opt_str(value: Any) -> str | None:
    if value is None:
        return None
    text = str(value).strip()
    return text or None


def _dec(value: Any) -> Decimal | None:
    return None if value is None else Decimal(str(value))


def _dec_str(value: Decimal | None) -> str | None:
    return None if value is None else str(value)


@dataclass(frozen=True)
class ArticleMetadata:
    """One literature record. Provenance is never empty."""

    title: str
    source: Source
    pmid: str | None = None
    pmcid: str | None = None
    doi: str | None = None
    authors: tuple[str, ...] = ()
    journal: str = ""
    year: int | None = None
    url: str | None = None
    abstract: str | None = None
    doc_id: str | None = None

    def __post_init__(self) -> None:
        title = " ".join(self.title.split())
        if not title:
            raise ValueError("article title is empty")
        object.__setattr__(self, "title", title)
        object.__setattr__(self, "source", Source(self.source))
        for name in ("pmid", "pmcid", "doi", "url", "abstract", "doc_id"):
            object.__setattr__(self, name, _opt_str(getattr(self, name)))
        object.__setattr__(self, "authors", tuple(self.authors))
        if not any((self.pmid, self.pmcid, self.doi, self.url)):
            raise ValueError(f"article {title!r} has no identifier")

    @property
    def key(self) -> str:
        """Stable identity used for dedup and store joins."""
        if self.pmid:
            return f"pmid:{self.pmid}"
        if self.pmcid:
            return f"pmcid:{self.pmcid}"
        if self.doi:
            return f"doi:{self.doi.lower()}"
        if self.doc_id:
            return f"doc:{self.doc_id}"
        return f"url:{self.url}"

    @property
    def link(self) -> str | None:
        """Best direct hyperlink to the full text."""
        if self.pmcid:
            return f"https://www.ncbi.nlm.nih.gov/pmc/articles/{self.pmcid}/"
        if self.doi:
            return f"https://doi.org/{self.doi}"
        if self.url:
            return self.url
        return f"https://pubmed.ncbi.nlm.nih.gov/{self.pmid}/"

    def merged_with(self, other: ArticleMetadata) -> ArticleMetadata:
        """Fill absent fields of self from other (same article seen twice)."""
        updates = {}
        for name in ("pmid", "pmcid", "doi", "url", "abstract", "doc_id", "year"):
            if getattr(self, name) is None and getattr(other, name) is not None:
                updates[name] = getattr(other, name)
        if not self.journal and other.journal:
            updates["journal"] = other.journal
        if not self.authors and other.authors:
            updates["authors"] = other.authors
        return replace(self, **updates) if updates else self

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "source": self.source.value,
            "pmid": self.pmid,
            "pmcid": self.pmcid,
            "doi": self.doi,
            "authors": list(self.authors),
            "journal": self.journal,
            "year": self.year,
            "url": self.url,
            "abstract": self.abstract,
            "doc_id": self.doc_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ArticleMetadata:
        return cls(
            title=data["title"],
            source=Source(data["source"]),
            pmid=data.get("pmid"),
            pmcid=data.get("pmcid"),
            doi=data.get("doi"),
            authors=tuple(data.get("authors") or ()),
            journal=data.get("journal") or "",
            year=data.get("year"),
            url=data.get("url"),
            abstract=data.get("abstract"),
            doc_id=data.get("doc_id"),
        )


@dataclass(frozen=True)
class Modification:
    """A decoration stripped from a sequence.

    ``position`` is ``"5'"`` or ``"3'"`` for terminal decorations, otherwise
    the number of core bases that precede the decoration.
    """

    position: int | str
    code: str
    style: str = "*"

    def to_dict(self) -> dict[str, Any]:
        return {"position": self.position, "code": self.code, "style": self.style}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Modification:
        return cls(position=data["position"], code=data["code"], style=data.get("style", "*"))


@dataclass(frozen=True)
class SequenceCandidate:
    raw: str
    core: str
    span: tuple[int, int]
    context: str = ""
    context_span: tuple[int, int] | None = None
    modifications: tuple[Modification, ...] = ()
    orientation: str = "5to3"
    was_joined: bool = False
    source_doc: str | None = None


@dataclass(frozen=True)
class AffinityMeasurement:
    kind: str
    value: Decimal
    unit: str
    value_nM: Decimal
    span: tuple[int, int] = (0, 0)
    context: str = ""
    source_doc: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "value": str(self.value),
            "unit": self.unit,
            "value_nM": str(self.value_nM),
            "span": list(self.span),
            "context": self.context,
            "source_doc": self.source_doc,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AffinityMeasurement:
        return cls(
            kind=data["kind"],
            value=Decimal(data["value"]),
            unit=data["unit"],
            value_nM=Decimal(data["value_nM"]),
            span=tuple(data.get("span") or (0, 0)),
            context=data.get("context") or "",
            source_doc=data.get("source_doc"),
        )

    @property
    def identity(self) -> tuple:
        return (self.kind, str(self.value), self.unit, self.source_doc or "")


@dataclass(frozen=True)
class ExperimentalConditions:
    ph: Decimal | None = None
    temperature: Decimal | None = None
    buffer: str | None = None
    source_doc: str | None = None
    flags: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return self.ph is None and self.temperature is None and self.buffer is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "ph": _dec_str(self.ph),
            "temperature": _dec_str(self.temperature),
            "buffer": self.buffer,
            "source_doc": self.source_doc,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentalConditions:
        return cls(
            ph=_dec(data.get("ph")),
            temperature=_dec(data.get("temperature")),
            buffer=data.get("buffer"),
            source_doc=data.get("source_doc"),
            flags=tuple(data.get("flags") or ()),
        )


@dataclass(frozen=True)
class ValidationStatus:
    status: ValidationState
    notes: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status.value, "notes": self.notes}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ValidationStatus:
        return cls(status=ValidationState(data["status"]), notes=data.get("notes", ""))


@dataclass(frozen=True)
class CuratedSequence:
    id: str
    core: str
    length: int
    gc_fraction: float
    validation: ValidationStatus
    orientation_normalized: bool = False
    modifications: tuple[Modification, ...] = ()
    confidence: float = 0.0
    verdict_backend: str = "Heuristic"
    target_name: str = ""
    articles: tuple[ArticleMetadata, ...] = ()
    affinities: tuple[AffinityMeasurement, ...] = ()
    conditions: ExperimentalConditions | None = None
    context_snippet: str = ""
    created_at: str = ""
    was_joined: bool = False

    @property
    def provenance_key(self) -> str:
        keys = sorted(a.key for a in self.articles)
        return keys[0] if keys else ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "core": self.core,
            "length": self.length,
            "gc_fraction": self.gc_fraction,
            "validation": self.validation.to_dict(),
            "orientation_normalized": self.orientation_normalized,
            "modifications": [m.to_dict() for m in self.modifications],
            "confidence": self.confidence,
            "verdict_backend": self.verdict_backend,
            "target_name": self.target_name,
            "articles": [a.to_dict() for a in self.articles],
            "affinities": [a.to_dict() for a in self.affinities],
            "conditions": self.conditions.to_dict() if self.conditions else None,
            "context_snippet": self.context_snippet,
            "created_at": self.created_at,
            "was_joined": self.was_joined,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CuratedSequence:
        conditions = data.get("conditions")
        return cls(
            id=data["id"],
            core=data["core"],
            length=data["length"],
            gc_fraction=data["gc_fraction"],
            validation=ValidationStatus.from_dict(data["validation"]),
            orientation_normalized=data.get("orientation_normalized", False),
            modifications=tuple(Modification.from_dict(m) for m in data.get("modifications", ())),
            confidence=data.get("confidence", 0.0),
            verdict_backend=data.get("verdict_backend", "Heuristic"),
            target_name=data.get("target_name", ""),
            articles=tuple(ArticleMetadata.from_dict(a) for a in data.get("articles", ())),
            affinities=tuple(AffinityMeasurement.from_dict(a) for a in data.get("affinities", ())),
            conditions=ExperimentalConditions.from_dict(conditions) if conditions else None,
            context_snippet=data.get("context_snippet", ""),
            created_at=data.get("created_at", ""),
            was_joined=data.get("was_joined", False),
        )


@dataclass
class RunMetrics:
    """Thread-safe counters surfaced in run statistics."""

    counts: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def incr(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self.counts[name] += amount

    def __getitem__(self, name: str) -> int:
        with self._lock:
            return self.counts[name]

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(sorted(self.counts.items()))
