"""Validation, harmonization, deduplication and the local sequence store.

Everything here is deterministic; this module never consults the semantic
backend.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import sqlite3
import threading
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptySequence, StorageError
from .models import (
    AffinityMeasurement,
    ArticleMetadata,
    CuratedSequence,
    ExperimentalConditions,
    Modification,
    SequenceCandidate,
    ValidationState,
    ValidationStatus,
)
from .seqextract import FIVE_END, THREE_END

ALPHABET = frozenset("ACGTU")


@dataclass(frozen=True)
class ValidationBounds:
    min_length: int = 20
    max_length: int = 100
    gc_min: Fraction = Fraction(1, 5)
    gc_max: Fraction = Fraction(4, 5)

    @classmethod
    def from_values(cls, min_length: int, max_length: int, gc_min: float, gc_max: float) -> ValidationBounds:
        return cls(min_length, max_length, Fraction(str(gc_min)), Fraction(str(gc_max)))


def gc_content(core: str) -> Fraction:
    """Exact (G + C) / length."""
    if not core:
        raise EmptySequence("cannot compute GC content of an empty sequence")
    return Fraction(core.count("G") + core.count("C"), len(core))


def validate(core: str, bounds: ValidationBounds = ValidationBounds()) -> ValidationStatus:
    """Flag, never discard. Multiple violations become ``FlaggedMultiple``."""
    problems: list[tuple[ValidationState, str]] = []
    if not core or set(core) - ALPHABET:
        bad = "".join(sorted(set(core) - ALPHABET))
        problems.append((ValidationState.FLAGGED_ALPHABET, f"alphabet: invalid characters {bad!r}"))
    if not bounds.min_length <= len(core) <= bounds.max_length:
        problems.append(
            (
                ValidationState.FLAGGED_LENGTH,
                f"length: {len(core)} outside [{bounds.min_length}, {bounds.max_length}]",
            )
        )
    if core:
        gc = gc_content(core)
        if not bounds.gc_min <= gc <= bounds.gc_max:
            problems.append(
                (
                    ValidationState.FLAGGED_GC,
                    f"gc: {float(gc):.3f} outside [{float(bounds.gc_min):.2f}, {float(bounds.gc_max):.2f}]",
                )
            )
    if not problems:
        return ValidationStatus(ValidationState.VALID)
    if len(problems) == 1:
        return ValidationStatus(problems[0][0], problems[0][1])
    return ValidationStatus(ValidationState.FLAGGED_MULTIPLE, "; ".join(note for _, note in problems))


def sequence_id(core: str, target_name: str) -> str:
    digest = hashlib.sha256(f"{target_name.strip().lower()}\x00{core}".encode()).hexdigest()
    return f"seq-{digest[:16]}"


def _reverse_mods(mods: Iterable[Modification], length: int) -> tuple[Modification, ...]:
    flipped = []
    for mod in mods:
        if mod.position == FIVE_END:
            position: int | str = THREE_END
        elif mod.position == THREE_END:
            position = FIVE_END
        else:
            position = length - int(mod.position)
        flipped.append(replace(mod, position=position))
    return tuple(flipped)


def harmonize(
    item: SequenceCandidate | CuratedSequence,
    bounds: ValidationBounds = ValidationBounds(),
    target_name: str = "",
) -> CuratedSequence:
    """Uppercase, 5'→3' orientation and validation. Bases are never substituted."""
    if isinstance(item, CuratedSequence):
        core = item.core.upper()
        gc = float(gc_content(core)) if core else 0.0
        return replace(item, core=core, length=len(core), gc_fraction=gc, validation=validate(core, bounds))
    core = item.core.upper()
    mods = tuple(item.modifications)
    reversed_ = item.orientation == "3to5"
    if reversed_:
        core = core[::-1]
        mods = _reverse_mods(mods, len(core))
    return CuratedSequence(
        id=sequence_id(core, target_name),
        core=core,
        length=len(core),
        gc_fraction=float(gc_content(core)),
        validation=validate(core, bounds),
        orientation_normalized=reversed_,
        modifications=mods,
        target_name=target_name,
        context_snippet=item.context,
        was_joined=item.was_joined,
    )


def merge_articles(*groups: Iterable[ArticleMetadata]) -> tuple[ArticleMetadata, ...]:
    merged: dict[str, ArticleMetadata] = {}
    for group in groups:
        for article in group:
            current = merged.get(article.key)
            merged[article.key] = article if current is None else current.merged_with(article)
    return tuple(merged[key] for key in sorted(merged))


def merge_affinities(*groups: Iterable[AffinityMeasurement]) -> tuple[AffinityMeasurement, ...]:
    merged: dict[tuple, AffinityMeasurement] = {}
    for group in groups:
        for item in group:
            merged.setdefault(item.identity, item)
    return tuple(merged[key] for key in sorted(merged))


def survivor_key(record: CuratedSequence) -> tuple[str, str, str]:
    return (record.created_at, record.provenance_key, record.id)


def dedup(records: Sequence[CuratedSequence]) -> list[CuratedSequence]:
    """One record per exact core; the earliest record survives and absorbs the group's provenance."""
    groups: dict[str, list[CuratedSequence]] = {}
    for record in records:
        groups.setdefault(record.core, []).append(record)
    out = []
    for members in groups.values():
        members = sorted(members, key=survivor_key)
        survivor = members[0]
        out.append(
            replace(
                survivor,
                articles=merge_articles(*(m.articles for m in members)),
                affinities=merge_affinities(*(m.affinities for m in members)),
            )
        )
    return sorted(out, key=lambda r: (r.created_at, r.core))


# ---------------------------------------------------------------- store

SCHEMA_VERSION = 1

_MIGRATIONS = {
    1: """
    CREATE TABLE articles (
        key TEXT PRIMARY KEY,
        pmid TEXT, pmcid TEXT, doi TEXT,
        title TEXT NOT NULL,
        authors TEXT NOT NULL,
        journal TEXT NOT NULL,
        year INTEGER,
        source TEXT NOT NULL,
        url TEXT, abstract TEXT, doc_id TEXT
    );
    CREATE TABLE sequences (
        id TEXT PRIMARY KEY,
        core TEXT NOT NULL,
        target_name TEXT NOT NULL,
        target_key TEXT NOT NULL,
        length INTEGER NOT NULL,
        gc_fraction REAL NOT NULL,
        orientation_normalized INTEGER NOT NULL,
        modifications TEXT NOT NULL,
        validation_status TEXT NOT NULL,
        validation_notes TEXT NOT NULL,
        confidence REAL NOT NULL,
        verdict_backend TEXT NOT NULL,
        context_snippet TEXT NOT NULL,
        was_joined INTEGER NOT NULL,
        created_at TEXT NOT NULL,
        UNIQUE (core, target_key)
    );
    CREATE TABLE sequence_articles (
        sequence_id TEXT NOT NULL REFERENCES sequences(id) ON DELETE CASCADE,
        article_key TEXT NOT NULL REFERENCES articles(key),
        PRIMARY KEY (sequence_id, article_key)
    );
    CREATE TABLE affinities (
        sequence_id TEXT NOT NULL REFERENCES sequences(id) ON DELETE CASCADE,
        kind TEXT NOT NULL,
        value TEXT NOT NULL,
        unit TEXT NOT NULL,
        value_nm TEXT NOT NULL,
        context TEXT NOT NULL,
        source_doc TEXT NOT NULL,
        span_start INTEGER NOT NULL,
        span_end INTEGER NOT NULL,
        PRIMARY KEY (sequence_id, kind, value, unit, source_doc)
    );
    CREATE TABLE conditions (
        sequence_id TEXT NOT NULL REFERENCES sequences(id) ON DELETE CASCADE,
        source_doc TEXT NOT NULL,
        ph TEXT, temperature TEXT, buffer TEXT,
        flags TEXT NOT NULL,
        PRIMARY KEY (sequence_id, source_doc)
    );
    CREATE TABLE runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        command TEXT NOT NULL,
        started_at TEXT NOT NULL,
        config_fingerprint TEXT NOT NULL,
        summary TEXT NOT NULL
    );
    CREATE INDEX sequences_target ON sequences (target_key);
    """,
}

EXPORT_COLUMNS = [
    "id",
    "target_name",
    "sequence",
    "length",
    "gc_fraction",
    "validation_status",
    "validation_notes",
    "confidence",
    "verdict_backend",
    "orientation_normalized",
    "modifications",
    "article_keys",
    "dois",
    "affinities",
    "created_at",
]

UNASSIGNED = ""


class Store:
    """Single-file sqlite store. Writes are serialized; reads may run concurrently."""

    def __init__(self, path: str | Path) -> None:
        self.path = str(path)
        self._write_lock = threading.Lock()
        self._local = threading.local()
        try:
            if self.path != ":memory:":
                Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            conn = self._conn()
            self._migrate(conn)
        except (sqlite3.Error, OSError) as exc:
            raise StorageError(f"cannot open store {self.path}: {exc}") from exc

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self.path, timeout=30, isolation_level=None)
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA foreign_keys = ON")
            self._local.conn = conn
        return conn

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _migrate(self, conn: sqlite3.Connection) -> None:
        version = conn.execute("PRAGMA user_version").fetchone()[0]
        if version > SCHEMA_VERSION:
            raise StorageError(f"store schema {version} is newer than supported {SCHEMA_VERSION}")
        for step in range(version + 1, SCHEMA_VERSION + 1):
            conn.execute("BEGIN IMMEDIATE")
            try:
                for statement in _MIGRATIONS[step].split(";"):
                    if statement.strip():
                        conn.execute(statement)
                conn.execute(f"PRAGMA user_version = {step}")
                conn.execute("COMMIT")
            except BaseException:
                conn.execute("ROLLBACK")
                raise

    @property
    def schema_version(self) -> int:
        return self._conn().execute("PRAGMA user_version").fetchone()[0]

    # -- writes

    def upsert(self, record: CuratedSequence) -> str:
        """Insert, or merge provenance into the row with the same (core, target)."""
        with self._write_lock:
            conn = self._conn()
            try:
                conn.execute("BEGIN IMMEDIATE")
                try:
                    seq_id = self._write_sequence(conn, record)
                    self._write_articles(conn, seq_id, record.articles)
                    self._write_affinities(conn, seq_id, record.affinities)
                    self._write_conditions(conn, seq_id, record.conditions)
                    conn.execute("COMMIT")
                except BaseException:
                    conn.execute("ROLLBACK")
                    raise
            except sqlite3.Error as exc:
                raise StorageError(f"upsert failed: {exc}") from exc
            return seq_id

    def _write_sequence(self, conn: sqlite3.Connection, record: CuratedSequence) -> str:
        target_key = record.target_name.strip().lower()
        row = conn.execute(
            "SELECT id, confidence, created_at FROM sequences WHERE core = ? AND target_key = ?",
            (record.core, target_key),
        ).fetchone()
        if row is not None:
            if record.confidence > row["confidence"]:
                conn.execute(
                    "UPDATE sequences SET confidence = ?, verdict_backend = ? WHERE id = ?",
                    (record.confidence, record.verdict_backend, row["id"]),
                )
            if record.created_at and record.created_at < row["created_at"]:
                conn.execute("UPDATE sequences SET created_at = ? WHERE id = ?", (record.created_at, row["id"]))
            return row["id"]
        seq_id = record.id or sequence_id(record.core, record.target_name)
        conn.execute(
            "INSERT INTO sequences (id, core, target_name, target_key, length, gc_fraction,"
            " orientation_normalized, modifications, validation_status, validation_notes,"
            " confidence, verdict_backend, context_snippet, was_joined, created_at)"
            " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (
                seq_id,
                record.core,
                record.target_name,
                target_key,
                record.length,
                record.gc_fraction,
                int(record.orientation_normalized),
                json.dumps([m.to_dict() for m in record.modifications]),
                record.validation.status.value,
                record.validation.notes,
                record.confidence,
                record.verdict_backend,
                record.context_snippet,
                int(record.was_joined),
                record.created_at,
            ),
        )
        return seq_id

    def _write_articles(self, conn: sqlite3.Connection, seq_id: str, articles: Iterable[ArticleMetadata]) -> None:
        for article in articles:
            self.save_article(article, conn)
            conn.execute(
                "INSERT OR IGNORE INTO sequence_articles (sequence_id, article_key) VALUES (?, ?)",
                (seq_id, article.key),
            )

    def _write_affinities(
        self, conn: sqlite3.Connection, seq_id: str, affinities: Iterable[AffinityMeasurement]
    ) -> None:
        for item in affinities:
            conn.execute(
                "INSERT OR IGNORE INTO affinities VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    seq_id,
                    item.kind,
                    str(item.value),
                    item.unit,
                    str(item.value_nM),
                    item.context,
                    item.source_doc or "",
                    item.span[0],
                    item.span[1],
                ),
            )

    def _write_conditions(
        self, conn: sqlite3.Connection, seq_id: str, conditions: ExperimentalConditions | None
    ) -> None:
        if conditions is None or (conditions.empty and not conditions.flags):
            return
        conn.execute(
            "INSERT OR IGNORE INTO conditions VALUES (?, ?, ?, ?, ?, ?)",
            (
                seq_id,
                conditions.source_doc or "",
                None if conditions.ph is None else str(conditions.ph),
                None if conditions.temperature is None else str(conditions.temperature),
                conditions.buffer,
                json.dumps(list(conditions.flags)),
            ),
        )

    def save_article(self, article: ArticleMetadata, conn: sqlite3.Connection | None = None) -> None:
        conn = conn or self._conn()
        existing = conn.execute("SELECT * FROM articles WHERE key = ?", (article.key,)).fetchone()
        if existing is not None:
            article = _row_to_article(existing).merged_with(article)
        conn.execute(
            "INSERT OR REPLACE INTO articles VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (
                article.key,
                article.pmid,
                article.pmcid,
                article.doi,
                article.title,
                json.dumps(list(article.authors)),
                article.journal,
                article.year,
                article.source.value,
                article.url,
                article.abstract,
                article.doc_id,
            ),
        )

    def reassign(self, record: CuratedSequence, target_name: str, confidence: float, backend: str) -> str:
        """Copy an unassigned row under ``target_name``."""
        assigned = replace(
            record,
            id=sequence_id(record.core, target_name),
            target_name=target_name,
            confidence=confidence,
            verdict_backend=backend,
        )
        return self.upsert(assigned)

    def record_run(self, command: str, started_at: str, fingerprint: str, summary: dict) -> None:
        with self._write_lock:
            try:
                self._conn().execute(
                    "INSERT INTO runs (command, started_at, config_fingerprint, summary) VALUES (?, ?, ?, ?)",
                    (command, started_at, fingerprint, json.dumps(summary, sort_keys=True)),
                )
            except sqlite3.Error as exc:
                raise StorageError(f"cannot record run: {exc}") from exc

    # -- reads

    def _load(self, rows: Sequence[sqlite3.Row]) -> list[CuratedSequence]:
        conn = self._conn()
        out = []
        for row in rows:
            seq_id = row["id"]
            articles = [
                _row_to_article(a)
                for a in conn.execute(
                    "SELECT a.* FROM articles a JOIN sequence_articles s ON s.article_key = a.key"
                    " WHERE s.sequence_id = ? ORDER BY a.key",
                    (seq_id,),
                )
            ]
            affinities = [
                AffinityMeasurement.from_dict(
                    {
                        "kind": a["kind"],
                        "value": a["value"],
                        "unit": a["unit"],
                        "value_nM": a["value_nm"],
                        "context": a["context"],
                        "source_doc": a["source_doc"] or None,
                        "span": [a["span_start"], a["span_end"]],
                    }
                )
                for a in conn.execute(
                    "SELECT * FROM affinities WHERE sequence_id = ? ORDER BY kind, value, unit, source_doc",
                    (seq_id,),
                )
            ]
            cond = conn.execute(
                "SELECT * FROM conditions WHERE sequence_id = ? ORDER BY source_doc LIMIT 1", (seq_id,)
            ).fetchone()
            conditions = None
            if cond is not None:
                conditions = ExperimentalConditions.from_dict(
                    {
                        "ph": cond["ph"],
                        "temperature": cond["temperature"],
                        "buffer": cond["buffer"],
                        "source_doc": cond["source_doc"] or None,
                        "flags": json.loads(cond["flags"]),
                    }
                )
            out.append(
                CuratedSequence(
                    id=seq_id,
                    core=row["core"],
                    length=row["length"],
                    gc_fraction=row["gc_fraction"],
                    validation=ValidationStatus(ValidationState(row["validation_status"]), row["validation_notes"]),
                    orientation_normalized=bool(row["orientation_normalized"]),
                    modifications=tuple(Modification.from_dict(m) for m in json.loads(row["modifications"])),
                    confidence=row["confidence"],
                    verdict_backend=row["verdict_backend"],
                    target_name=row["target_name"],
                    articles=tuple(articles),
                    affinities=tuple(affinities),
                    conditions=conditions,
                    context_snippet=row["context_snippet"],
                    created_at=row["created_at"],
                    was_joined=bool(row["was_joined"]),
                )
            )
        return out

    def query(self, target_name: str) -> list[CuratedSequence]:
        """All rows for ``target_name`` (case-insensitive), flagged rows included."""
        try:
            rows = self._conn().execute(
                "SELECT * FROM sequences WHERE target_key = ? ORDER BY created_at, id",
                (target_name.strip().lower(),),
            ).fetchall()
            return self._load(rows)
        except sqlite3.Error as exc:
            raise StorageError(f"query failed: {exc}") from exc

    def unassigned_for_docs(self, doc_ids: Iterable[str]) -> list[CuratedSequence]:
        doc_ids = sorted(set(doc_ids))
        if not doc_ids:
            return []
        marks = ",".join("?" * len(doc_ids))
        rows = self._conn().execute(
            "SELECT DISTINCT s.* FROM sequences s"
            " JOIN sequence_articles sa ON sa.sequence_id = s.id"
            " JOIN articles a ON a.key = sa.article_key"
            f" WHERE s.target_key = ? AND a.doc_id IN ({marks}) ORDER BY s.created_at, s.id",
            (UNASSIGNED, *doc_ids),
        ).fetchall()
        return self._load(rows)

    def all_sequences(self) -> list[CuratedSequence]:
        rows = self._conn().execute("SELECT * FROM sequences ORDER BY target_key, core").fetchall()
        return self._load(rows)

    def count(self) -> int:
        return self._conn().execute("SELECT COUNT(*) FROM sequences").fetchone()[0]

    def export_csv(self, path: str | Path) -> Path:
        """Whole sequence table as CSV in :data:`EXPORT_COLUMNS` order."""
        try:
            records = self.all_sequences()
        except sqlite3.Error as exc:
            raise StorageError(f"export failed: {exc}") from exc
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(EXPORT_COLUMNS)
        for r in records:
            row = [
                r.id,
                r.target_name,
                r.core,
                r.length,
                f"{r.gc_fraction:.4f}",
                r.validation.status.value,
                r.validation.notes,
                f"{r.confidence:.2f}",
                r.verdict_backend,
                int(r.orientation_normalized),
                json.dumps([m.to_dict() for m in r.modifications]),
                ";".join(a.key for a in r.articles),
                ";".join(a.doi for a in r.articles if a.doi),
                ";".join(f"{a.kind}={a.value} {a.unit}" for a in r.affinities),
                r.created_at,
            ]
            # the csv module cannot write NUL
            writer.writerow([v.replace("\x00", "") if isinstance(v, str) else v for v in row])
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue(), encoding="utf-8", newline="")
        return path


def _row_to_article(row: sqlite3.Row) -> ArticleMetadata:
    return ArticleMetadata(
        title=row["title"],
        source=row["source"],
        pmid=row["pmid"],
        pmcid=row["pmcid"],
        doi=row["doi"],
        authors=tuple(json.loads(row["authors"])),
        journal=row["journal"],
        year=row["year"],
        url=row["url"],
        abstract=row["abstract"],
        doc_id=row["doc_id"],
    )


def upsert(store: Store, record: CuratedSequence) -> str:
    return store.upsert(record)


def query_store(store: Store, target_name: str) -> list[CuratedSequence]:
    return store.query(target_name)
