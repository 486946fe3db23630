"""Local documents: text extraction, section labels, chunks, keyword index."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import shlex
import subprocess
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConversionFailed, EmptyQuery, UnsupportedFormat
from .models import ArticleMetadata, Source

logger = logging.getLogger(__name__)

INDEX_FORMAT = "aptamine-keyword-index/1"
SUPPORTED_SUFFIXES = (".pdf", ".txt", ".md", ".markdown")


class SectionLabel(str, Enum):
    ABSTRACT = "Abstract"
    INTRODUCTION = "Introduction"
    METHODS = "Methods"
    RESULTS = "Results"
    DISCUSSION = "Discussion"
    SUPPLEMENT = "Supplement"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Section:
    label: SectionLabel
    start: int
    end: int


@dataclass(frozen=True)
class DocumentChunk:
    doc_id: str
    chunk_index: int
    text: str
    token_count: int
    section_label: SectionLabel = SectionLabel.UNKNOWN


@dataclass
class IngestedDocument:
    doc_id: str
    path: str
    text: str
    sections: list[Section]
    metadata: ArticleMetadata
    chunks: list[DocumentChunk] = field(default_factory=list)

    def section_text(self, label: SectionLabel) -> str | None:
        parts = [self.text[s.start : s.end] for s in self.sections if s.label == label]
        return "\n\n".join(parts) or None


def document_id(file_bytes: bytes) -> str:
    return hashlib.sha256(file_bytes).hexdigest()[:16]


def _normalize_newlines(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def pdf_pages(file_bytes: bytes) -> list[str]:
    from pypdf import PdfReader
    from pypdf.errors import PdfReadError

    try:
        reader = PdfReader(io.BytesIO(file_bytes))
        return [_normalize_newlines(page.extract_text() or "") for page in reader.pages]
    except (PdfReadError, ValueError, KeyError) as exc:
        raise ConversionFailed(f"cannot read PDF: {exc}") from exc


def _run_converter(file_bytes: bytes, command: str) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp, "input.pdf")
        dst = Path(tmp, "output.md")
        src.write_bytes(file_bytes)
        argv = [part.format(input=str(src), output=str(dst)) for part in shlex.split(command)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ConversionFailed(f"converter failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise ConversionFailed(
                f"converter exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:200]}"
            )
        if not dst.exists():
            raise ConversionFailed("converter produced no output file")
        return _normalize_newlines(dst.read_text(encoding="utf-8", errors="replace"))


def extract_text(file_bytes: bytes, converter_hook: str | None = None) -> str:
    """Plain text of a PDF, markdown or text file, paragraphs kept as blank lines."""
    if not file_bytes or not file_bytes.strip():
        raise ConversionFailed("empty file")
    if file_bytes.lstrip()[:5] == b"%PDF-":
        if converter_hook:
            text = _run_converter(file_bytes, converter_hook)
        else:
            text = "\n\n".join(pdf_pages(file_bytes))
        if not text.strip():
            raise ConversionFailed("no extractable text (scanned PDF?)")
        return text
    try:
        text = file_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise UnsupportedFormat("file is neither PDF nor UTF-8 text") from exc
    if "\x00" in text:
        raise UnsupportedFormat("binary content")
    return _normalize_newlines(text)


# first matching keyword decides the label, so "Results and Discussion" is Results
_HEADING_KEYWORDS = [
    ("abstract", SectionLabel.ABSTRACT),
    ("summary", SectionLabel.ABSTRACT),
    ("introduction", SectionLabel.INTRODUCTION),
    ("background", SectionLabel.INTRODUCTION),
    ("materials and methods", SectionLabel.METHODS),
    ("methods and materials", SectionLabel.METHODS),
    ("experimental section", SectionLabel.METHODS),
    ("experimental procedures", SectionLabel.METHODS),
    ("experimental", SectionLabel.METHODS),
    ("methods", SectionLabel.METHODS),
    ("methodology", SectionLabel.METHODS),
    ("results", SectionLabel.RESULTS),
    ("discussion", SectionLabel.DISCUSSION),
    ("conclusions", SectionLabel.DISCUSSION),
    ("conclusion", SectionLabel.DISCUSSION),
    ("supplementary", SectionLabel.SUPPLEMENT),
    ("supplemental", SectionLabel.SUPPLEMENT),
    ("supporting information", SectionLabel.SUPPLEMENT),
]
_HEADING_RE = re.compile(
    r"^[ \t]*(?:#{1,6}[ \t]*)?(?:(?:\d+(?:\.\d+)*|[IVXivx]+|[A-Z])[.)]?[ \t]+)?"
    r"(?P<title>[A-Za-z][A-Za-z &/-]*?)[ \t]*:?[ \t]*$",
    re.M,
)


def _heading_label(title: str) -> SectionLabel | None:
    lowered = " ".join(title.lower().split())
    if len(lowered.split()) > 6:
        return None
    for keyword, label in _HEADING_KEYWORDS:
        if lowered == keyword or lowered.startswith(keyword + " "):
            return label
    return None


def label_sections(text: str) -> list[Section]:
    """Disjoint, ordered sections opened by canonical heading lines."""
    if not text:
        raise ValueError("text must be non-empty")
    starts: list[tuple[int, SectionLabel]] = []
    for match in _HEADING_RE.finditer(text):
        label = _heading_label(match.group("title"))
        if label is not None:
            starts.append((match.start(), label))
    sections = []
    if not starts or text[: starts[0][0]].strip():
        first = starts[0][0] if starts else len(text)
        sections.append(Section(SectionLabel.UNKNOWN, 0, first))
    for i, (start, label) in enumerate(starts):
        end = starts[i + 1][0] if i + 1 < len(starts) else len(text)
        sections.append(Section(label, start, end))
    return sections


def _section_at(sections: Sequence[Section], offset: int) -> SectionLabel:
    for section in sections:
        if section.start <= offset < section.end:
            return section.label
    return SectionLabel.UNKNOWN


def _words(text: str) -> int:
    return len(text.split())


_PARAGRAPH_RE = re.compile(r"\S(?:.*?\S)?(?=\n[ \t]*\n|\s*\Z)", re.S)
_SENTENCE_RE = re.compile(r"\S.*?(?:[.!?](?=\s)|\Z)", re.S)


def _split_long(paragraph: str, max_tokens: int) -> list[str]:
    pieces: list[str] = []
    current: list[str] = []
    count = 0
    for sentence in (m.group(0).strip() for m in _SENTENCE_RE.finditer(paragraph)):
        n = _words(sentence)
        if n > max_tokens:
            if current:
                pieces.append(" ".join(current))
                current, count = [], 0
            words = sentence.split()
            pieces.extend(" ".join(words[i : i + max_tokens]) for i in range(0, len(words), max_tokens))
            continue
        if current and count + n > max_tokens:
            pieces.append(" ".join(current))
            current, count = [], 0
        current.append(sentence)
        count += n
    if current:
        pieces.append(" ".join(current))
    return pieces


def chunk(
    text: str,
    max_tokens: int = 1000,
    doc_id: str = "",
    sections: Sequence[Section] | None = None,
) -> list[DocumentChunk]:
    """Greedy paragraph packing; oversized paragraphs split by sentence, then hard-split.

    Tokens are whitespace-delimited words.
    """
    if not text or not text.strip():
        raise ValueError("text must be non-empty")
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    sections = sections or []
    units: list[tuple[int, str]] = []
    for match in _PARAGRAPH_RE.finditer(text):
        paragraph = match.group(0)
        if _words(paragraph) > max_tokens:
            units.extend((match.start(), piece) for piece in _split_long(paragraph, max_tokens))
        else:
            units.append((match.start(), paragraph))

    chunks: list[DocumentChunk] = []
    current: list[str] = []
    current_start = 0
    count = 0

    def flush() -> None:
        body = "\n\n".join(current)
        chunks.append(
            DocumentChunk(
                doc_id=doc_id,
                chunk_index=len(chunks),
                text=body,
                token_count=_words(body),
                section_label=_section_at(sections, current_start),
            )
        )

    for start, unit in units:
        n = _words(unit)
        if current and count + n > max_tokens:
            flush()
            current, count = [], 0
        if not current:
            current_start = start
        current.append(unit)
        count += n
    if current:
        flush()
    return chunks


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class KeywordIndex:
    """Inverted index from lowercased alphanumeric tokens to chunk term frequencies."""

    def __init__(self) -> None:
        self.chunks: dict[tuple[str, int], DocumentChunk] = {}
        self.postings: dict[str, dict[tuple[str, int], int]] = defaultdict(dict)

    def __len__(self) -> int:
        return len(self.chunks)

    def add(self, piece: DocumentChunk) -> None:
        key = (piece.doc_id, piece.chunk_index)
        if key in self.chunks:
            self.remove(key)
        self.chunks[key] = piece
        for token in tokenize(piece.text):
            bucket = self.postings[token]
            bucket[key] = bucket.get(key, 0) + 1

    def remove(self, key: tuple[str, int]) -> None:
        piece = self.chunks.pop(key)
        for token in set(tokenize(piece.text)):
            self.postings[token].pop(key, None)
            if not self.postings[token]:
                del self.postings[token]

    def drop_document(self, doc_id: str) -> None:
        for key in [k for k in self.chunks if k[0] == doc_id]:
            self.remove(key)

    def save(self, path: str | Path) -> None:
        payload = {
            "format": INDEX_FORMAT,
            "chunks": [
                {
                    "doc_id": c.doc_id,
                    "chunk_index": c.chunk_index,
                    "text": c.text,
                    "token_count": c.token_count,
                    "section_label": c.section_label.value,
                }
                for _, c in sorted(self.chunks.items())
            ],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> KeywordIndex:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != INDEX_FORMAT:
            raise ValueError(f"unsupported index format {payload.get('format')!r}")
        index = cls()
        for item in payload["chunks"]:
            index.add(
                DocumentChunk(
                    doc_id=item["doc_id"],
                    chunk_index=item["chunk_index"],
                    text=item["text"],
                    token_count=item["token_count"],
                    section_label=SectionLabel(item["section_label"]),
                )
            )
        return index


def index_documents(chunks: Iterable[DocumentChunk], index: KeywordIndex | None = None) -> KeywordIndex:
    chunks = list(chunks)
    if not chunks and index is None:
        raise ValueError("nothing to index")
    index = index if index is not None else KeywordIndex()
    for piece in chunks:
        index.add(piece)
    return index


def query_index(index: KeywordIndex, terms: str | Sequence[str]) -> list[DocumentChunk]:
    """Chunks ranked by summed term frequency, ties broken by (doc_id, chunk_index)."""
    text = terms if isinstance(terms, str) else " ".join(terms)
    tokens = tokenize(text)
    if not tokens:
        raise EmptyQuery("query has no searchable tokens")
    scores: dict[tuple[str, int], int] = defaultdict(int)
    for token in tokens:
        for key, tf in index.postings.get(token, {}).items():
            scores[key] += tf
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return [index.chunks[key] for key, _ in ranked]


_DOI_RE = re.compile(r"10\.\d{4,9}/\S+")


def guess_metadata(text: str, doc_id: str, path: Path, first_pages: str | None = None) -> ArticleMetadata:
    title = next((line.strip().lstrip("#").strip() for line in text.splitlines() if line.strip()), "")
    match = _DOI_RE.search(first_pages if first_pages is not None else text[:6000])
    doi = match.group(0).rstrip(".,;)]") if match else None
    return ArticleMetadata(
        title=title[:300] or path.name,
        source=Source.LOCAL_PDF,
        doi=doi,
        url=path.resolve().as_uri(),
        doc_id=doc_id,
    )


def ingest_file(path: str | Path, converter_hook: str | None = None, max_tokens: int = 1000) -> IngestedDocument:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise UnsupportedFormat(f"unsupported file type: {path.name}")
    doc_id = document_id(data)
    text = extract_text(data, converter_hook)
    first_pages = None
    if data.lstrip()[:5] == b"%PDF-" and not converter_hook:
        first_pages = "\n\n".join(pdf_pages(data)[:2])
    sections = label_sections(text)
    metadata = guess_metadata(text, doc_id, path, first_pages)
    chunks = chunk(text, max_tokens, doc_id=doc_id, sections=sections)
    return IngestedDocument(doc_id, str(path), text, sections, metadata, chunks)


def discover_files(directory: str | Path) -> list[Path]:
    root = Path(directory)
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES)
