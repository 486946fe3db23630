"""PubMed and PMC (JATS) XML into :class:`ArticleMetadata` and body text."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from xml.etree import ElementTree
from xml.etree.ElementTree import Element

from .errors import EmptyBody, MalformedResponse, XmlSyntaxError
from .models import ArticleMetadata, Source

logger = logging.getLogger(__name__)

_YEAR_RE = re.compile(r"\b(\d{4})\b")


@dataclass(frozen=True)
class SectionSpan:
    title: str
    start: int
    end: int


def _parse(xml: str | bytes) -> Element:
    try:
        root = ElementTree.fromstring(xml)
    except ElementTree.ParseError as exc:
        raise XmlSyntaxError(str(exc)) from exc
    for el in root.iter():
        if isinstance(el.tag, str) and "}" in el.tag:
            el.tag = el.tag.split("}", 1)[1]
    return root


def _text(el: Element | None) -> str | None:
    if el is None:
        return None
    text = " ".join("".join(el.itertext()).split())
    return text or None


def _year(pub_date: Element | None) -> int | None:
    if pub_date is None:
        return None
    year = pub_date.findtext("Year") or pub_date.findtext("year")
    if year and year.strip().isdigit():
        return int(year.strip())
    medline = pub_date.findtext("MedlineDate") or ""
    match = _YEAR_RE.search(medline)
    return int(match.group(1)) if match else None


def _pubmed_authors(article: Element) -> tuple[str, ...]:
    authors = []
    for author in article.findall("./AuthorList/Author"):
        last = _text(author.find("LastName"))
        if last:
            initials = _text(author.find("Initials")) or ""
            authors.append(f"{last} {initials}".strip())
            continue
        collective = _text(author.find("CollectiveName"))
        if collective:
            authors.append(collective)
    return tuple(authors)


def _pubmed_record(node: Element) -> ArticleMetadata | None:
    citation = node.find("MedlineCitation")
    if citation is None:
        return None
    article = citation.find("Article")
    pmid = _text(citation.find("PMID"))
    ids = {}
    for article_id in node.findall("./PubmedData/ArticleIdList/ArticleId"):
        kind = (article_id.get("IdType") or "").lower()
        value = _text(article_id)
        if value and kind not in ids:
            ids[kind] = value
    doi = ids.get("doi")
    if doi is None and article is not None:
        for loc in article.findall("ELocationID"):
            if (loc.get("EIdType") or "").lower() == "doi":
                doi = _text(loc)
                break
    pmcid = ids.get("pmc")
    if pmcid and not pmcid.upper().startswith("PMC"):
        pmcid = f"PMC{pmcid}"
    title = _text(article.find("ArticleTitle")) if article is not None else None
    abstract = None
    journal = ""
    authors: tuple[str, ...] = ()
    year = None
    if article is not None:
        parts = []
        for piece in article.findall("./Abstract/AbstractText"):
            text = _text(piece)
            if text:
                label = piece.get("Label")
                parts.append(f"{label}: {text}" if label else text)
        abstract = " ".join(parts) or None
        journal = _text(article.find("./Journal/Title")) or _text(
            article.find("./Journal/ISOAbbreviation")
        ) or ""
        authors = _pubmed_authors(article)
        year = _year(article.find("./Journal/JournalIssue/PubDate"))
    if not (pmid or pmcid or doi) or not title:
        return None
    return ArticleMetadata(
        title=title,
        source=Source.PUBMED,
        pmid=pmid,
        pmcid=pmcid,
        doi=doi,
        authors=authors,
        journal=journal,
        year=year,
        abstract=abstract,
        url=f"https://pubmed.ncbi.nlm.nih.gov/{pmid}/" if pmid else None,
    )


def parse_pubmed_xml(xml: str | bytes, stats: Counter | None = None) -> list[ArticleMetadata]:
    """One record per ``PubmedArticle``; records without any identifier are skipped and counted."""
    root = _parse(xml)
    nodes = [root] if root.tag == "PubmedArticle" else root.findall(".//PubmedArticle")
    records = []
    for node in nodes:
        record = _pubmed_record(node)
        if record is None:
            logger.warning("skipping PubmedArticle without provenance or title")
            if stats is not None:
                stats["skipped_no_provenance"] += 1
            continue
        records.append(record)
    return records


# ---------------------------------------------------------------- JATS


def _jats_metadata(root: Element) -> ArticleMetadata:
    meta = root.find(".//front/article-meta")
    if meta is None:
        meta = root.find(".//article-meta")
    journal_meta = root.find(".//front/journal-meta")
    ids: dict[str, str] = {}
    title = abstract = None
    authors: list[str] = []
    year = None
    if meta is not None:
        for article_id in meta.findall("article-id"):
            kind = (article_id.get("pub-id-type") or "").lower()
            value = _text(article_id)
            if value and kind not in ids:
                ids[kind] = value
        title = _text(meta.find("./title-group/article-title"))
        abstract = _text(meta.find("abstract"))
        for contrib in meta.findall(".//contrib"):
            if contrib.get("contrib-type", "author") != "author":
                continue
            surname = _text(contrib.find(".//surname"))
            if surname:
                given = _text(contrib.find(".//given-names")) or ""
                initials = "".join(part[0] for part in re.split(r"[\s\-.]+", given) if part)
                authors.append(f"{surname} {initials}".strip())
            else:
                collab = _text(contrib.find("collab"))
                if collab:
                    authors.append(collab)
        for pub_date in meta.findall("pub-date"):
            year = _year(pub_date)
            if year:
                break
    journal = ""
    if journal_meta is not None:
        journal = _text(journal_meta.find(".//journal-title")) or ""
    pmcid = ids.get("pmc") or ids.get("pmcid")
    if pmcid and not pmcid.upper().startswith("PMC"):
        pmcid = f"PMC{pmcid}"
    if not (ids.get("pmid") or pmcid or ids.get("doi")):
        raise MalformedResponse("full-text article carries no identifier")
    return ArticleMetadata(
        title=title or "Untitled",
        source=Source.PMC,
        pmid=ids.get("pmid"),
        pmcid=pmcid,
        doi=ids.get("doi"),
        authors=tuple(authors),
        journal=journal,
        year=year,
        abstract=abstract,
        url=f"https://www.ncbi.nlm.nih.gov/pmc/articles/{pmcid}/" if pmcid else None,
    )


_SKIP = {"title", "label", "xref", "object-id"}


def _inline_text(el: Element) -> str:
    """Text of ``el`` without nested tables, figures and lists."""
    parts = [el.text or ""]
    for child in el:
        if child.tag not in ("table-wrap", "fig", "list", "disp-formula"):
            parts.append(_inline_text(child))
        else:
            parts.append(" ")
        parts.append(child.tail or "")
    return "".join(parts)


def _table_text(table_wrap: Element) -> list[str]:
    lines = []
    caption = _text(table_wrap.find("caption"))
    if caption:
        lines.append(caption)
    for row in table_wrap.iter("tr"):
        cells = [" ".join("".join(c.itertext()).split()) for c in row if c.tag in ("td", "th")]
        if any(cells):
            lines.append(" | ".join(cells))
    foot = _text(table_wrap.find("table-wrap-foot"))
    if foot:
        lines.append(foot)
    return ["\n".join(lines)] if lines else []


def _blocks(el: Element) -> list[str]:
    """Paragraph-level text blocks under ``el`` in document order."""
    blocks: list[str] = []
    for child in el:
        tag = child.tag
        if tag == "p":
            text = " ".join(_inline_text(child).split())
            if text:
                blocks.append(text)
            for nested in child:
                if nested.tag in ("table-wrap", "fig", "list"):
                    blocks.extend(_blocks_of(nested))
        elif tag in ("table-wrap", "fig", "list", "sec", "boxed-text", "list-item", "supplementary-material"):
            blocks.extend(_blocks_of(child))
        elif tag in _SKIP:
            continue
        else:
            blocks.extend(_blocks(child))
    return blocks


def _blocks_of(el: Element) -> list[str]:
    if el.tag == "table-wrap":
        return _table_text(el)
    if el.tag == "fig":
        caption = _text(el.find("caption"))
        return [caption] if caption else []
    if el.tag == "sec":
        blocks = []
        title = _text(el.find("title"))
        if title:
            blocks.append(title)
        return blocks + _blocks(el)
    return _blocks(el)


def parse_pmc_fulltext_xml(xml: str | bytes) -> tuple[ArticleMetadata, str, list[SectionSpan]]:
    """Metadata, concatenated body text and per-section character spans.

    The abstract becomes the first section. Each top-level body section is
    one span; nested sections fold into their parent. Table cells are joined
    with ``" | "`` so neighbouring cells never fuse into one token.
    """
    root = _parse(xml)
    article = root if root.tag == "article" else root.find(".//article")
    if article is None:
        article = root
    metadata = _jats_metadata(article)
    sections: list[tuple[str, list[str]]] = []
    abstract = article.find(".//front/article-meta/abstract")
    if abstract is not None:
        blocks = _blocks(abstract)
        if blocks:
            sections.append(("Abstract", blocks))
    body = article.find("body")
    if body is not None:
        loose: list[str] = []
        for child in body:
            if child.tag == "sec":
                if loose:
                    sections.append(("Body", loose))
                    loose = []
                title = _text(child.find("title")) or "Untitled"
                blocks = _blocks_of(child)
                if blocks:
                    sections.append((title, blocks))
            else:
                loose.extend(_blocks(_wrap(child)))
        if loose:
            sections.append(("Body", loose))
    floats = article.find("floats-group")
    if floats is not None:
        blocks = _blocks(floats)
        if blocks:
            sections.append(("Tables and Figures", blocks))
    pieces: list[str] = []
    spans: list[SectionSpan] = []
    cursor = 0
    for title, blocks in sections:
        text = "\n\n".join(blocks)
        if pieces:
            pieces.append("\n\n")
            cursor += 2
        spans.append(SectionSpan(title, cursor, cursor + len(text)))
        pieces.append(text)
        cursor += len(text)
    body_text = "".join(pieces)
    if not body_text.strip():
        raise EmptyBody("no paragraph text in document")
    return metadata, body_text, spans


def _wrap(el: Element) -> Element:
    holder = Element("holder")
    holder.append(el)
    return holder


def split_pmc_articleset(xml: str | bytes) -> list[str]:
    """Individual ``<article>`` documents from an efetch ``pmc-articleset``."""
    root = _parse(xml)
    if root.tag == "article":
        return [ElementTree.tostring(root, encoding="unicode")]
    return [ElementTree.tostring(a, encoding="unicode") for a in root.findall("article")]
