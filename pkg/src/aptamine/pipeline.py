"""Per-target orchestration: local store first, then online escalation.

Workers share the rate limiter, HTTP session, model backend and store; each
target gets its own metrics so run statistics stay per-target.
"""

from __future__ import annotations

import contextvars
import logging
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests

from .config import Config
from .curate import (
    UNASSIGNED,
    Store,
    ValidationBounds,
    dedup,
    harmonize,
    merge_articles,
)
from .docingest import (
    KeywordIndex,
    SectionLabel,
    discover_files,
    index_documents,
    ingest_file,
    query_index,
)
from .errors import (
    AptamineError,
    ConversionFailed,
    EmptyBody,
    EmptyQuery,
    MalformedResponse,
    NetworkError,
    UnsupportedFormat,
    XmlSyntaxError,
)
from .metadataxml import parse_pmc_fulltext_xml, parse_pubmed_xml, split_pmc_articleset
from .models import ArticleMetadata, CuratedSequence, RunMetrics
from .netdiscovery import (
    NCBI_API_KEY_ENV,
    FetchRequest,
    HostClass,
    HttpClient,
    LinkKind,
    Purpose,
    RateLimiter,
    RateLimiterConfig,
    browser_fallback,
    efetch,
    esearch,
    harvest_supplements,
    search_biorxiv,
)
from .querygen import QuerySource, StageLabel, make_plan
from .semfilter import HEURISTIC, ClassificationRequest, SemanticFilter
from .seqextract import extract_affinities, extract_conditions, find_sequences
from .tierreport import RunStats, TargetReport, classify_tier, emit_report

logger = logging.getLogger(__name__)

current_target: contextvars.ContextVar[str] = contextvars.ContextVar("current_target", default="-")

_RELEVANCE_WORDS = ("aptamer", "selex")
_NETWORK_ERRORS = (NetworkError, MalformedResponse, XmlSyntaxError)


def _relevant(article: ArticleMetadata) -> bool:
    text = f"{article.title} {article.abstract or ''}".lower()
    return any(word in text for word in _RELEVANCE_WORDS)


class SourceCollection:
    """Articles keyed by identity; records sharing any identifier are merged."""

    def __init__(self) -> None:
        self._articles: dict[str, ArticleMetadata] = {}
        self._alias: dict[str, str] = {}

    @staticmethod
    def _ids(article: ArticleMetadata) -> list[str]:
        ids = []
        if article.pmid:
            ids.append(f"pmid:{article.pmid}")
        if article.pmcid:
            ids.append(f"pmcid:{article.pmcid.upper()}")
        if article.doi:
            ids.append(f"doi:{article.doi.lower()}")
        if not ids:
            ids.append(article.key)
        return ids

    def add(self, article: ArticleMetadata) -> ArticleMetadata:
        existing_keys = sorted({self._alias[i] for i in self._ids(article) if i in self._alias})
        merged = article
        for key in existing_keys:
            merged = self._articles.pop(key).merged_with(merged)
        self._articles[merged.key] = merged
        for ident in self._ids(merged):
            self._alias[ident] = merged.key
        for key in existing_keys:
            for ident, target in list(self._alias.items()):
                if target == key:
                    self._alias[ident] = merged.key
        return merged

    def get(self, article: ArticleMetadata) -> ArticleMetadata:
        for ident in self._ids(article):
            if ident in self._alias:
                return self._articles[self._alias[ident]]
        return article

    def all(self) -> list[ArticleMetadata]:
        return [self._articles[k] for k in sorted(self._articles)]


@dataclass
class Services:
    """Shared, thread-safe collaborators for all worker pipelines."""

    config: Config
    store: Store
    semfilter: SemanticFilter
    limiter: RateLimiter | None = None
    session: requests.Session | None = None
    api_key: str | None = None
    index: KeywordIndex | None = None
    metrics: RunMetrics = field(default_factory=RunMetrics)

    @property
    def deterministic(self) -> bool:
        return bool(self.config.run.fixed_time)

    def now(self) -> str:
        if self.config.run.fixed_time:
            return self.config.run.fixed_time
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")

    @property
    def bounds(self) -> ValidationBounds:
        return ValidationBounds.from_values(
            self.config.sequence.min_length,
            self.config.sequence.max_length,
            self.config.validation.gc_min,
            self.config.validation.gc_max,
        )

    @classmethod
    def build(
        cls,
        config: Config,
        store: Store,
        semfilter: SemanticFilter | None = None,
        index: KeywordIndex | None = None,
    ) -> Services:
        api_key = os.environ.get(NCBI_API_KEY_ENV) or None
        metrics = RunMetrics()
        return cls(
            config=config,
            store=store,
            semfilter=semfilter or SemanticFilter.from_settings(config.semfilter),
            limiter=RateLimiter(RateLimiterConfig.from_settings(config.network, api_key)),
            session=requests.Session(),
            api_key=api_key,
            index=index,
            metrics=metrics,
        )


class TargetPipeline:
    """Runs every stage for one target and produces its :class:`TargetReport`."""

    def __init__(self, services: Services, target: str) -> None:
        self.services = services
        self.config = services.config
        self.target = target
        self.metrics = RunMetrics()
        self.filter = SemanticFilter(
            backend=services.semfilter.backend,
            rules=services.semfilter.rules,
            templates=services.semfilter.templates,
            metrics=self.metrics,
        )
        self.client = None
        if not self.config.run.offline:
            self.client = HttpClient(
                limiter=services.limiter,
                settings=self.config.network,
                session=services.session,
                api_key=services.api_key,
                metrics=self.metrics,
            )
        self.sources = SourceCollection()
        self.warnings: list[str] = []
        self.mined: dict[str, int] = Counter()

    # -- mining

    def mine_text(
        self,
        text: str,
        article: ArticleMetadata,
        abstract: str | None = None,
        assign: bool = True,
    ) -> list[CuratedSequence]:
        """Extract, judge and harmonize candidates. ``assign=False`` skips the target check."""
        seq = self.config.sequence
        target = self.target if assign else UNASSIGNED
        kept = []
        for candidate in find_sequences(text, seq.min_length, seq.max_length, source_doc=article.key):
            self.metrics.incr("candidates")
            request = ClassificationRequest(
                core_sequence=candidate.core.upper(),
                context=candidate.context,
                target_name=self.target,
                abstract=abstract if abstract is not None else article.abstract,
                locus=candidate.context_span,
            )
            verdict = self.filter.classify_candidate(request)
            if not verdict.is_aptamer:
                self.metrics.incr("dropped_not_aptamer")
                continue
            assignment = self.filter.verify_target_assignment(request) if assign else verdict
            if assign and not assignment.matches_target:
                self.metrics.incr("dropped_off_target")
                continue
            confidence = min(verdict.confidence, assignment.confidence)
            if confidence < self.config.semfilter.min_confidence:
                self.metrics.incr("dropped_low_confidence")
                continue
            backend = HEURISTIC if HEURISTIC in (verdict.backend, assignment.backend) else verdict.backend
            record = harmonize(candidate, self.services.bounds, target_name=target)
            conditions = extract_conditions(candidate.context, source_doc=article.key)
            kept.append(
                replace(
                    record,
                    confidence=confidence,
                    verdict_backend=backend,
                    articles=(article,),
                    affinities=tuple(extract_affinities(candidate.context, source_doc=article.key)),
                    conditions=None if conditions.empty and not conditions.flags else conditions,
                    created_at=self.services.now(),
                )
            )
        self.mined[article.key] += len(kept)
        return kept

    # -- local

    def local_records(self) -> list[CuratedSequence]:
        store = self.services.store
        index = self.services.index
        if index is not None and len(index):
            try:
                hits = query_index(index, self.target)
            except EmptyQuery:
                hits = []
            for record in store.unassigned_for_docs({c.doc_id for c in hits}):
                article = record.articles[0] if record.articles else None
                request = ClassificationRequest(
                    core_sequence=record.core,
                    context=record.context_snippet,
                    target_name=self.target,
                    abstract=article.abstract if article else None,
                )
                verdict = self.filter.verify_target_assignment(request)
                if verdict.matches_target:
                    store.reassign(
                        record,
                        self.target,
                        min(record.confidence, verdict.confidence),
                        HEURISTIC if HEURISTIC in (verdict.backend, record.verdict_backend) else verdict.backend,
                    )
        return store.query(self.target)

    # -- online

    def _safe(self, what: str, fn: Callable, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _NETWORK_ERRORS as exc:
            message = f"{what}: {exc}"
            logger.warning(message)
            self.warnings.append(message)
            return None

    def _fetch_pubmed(self, pmids: Sequence[str]) -> list[ArticleMetadata]:
        if not pmids:
            return []
        results = self._safe("efetch pubmed", efetch, list(pmids), "pubmed", self.client) or []
        records = []
        for result in results:
            stats: Counter = Counter()
            parsed = self._safe("parse pubmed", parse_pubmed_xml, result.body, stats)
            if stats["skipped_no_provenance"]:
                self.metrics.incr("skipped_no_provenance", stats["skipped_no_provenance"])
            records.extend(parsed or [])
        return records

    def _fetch_pmc(self, pmc_ids: Sequence[str]) -> list[tuple[ArticleMetadata, str]]:
        if not pmc_ids:
            return []
        results = self._safe("efetch pmc", efetch, list(pmc_ids), "pmc", self.client) or []
        documents = []
        for result in results:
            articles = self._safe("split pmc articleset", split_pmc_articleset, result.body) or []
            for xml in articles:
                try:
                    metadata, body, _ = parse_pmc_fulltext_xml(xml)
                except (XmlSyntaxError, EmptyBody, MalformedResponse, ValueError) as exc:
                    self.metrics.incr("pmc_unparseable")
                    logger.info("skipping PMC document: %s", exc)
                    continue
                documents.append((metadata, body))
        return documents

    def _supplement_texts(self, article: ArticleMetadata) -> list[str]:
        settings = self.config.network
        if not settings.harvest_supplements or not article.pmcid:
            return []
        landing_url = settings.pmc_landing_url.format(pmcid=article.pmcid)
        page = self._safe(
            "PMC landing page",
            self.client.acquire,
            FetchRequest(landing_url, HostClass.NCBI, Purpose.SUPPLEMENT),
        )
        if page is None or not page.ok or not page.body.strip():
            return []
        links = [
            link
            for link in harvest_supplements(page.text, landing_url)
            if link.kind is not LinkKind.OTHER
        ][: settings.max_supplements]
        texts = []
        for link in links:
            host = HostClass.NCBI if _same_host(link.url, landing_url) else HostClass.PUBLISHER
            result = self._safe("supplement", self.client.acquire, FetchRequest(link.url, host, Purpose.SUPPLEMENT))
            if result is None:
                continue
            self.metrics.incr("fetches")
            body = result.body if result.ok else None
            if result.status in (401, 403) and settings.browser_cmd:
                body = self._via_browser(link.url)
            if not body:
                message = f"supplement {link.url}: HTTP {result.status}, not retrieved"
                logger.warning(message)
                self.warnings.append(message)
                continue
            try:
                texts.append(_extract(body))
                self.metrics.incr("supplements_mined")
            except (ConversionFailed, UnsupportedFormat) as exc:
                logger.info("supplement %s not mined: %s", link.url, exc)
        return texts

    def _via_browser(self, url: str) -> bytes | None:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = browser_fallback(url, self.config.network.browser_cmd, Path(tmp, "download"))
            return path.read_bytes() if path else None

    def _run_stage_searches(self, source: QuerySource, queries: Iterable[str]) -> tuple[list[str], list[ArticleMetadata]]:
        ids: list[str] = []
        preprints: list[ArticleMetadata] = []
        retmax = self.config.queries.retmax
        for query in queries:
            if source is QuerySource.BIORXIV:
                preprints.extend(self._safe("bioRxiv search", search_biorxiv, self.target, self.client, query) or [])
                continue
            db = "pubmed" if source is QuerySource.PUBMED else "pmc"
            for ident in self._safe(f"esearch {db}", esearch, query, db, self.client, retmax) or []:
                if ident not in ids:
                    ids.append(ident)
        return ids, preprints

    def online_records(self) -> list[CuratedSequence]:
        plan = make_plan(self.target, self.config.queries)
        seen_pmids: set[str] = set()
        seen_pmc: set[str] = set()
        found: list[CuratedSequence] = []
        for stage in plan.stages:
            if (
                stage.label is StageLabel.FALLBACK
                and found
                and not self.config.network.always_fallback
            ):
                logger.info("sequences found; skipping fallback stages")
                break
            ids, preprints = self._run_stage_searches(stage.source, stage.queries)
            for article in preprints:
                self.sources.add(article)
            pmc_queue: list[str] = []
            if stage.source is QuerySource.PUBMED:
                new = [i for i in ids if i not in seen_pmids]
                seen_pmids.update(new)
                for record in self._fetch_pubmed(new):
                    self.sources.add(record)
                    if record.pmcid:
                        pmc_queue.append(record.pmcid[3:] if record.pmcid.upper().startswith("PMC") else record.pmcid)
            elif stage.source is QuerySource.PMC:
                pmc_queue.extend(ids)
            pmc_queue = [i for i in dict.fromkeys(pmc_queue) if i not in seen_pmc]
            seen_pmc.update(pmc_queue)
            documents = self._fetch_pmc(pmc_queue)
            for metadata, _ in documents:
                self.sources.add(metadata)
            mined_keys = set()
            for metadata, body in documents:
                article = self.sources.get(metadata)
                mined_keys.add(article.key)
                found.extend(self.mine_text(body, article))
                for text in self._supplement_texts(article):
                    found.extend(self.mine_text(text, article, abstract=article.abstract))
            for article in self.sources.all():
                if article.key not in mined_keys and article.abstract and article.key not in self.mined:
                    found.extend(self.mine_text(article.abstract, article))
        return found

    # -- driver

    def run(self) -> TargetReport:
        token = current_target.set(self.target)
        started = time.perf_counter()
        try:
            local = self.local_records()
            for record in local:
                for article in record.articles:
                    self.sources.add(article)
            if self.client is not None:
                online = dedup(self.online_records())
                for record in online:
                    self.services.store.upsert(record)
                curated = self.services.store.query(self.target)
            else:
                curated = local
            curated = sorted(curated, key=lambda r: (r.created_at, r.id))
            contributed = {a.key for r in curated for a in r.articles}
            all_sources = merge_articles(self.sources.all(), (a for r in curated for a in r.articles))
            leads = tuple(a for a in all_sources if a.key not in contributed and _relevant(a))
            wall = 0.0 if self.services.deterministic else round(time.perf_counter() - started, 3)
            counts = self.metrics.snapshot()
            for name, value in counts.items():
                self.services.metrics.incr(name, value)
            return TargetReport(
                target_name=self.target,
                tier=classify_tier(curated, leads, all_sources),
                curated=tuple(curated),
                leads=leads,
                all_sources=all_sources,
                run_stats=RunStats(
                    queries_issued=counts.get("queries_issued", 0),
                    fetches=counts.get("fetches", 0),
                    model_calls=counts.get("model_calls", 0),
                    fallbacks=counts.get("fallbacks", 0),
                    wall_time=wall,
                ),
                warnings=tuple(self.warnings),
            )
        finally:
            current_target.reset(token)


def _same_host(a: str, b: str) -> bool:
    from urllib.parse import urlparse

    return urlparse(a).netloc == urlparse(b).netloc


def _extract(body: bytes) -> str:
    from .docingest import extract_text

    return extract_text(body)


def run_search(
    services: Services,
    targets: Sequence[str],
    out_dir: Path | None = None,
    workers: int | None = None,
) -> list[TargetReport]:
    """Run all targets over a worker pool; reports come back in input order."""
    workers = workers or services.config.run.workers
    formats = services.config.run.formats

    def one(target: str) -> TargetReport:
        report = TargetPipeline(services, target).run()
        if out_dir is not None:
            emit_report(report, formats, out_dir)
        return report

    if workers == 1:
        return [one(t) for t in targets]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(contextvars.copy_context().run, one, t) for t in targets]
        return [f.result() for f in futures]


# ---------------------------------------------------------------- ingest


@dataclass
class IngestSummary:
    files: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def readable(self) -> int:
        return len(self.files)

    def to_dict(self) -> dict:
        return {"files": self.files, "failures": self.failures}


def ingest_directory(
    services: Services,
    pdf_dir: str | Path,
    targets: Sequence[str] = (),
    index_path: str | Path | None = None,
) -> IngestSummary:
    """Convert, index, mine and curate every supported file under ``pdf_dir``."""
    config = services.config
    summary = IngestSummary()
    index = services.index if services.index is not None else KeywordIndex()
    for path in discover_files(pdf_dir):
        try:
            doc = ingest_file(path, config.ingest.converter_cmd or None, config.ingest.max_tokens)
        except (ConversionFailed, UnsupportedFormat, OSError) as exc:
            logger.warning("cannot ingest %s: %s", path, exc)
            summary.failures.append({"path": str(path), "error": str(exc)})
            continue
        index.drop_document(doc.doc_id)
        if doc.chunks:
            index_documents(doc.chunks, index)
        services.store.save_article(doc.metadata)
        abstract = doc.section_text(SectionLabel.ABSTRACT)
        pipeline = TargetPipeline(services, "unspecified")
        kept = dedup(pipeline.mine_text(doc.text, doc.metadata, abstract, assign=False))
        stored = 0
        for record in kept:
            stored += _store_with_targets(services, pipeline.filter, record, targets, abstract)
        summary.files.append({"path": str(path), "doc_id": doc.doc_id, "sequences": len(kept), "rows": stored})
    services.index = index
    if index_path is not None and len(index):
        index.save(index_path)
    return summary


def _store_with_targets(
    services: Services,
    semfilter: SemanticFilter,
    record: CuratedSequence,
    targets: Sequence[str],
    abstract: str | None,
) -> int:
    rows = 0
    for target in targets:
        request = ClassificationRequest(
            core_sequence=record.core, context=record.context_snippet, target_name=target, abstract=abstract
        )
        verdict = semfilter.verify_target_assignment(request)
        if verdict.matches_target:
            backend = HEURISTIC if HEURISTIC in (verdict.backend, record.verdict_backend) else verdict.backend
            services.store.reassign(record, target, min(record.confidence, verdict.confidence), backend)
            rows += 1
    if rows == 0:
        services.store.upsert(record)
        rows = 1
    return rows
