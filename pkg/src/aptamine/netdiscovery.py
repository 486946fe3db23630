"""Polite HTTP access to literature sources.

Every outbound request passes through a per-host-class token bucket and is
retried with exponential backoff on 429, 5xx, timeouts and dropped
connections. Other 4xx responses are returned to the caller untouched.
"""

from __future__ import annotations

import logging
import random
import re
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence
from urllib.parse import quote, urldefrag, urljoin, urlparse
from xml.etree import ElementTree

import requests
from bs4 import BeautifulSoup

from .config import NetworkSection
from .errors import InvalidUrl, MalformedResponse, NetworkError
from .models import ArticleMetadata, RunMetrics, Source

logger = logging.getLogger(__name__)

NCBI_API_KEY_ENV = "NCBI_API_KEY"


class HostClass(str, Enum):
    NCBI = "NCBI"
    PUBLISHER = "Publisher"
    BIORXIV = "BioRxiv"


class Purpose(str, Enum):
    SEARCH = "Search"
    FETCH = "Fetch"
    SUPPLEMENT = "Supplement"


class LinkKind(str, Enum):
    PDF = "PDF"
    SUPPLEMENTARY_MATERIAL = "SupplementaryMaterial"
    SUPPORTING_INFORMATION = "SupportingInformation"
    OTHER = "Other"


@dataclass(frozen=True)
class FetchRequest:
    url: str
    host_class: HostClass = HostClass.NCBI
    purpose: Purpose = Purpose.FETCH
    params: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        parsed = urlparse(self.url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise InvalidUrl(f"not an absolute http(s) url: {self.url!r}")


@dataclass
class FetchResult:
    status: int
    body: bytes
    content_type: str
    attempts: int
    elapsed: float
    url: str = ""

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    @property
    def text(self) -> str:
        return self.body.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class SupplementLink:
    url: str
    kind: LinkKind
    anchor_text: str


@dataclass
class RateLimiterConfig:
    ncbi_rps: float = 3.0
    max_retries: int = 4
    base_backoff: float = 1.0
    jitter: float = 0.5
    biorxiv_rps: float = 1.0
    publisher_rps: float = 1.0

    def __post_init__(self) -> None:
        if self.ncbi_rps <= 0 or self.biorxiv_rps <= 0 or self.publisher_rps <= 0:
            raise ValueError("request rates must be > 0")
        if self.base_backoff <= 0:
            raise ValueError("base_backoff must be > 0")
        if self.max_retries < 0 or not 0 <= self.jitter <= 1:
            raise ValueError("max_retries must be >= 0 and jitter within [0, 1]")

    @classmethod
    def from_settings(cls, settings: NetworkSection, api_key: str | None = None) -> RateLimiterConfig:
        return cls(
            ncbi_rps=settings.ncbi_rps_with_key if api_key else settings.ncbi_rps,
            max_retries=settings.max_retries,
            base_backoff=settings.base_backoff,
            jitter=settings.jitter,
            biorxiv_rps=settings.biorxiv_rps,
            publisher_rps=settings.publisher_rps,
        )


class TokenBucket:
    """Token bucket holding at most one token.

    A capacity of one means admissions are spaced at least ``1 / rate``
    seconds apart, so no one-second window ever sees more than
    ``ceil(rate)`` requests. Slots are reserved under the lock and slept outside it, which
    keeps concurrent callers in arrival order.
    """

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate <= 0:
            raise ValueError("rate must be > 0")
        # a microsecond of margin absorbs float drift in the slot sum
        self.interval = 1.0 / rate + 1e-6
        self._clock = clock
        self._sleep = sleep
        self._next = float("-inf")
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self._sleep(slot - now)
        return slot


class RateLimiter:
    """Shared admission control for all host classes plus the retry schedule."""

    def __init__(
        self,
        config: RateLimiterConfig | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.config = config or RateLimiterConfig()
        self.clock = clock
        self.sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        rates = {
            HostClass.NCBI: self.config.ncbi_rps,
            HostClass.BIORXIV: self.config.biorxiv_rps,
            HostClass.PUBLISHER: self.config.publisher_rps,
        }
        self._buckets = {hc: TokenBucket(rate, clock, sleep) for hc, rate in rates.items()}

    def wait(self, host_class: HostClass) -> float:
        return self._buckets[HostClass(host_class)].acquire()

    def backoff_delay(self, attempt: int) -> float:
        """Delay after failed attempt ``attempt`` (1-based), jitter included."""
        with self._rng_lock:
            spread = self._rng.uniform(0.0, self.config.jitter)
        return self.config.base_backoff * 2 ** (attempt - 1) * (1.0 + spread)


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


class HttpClient:
    """Blocking HTTP client bound to a shared :class:`RateLimiter`."""

    def __init__(
        self,
        limiter: RateLimiter | None = None,
        settings: NetworkSection | None = None,
        session: requests.Session | None = None,
        api_key: str | None = None,
        metrics: RunMetrics | None = None,
    ) -> None:
        self.settings = settings or NetworkSection()
        self.api_key = api_key
        self.limiter = limiter or RateLimiter(RateLimiterConfig.from_settings(self.settings, api_key))
        self.session = session or requests.Session()
        self.metrics = metrics or RunMetrics()
        agent = self.settings.user_agent
        if self.settings.contact_email:
            agent = f"{agent} (mailto:{self.settings.contact_email})"
        self.headers = {"User-Agent": agent}

    def acquire(self, request: FetchRequest) -> FetchResult:
        config = self.limiter.config
        started = self.limiter.clock()
        attempt = 0
        previous_delay = 0.0
        while True:
            attempt += 1
            self.limiter.wait(request.host_class)
            self.metrics.incr("http_requests")
            try:
                response = self.session.get(
                    request.url,
                    params=list(request.params) or None,
                    headers=self.headers,
                    timeout=self.settings.timeout_s,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                status, reason = None, f"{type(exc).__name__}: {exc}"
            except requests.RequestException as exc:
                raise NetworkError(f"{request.url}: {exc}", attempts=attempt) from exc
            else:
                if not _retryable(response.status_code):
                    return FetchResult(
                        status=response.status_code,
                        body=response.content,
                        content_type=response.headers.get("Content-Type", ""),
                        attempts=attempt,
                        elapsed=self.limiter.clock() - started,
                        url=response.url,
                    )
                status, reason = response.status_code, f"HTTP {response.status_code}"
            if attempt > config.max_retries:
                self.metrics.incr("network_failures")
                raise NetworkError(
                    f"{request.url}: {reason} after {attempt} attempts", attempts=attempt, status=status
                )
            delay = max(previous_delay, self.limiter.backoff_delay(attempt))
            previous_delay = delay
            logger.warning("retrying %s in %.2fs (%s, attempt %d)", request.url, delay, reason, attempt)
            self.metrics.incr("http_retries")
            self.limiter.sleep(delay)

    def eutils_request(self, endpoint: str, params: Mapping[str, str]) -> FetchRequest:
        merged = dict(params)
        if self.settings.contact_email:
            merged.setdefault("tool", self.settings.user_agent.split("/")[0])
            merged.setdefault("email", self.settings.contact_email)
        if self.api_key:
            merged["api_key"] = self.api_key
        base = self.settings.eutils_base.rstrip("/") + "/"
        purpose = Purpose.SEARCH if endpoint.startswith("esearch") else Purpose.FETCH
        return FetchRequest(
            url=urljoin(base, endpoint),
            host_class=HostClass.NCBI,
            purpose=purpose,
            params=tuple(merged.items()),
        )


def acquire(request: FetchRequest, client: HttpClient) -> FetchResult:
    return client.acquire(request)


def _require_ok(result: FetchResult, what: str) -> None:
    if not result.ok:
        raise NetworkError(f"{what}: HTTP {result.status}", attempts=result.attempts, status=result.status)


def esearch(query: str, database: str, client: HttpClient, retmax: int = 20) -> list[str]:
    """Record identifiers for ``query``, in server order."""
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    if database not in ("pubmed", "pmc"):
        raise ValueError(f"unsupported database {database!r}")
    request = client.eutils_request(
        "esearch.fcgi", {"db": database, "term": query, "retmax": str(retmax), "retmode": "xml"}
    )
    result = client.acquire(request)
    client.metrics.incr("queries_issued")
    _require_ok(result, f"esearch {database}")
    try:
        root = ElementTree.fromstring(result.body)
    except ElementTree.ParseError as exc:
        raise MalformedResponse(f"esearch response is not XML: {exc}") from exc
    id_list = root.find("IdList")
    if id_list is None:
        count = root.findtext("Count")
        if count is not None and count.strip() == "0":
            return []
        error = root.findtext("ERROR") or "no IdList element"
        raise MalformedResponse(f"esearch response unusable: {error}")
    ids = [(el.text or "").strip() for el in id_list.findall("Id")]
    if any(not i for i in ids):
        raise MalformedResponse("esearch returned an empty Id element")
    return ids


def efetch(ids: Sequence[str], database: str, client: HttpClient) -> list[FetchResult]:
    """Raw XML for ``ids``, one request per batch of at most ``efetch_batch`` ids."""
    if not ids:
        raise ValueError("efetch needs at least one id")
    batch = client.settings.efetch_batch
    results = []
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        request = client.eutils_request(
            "efetch.fcgi", {"db": database, "id": ",".join(chunk), "retmode": "xml"}
        )
        result = client.acquire(request)
        client.metrics.incr("fetches")
        _require_ok(result, f"efetch {database}")
        if not result.body.strip():
            raise MalformedResponse("efetch returned an empty body")
        results.append(result)
    return results


_DOI_RE = re.compile(r"10\.\d{4,9}/[^\s\"<>]+")


def _biorxiv_doi(text: str) -> str | None:
    match = _DOI_RE.search(text)
    if not match:
        return None
    doi = match.group(0).rstrip(".,;)")
    return re.sub(r"v\d+$", "", doi)


def parse_biorxiv_results(html: str, page_url: str) -> list[ArticleMetadata] | None:
    """Records from a bioRxiv search page; ``None`` when the layout is unknown."""
    soup = BeautifulSoup(html, "html.parser")
    items = soup.select("li.search-result") or soup.select(".highwire-article-citation")
    if not items:
        text = soup.get_text(" ", strip=True).lower()
        if "no results" in text or "0 results" in text:
            return []
        return None
    records = []
    for item in items:
        title_el = item.select_one(".highwire-cite-title")
        if title_el is None:
            continue
        anchor = title_el.find("a") or item.find("a", href=True)
        href = anchor.get("href") if anchor is not None else None
        link = urljoin(page_url, href) if href else None
        doi_el = item.select_one(".highwire-cite-metadata-doi")
        doi = _biorxiv_doi(doi_el.get_text(" ")) if doi_el else None
        if doi is None and href:
            doi = _biorxiv_doi(href)
        authors = tuple(
            a.get_text(" ", strip=True) for a in item.select(".highwire-citation-author")
        )
        title = title_el.get_text(" ", strip=True)
        if not title or not (doi or link):
            continue
        records.append(
            ArticleMetadata(
                title=title,
                source=Source.BIORXIV,
                doi=doi,
                url=link,
                authors=authors,
                journal="bioRxiv",
            )
        )
    if items and not records:
        return None
    return records


def search_biorxiv(target_name: str, client: HttpClient, query: str | None = None) -> list[ArticleMetadata]:
    """Scrape one bioRxiv result page; degrade to an empty list on unknown layouts."""
    if not target_name or not target_name.strip():
        raise ValueError("target must be non-empty")
    query = query or f"{target_name.strip()} aptamer"
    url = client.settings.biorxiv_search_url.format(query=quote(query, safe=""))
    result = client.acquire(FetchRequest(url=url, host_class=HostClass.BIORXIV, purpose=Purpose.SEARCH))
    client.metrics.incr("queries_issued")
    _require_ok(result, "bioRxiv search")
    records = parse_biorxiv_results(result.text, url)
    if records is None:
        logger.warning("unrecognized bioRxiv page layout at %s; no preprints taken", url)
        client.metrics.incr("biorxiv_layout_unrecognized")
        return []
    return records


_SUPPLEMENT_RE = re.compile(r"supplement|supporting information|supplementary|\.pdf", re.I)
_KIND_PRIORITY = {
    LinkKind.SUPPORTING_INFORMATION: 0,
    LinkKind.SUPPLEMENTARY_MATERIAL: 1,
    LinkKind.PDF: 2,
    LinkKind.OTHER: 3,
}


def classify_link(href: str, anchor_text: str) -> LinkKind:
    text = anchor_text.lower()
    target = href.lower()
    if "supporting information" in text or "supporting-information" in target:
        return LinkKind.SUPPORTING_INFORMATION
    if "supplement" in text or "supplement" in target:
        return LinkKind.SUPPLEMENTARY_MATERIAL
    if urlparse(target).path.endswith(".pdf") or "pdf" in text.split():
        return LinkKind.PDF
    return LinkKind.OTHER


def harvest_supplements(landing_page_html: str, base_url: str) -> list[SupplementLink]:
    """Absolute supplement-looking links, one per URL, in first-seen order.

    When the same URL is linked twice, the most specific kind wins (ties go to
    the lexicographically smallest anchor text), so the chosen kind does not
    depend on anchor order.
    """
    if not landing_page_html:
        raise ValueError("html must be non-empty")
    soup = BeautifulSoup(landing_page_html, "html.parser")
    best: dict[str, SupplementLink] = {}
    for anchor in soup.find_all("a", href=True):
        href = anchor["href"].strip()
        text = " ".join(anchor.get_text(" ").split())
        if not href or href.startswith(("javascript:", "mailto:")):
            continue
        if not (_SUPPLEMENT_RE.search(href) or _SUPPLEMENT_RE.search(text)):
            continue
        url = urldefrag(urljoin(base_url, href)).url
        link = SupplementLink(url=url, kind=classify_link(href, text), anchor_text=text)
        current = best.get(url)
        if current is None or (_KIND_PRIORITY[link.kind], link.anchor_text) < (
            _KIND_PRIORITY[current.kind],
            current.anchor_text,
        ):
            best[url] = link
    return list(best.values())


def browser_fallback(url: str, command_template: str, output: Path) -> Path | None:
    """Hand an anti-bot protected URL to an external retrieval command.

    ``command_template`` receives ``{url}`` and ``{output}``; the command
    must write the file to ``output``. Returns ``None`` when no command is
    configured or the command fails.
    """
    if not command_template:
        logger.info("no browser command configured; skipping %s", url)
        return None
    argv = [part.format(url=url, output=str(output)) for part in shlex.split(command_template)]
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=300)
    except (OSError, subprocess.TimeoutExpired) as exc:
        logger.warning("browser command failed for %s: %s", url, exc)
        return None
    if proc.returncode != 0 or not output.exists():
        logger.warning("browser command exited %d for %s", proc.returncode, url)
        return None
    return output

