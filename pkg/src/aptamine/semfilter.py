"""Semantic judgments about sequence candidates.

A language model (or, when it is unavailable, a keyword heuristic) decides
whether a candidate is an aptamer and whether it belongs to the queried
target. Verdicts never carry sequence text: the filter keeps, drops or
annotates candidates and never edits them.
"""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import requests

from .config import SemfilterSection
from .errors import MissingPlaceholder, ParseFailure, UnknownTemplate
from .models import RunMetrics

logger = logging.getLogger(__name__)

MODEL = "Model"
HEURISTIC = "Heuristic"
FALLBACK_CONFIDENCE_CAP = 0.5
PLACEHOLDERS = ("sequence", "context", "abstract", "target")

# Reconstructed templates; the originals were never published with the method.
BUILTIN_TEMPLATES = {
    "classify_candidate": (
        "You are curating nucleic acid aptamers from the scientific literature.\n"
        "A nucleotide string was found in a paper. Decide whether it is an aptamer "
        "(a functional binding sequence) or something else, such as a PCR primer, "
        "probe, library flank or amplification product, and whether it binds the target.\n\n"
        "Target: {target}\n"
        "Sequence: {sequence}\n\n"
        "Surrounding text:\n{context}\n\n"
        "Abstract:\n{abstract}\n\n"
        "Answer with exactly one line and nothing else, in this form:\n"
        "is_aptamer=yes|no; matches_target=yes|no; confidence=0.00-1.00; rationale=short reason\n"
    ),
    "verify_target": (
        "You are checking target assignments for aptamer sequences.\n"
        "Does the text state that this sequence binds the named target? "
        "Only answer yes if the target is the ligand of this specific sequence.\n\n"
        "Target: {target}\n"
        "Sequence: {sequence}\n\n"
        "Surrounding text:\n{context}\n\n"
        "Abstract:\n{abstract}\n\n"
        "Answer with exactly one line and nothing else, in this form:\n"
        "is_aptamer=yes|no; matches_target=yes|no; confidence=0.00-1.00; rationale=short reason\n"
    ),
}

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_]+)\}")
_VERDICT_RE = re.compile(
    r"is_aptamer=(?P<apt>yes|no);\s*matches_target=(?P<tgt>yes|no);\s*"
    r"confidence=(?P<conf>-?\d+(?:\.\d+)?|-?\.\d+);\s*rationale=(?P<why>[^\n]*)"
)
_SEQUENCE_LIKE_RE = re.compile(r"[ACGTUacgtu]{10,}")


@dataclass(frozen=True)
class ClassificationRequest:
    core_sequence: str
    context: str
    target_name: str
    abstract: str | None = None
    # candidate position inside ``context`` when known
    locus: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.core_sequence or set(self.core_sequence) - set("ACGTU"):
            raise ValueError("core_sequence must be uppercase A/C/G/T/U")


@dataclass(frozen=True)
class ClassificationVerdict:
    is_aptamer: bool
    matches_target: bool
    confidence: float
    rationale: str
    backend: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be within [0, 1]")


def load_templates(template_dir: str | Path | None = None) -> dict[str, str]:
    """Built-in templates overridden by ``<name>.txt`` files in ``template_dir``."""
    templates = dict(BUILTIN_TEMPLATES)
    if template_dir:
        for path in sorted(Path(template_dir).glob("*.txt")):
            templates[path.stem] = path.read_text(encoding="utf-8")
    return templates


def render_prompt(template_name: str, request: ClassificationRequest, templates: dict[str, str] | None = None) -> str:
    templates = BUILTIN_TEMPLATES if templates is None else templates
    try:
        template = templates[template_name]
    except KeyError:
        raise UnknownTemplate(template_name) from None
    used = _PLACEHOLDER_RE.findall(template)
    unknown = sorted(set(used) - set(PLACEHOLDERS))
    missing = [name for name in PLACEHOLDERS if used.count(name) != 1]
    if unknown or missing:
        raise MissingPlaceholder(
            f"template {template_name!r}: each of {PLACEHOLDERS} must appear once"
            + (f"; unknown {unknown}" if unknown else "")
        )
    values = {
        "sequence": request.core_sequence,
        "context": request.context,
        "abstract": request.abstract or "(not available)",
        "target": request.target_name,
    }
    # single pass, so braces inside substituted text are never re-expanded
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template)


def _scrub(rationale: str) -> str:
    return _SEQUENCE_LIKE_RE.sub("[sequence]", " ".join(rationale.split()))[:300]


def parse_verdict(model_output: str) -> ClassificationVerdict:
    """Strict parse of the one-line ``key=value`` verdict grammar."""
    text = (model_output or "").strip()
    match = _VERDICT_RE.fullmatch(text)
    if match is None:
        raise ParseFailure(f"unparseable model output: {text[:80]!r}")
    confidence = float(match.group("conf"))
    if not 0.0 <= confidence <= 1.0:
        logger.warning("model confidence %s outside [0, 1]; clamped", confidence)
        confidence = min(1.0, max(0.0, confidence))
    return ClassificationVerdict(
        is_aptamer=match.group("apt") == "yes",
        matches_target=match.group("tgt") == "yes",
        confidence=confidence,
        rationale=_scrub(match.group("why")),
        backend=MODEL,
    )


# ---------------------------------------------------------------- backends


class Backend(Protocol):
    name: str

    def generate(self, prompt: str) -> str: ...


class TransportError(Exception):
    pass


class HeuristicBackend:
    """Marker backend: every decision comes from the keyword rules."""

    name = HEURISTIC

    def generate(self, prompt: str) -> str:  # pragma: no cover - never called
        raise TransportError("heuristic backend has no model")


class ModelBackend:
    """Local completion endpoint taking ``{model, prompt, max_tokens, temperature}``."""

    name = MODEL

    def __init__(
        self,
        endpoint: str,
        model: str,
        timeout_s: float = 60.0,
        max_tokens: int = 128,
        max_concurrent: int = 1,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.timeout_s = timeout_s
        self.max_tokens = max_tokens
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max(1, max_concurrent))

    @classmethod
    def from_settings(cls, settings: SemfilterSection) -> ModelBackend:
        return cls(
            endpoint=settings.endpoint,
            model=settings.model,
            timeout_s=settings.timeout_s,
            max_tokens=settings.max_tokens,
            max_concurrent=settings.max_concurrent,
        )

    def generate(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": 0,
            "stream": False,
        }
        with self._slots:
            try:
                response = self.session.post(self.endpoint, json=payload, timeout=self.timeout_s)
                response.raise_for_status()
                data = response.json()
            except (requests.RequestException, ValueError) as exc:
                raise TransportError(str(exc)) from exc
        text = _completion_text(data)
        if text is None:
            raise TransportError("response carries no generated text")
        return text


def _completion_text(data: object) -> str | None:
    if isinstance(data, str):
        return data
    if not isinstance(data, dict):
        return None
    for key in ("response", "text", "content", "completion"):
        if isinstance(data.get(key), str):
            return data[key]
    choices = data.get("choices")
    if isinstance(choices, list) and choices:
        first = choices[0]
        if isinstance(first, dict):
            if isinstance(first.get("text"), str):
                return first["text"]
            message = first.get("message")
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                return message["content"]
    return None


def make_backend(settings: SemfilterSection) -> Backend:
    if settings.backend == "heuristic":
        return HeuristicBackend()
    return ModelBackend.from_settings(settings)


# ---------------------------------------------------------------- heuristic


@dataclass(frozen=True)
class HeuristicRules:
    negative_keywords: tuple[str, ...] = ("primer", "forward", "reverse", "probe", "amplification", "PCR")
    positive_keywords: tuple[str, ...] = ("aptamer", "SELEX", "binding", "Kd", "dissociation")
    negative_window: int = 200

    @classmethod
    def from_settings(cls, settings: SemfilterSection) -> HeuristicRules:
        return cls(
            negative_keywords=tuple(settings.negative_keywords),
            positive_keywords=tuple(settings.positive_keywords),
            negative_window=settings.negative_window,
        )


def _keyword_re(keyword: str) -> re.Pattern[str]:
    # word-prefix match: "primer" also hits "primers"
    return re.compile(rf"(?<![A-Za-z0-9]){re.escape(keyword)}", re.I)


def _locate(request: ClassificationRequest) -> tuple[int, int]:
    if request.locus is not None:
        return request.locus
    seq = request.core_sequence
    pattern = r"[\s\-]*".join(re.escape(base) for base in seq[:12])
    match = re.search(pattern, request.context, re.I)
    if match is None:
        return 0, len(request.context)
    return match.start(), min(len(request.context), match.start() + len(seq))


def _target_in(target: str, text: str | None) -> bool:
    if not text or not target.strip():
        return False
    words = [re.escape(w) for w in target.split()]
    pattern = r"(?<![A-Za-z0-9])" + r"[\s\-]+".join(words) + r"(?![A-Za-z0-9])"
    return re.search(pattern, text, re.I) is not None


def heuristic_verdict(request: ClassificationRequest, rules: HeuristicRules | None = None) -> ClassificationVerdict:
    """Keyword rules. Deterministic in the request."""
    rules = rules or HeuristicRules()
    context = request.context
    start, end = _locate(request)
    window = context[max(0, start - rules.negative_window) : end + rules.negative_window]
    negatives = sorted({k for k in rules.negative_keywords if _keyword_re(k).search(window)})
    positives = sorted({k for k in rules.positive_keywords if _keyword_re(k).search(context)})
    in_context = _target_in(request.target_name, context)
    in_abstract = _target_in(request.target_name, request.abstract)
    matches_target = in_context or in_abstract
    if negatives:
        is_aptamer = False
        confidence = min(0.9, 0.6 + 0.1 * len(negatives))
        why = f"reagent keywords near sequence: {', '.join(negatives)}"
    elif positives:
        is_aptamer = True
        confidence = min(0.9, 0.6 + 0.1 * len(positives))
        why = f"aptamer keywords in context: {', '.join(positives)}"
    else:
        is_aptamer = False
        confidence = 0.5
        why = "no aptamer keywords in context"
    where = "context" if in_context else "abstract" if in_abstract else "nowhere"
    return ClassificationVerdict(
        is_aptamer=is_aptamer,
        matches_target=matches_target,
        confidence=round(confidence, 2),
        rationale=f"{why}; target found in {where}",
        backend=HEURISTIC,
    )


class SemanticFilter:
    """Runs prompts against a backend and degrades to the heuristic on any failure."""

    def __init__(
        self,
        backend: Backend | None = None,
        rules: HeuristicRules | None = None,
        templates: dict[str, str] | None = None,
        metrics: RunMetrics | None = None,
    ) -> None:
        self.backend = backend or HeuristicBackend()
        self.rules = rules or HeuristicRules()
        self.templates = templates or dict(BUILTIN_TEMPLATES)
        self.metrics = metrics or RunMetrics()

    @classmethod
    def from_settings(cls, settings: SemfilterSection, metrics: RunMetrics | None = None) -> SemanticFilter:
        return cls(
            backend=make_backend(settings),
            rules=HeuristicRules.from_settings(settings),
            templates=load_templates(settings.template_dir),
            metrics=metrics,
        )

    def _ask(self, template_name: str, request: ClassificationRequest) -> ClassificationVerdict:
        fallback = heuristic_verdict(request, self.rules)
        if isinstance(self.backend, HeuristicBackend):
            return fallback
        prompt = render_prompt(template_name, request, self.templates)
        self.metrics.incr("model_calls")
        try:
            return parse_verdict(self.backend.generate(prompt))
        except TransportError as exc:
            self.metrics.incr("transport_failures")
            logger.warning("model call failed (%s); using heuristic", exc)
        except ParseFailure as exc:
            self.metrics.incr("parse_failures")
            logger.warning("%s; using heuristic", exc)
        self.metrics.incr("fallbacks")
        return ClassificationVerdict(
            is_aptamer=fallback.is_aptamer,
            matches_target=fallback.matches_target,
            confidence=min(fallback.confidence, FALLBACK_CONFIDENCE_CAP),
            rationale=fallback.rationale,
            backend=HEURISTIC,
        )

    def classify_candidate(self, request: ClassificationRequest) -> ClassificationVerdict:
        return self._ask("classify_candidate", request)

    def verify_target_assignment(self, request: ClassificationRequest) -> ClassificationVerdict:
        if not request.target_name.strip():
            raise ValueError("target_name must be non-empty")
        return self._ask("verify_target", request)


def classify_candidate(request: ClassificationRequest, backend: Backend | None = None) -> ClassificationVerdict:
    return SemanticFilter(backend).classify_candidate(request)


def verify_target_assignment(request: ClassificationRequest, backend: Backend | None = None) -> ClassificationVerdict:
    return SemanticFilter(backend).verify_target_assignment(request)
