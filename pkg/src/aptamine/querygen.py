"""Escalating literature queries for one target.

Sequence-specific queries go first because they hit papers likely to print
sequences; broad fallback queries follow to cover the literature exhaustively.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .config import QueriesSection
from .errors import EmptyTarget

DEFAULTS = QueriesSection()


class StageLabel(str, Enum):
    SEQUENCE_SPECIFIC = "SequenceSpecific"
    FALLBACK = "Fallback"


class QuerySource(str, Enum):
    PUBMED = "PubMed"
    PMC = "PMC"
    BIORXIV = "BioRxiv"


@dataclass(frozen=True)
class QueryStage:
    label: StageLabel
    queries: tuple[str, ...]
    source: QuerySource


@dataclass(frozen=True)
class QueryPlan:
    target_name: str
    stages: tuple[QueryStage, ...]


def clean_target(target_name: str) -> str:
    """Strip E-utilities metacharacters (quotes, brackets) and squeeze spaces."""
    if target_name is None:
        raise EmptyTarget("target name is blank")
    cleaned = re.sub(r"[\"\[\]]", " ", target_name)
    cleaned = " ".join(cleaned.split())
    if not cleaned:
        raise EmptyTarget("target name is blank")
    return cleaned


def quoted_target(target_name: str) -> str:
    return f'"{clean_target(target_name)}"'


def build_sequence_queries(
    target_name: str, signal_terms: Sequence[str] = tuple(DEFAULTS.signal_terms)
) -> list[str]:
    quoted = quoted_target(target_name)
    return [f"{quoted} AND aptamer AND {term}" for term in signal_terms]


def build_fallback_queries(
    target_name: str, templates: Sequence[str] = tuple(DEFAULTS.fallback_templates)
) -> list[str]:
    target = clean_target(target_name)
    return [template.format(target=target) for template in templates]


def make_plan(target_name: str, settings: QueriesSection | None = None) -> QueryPlan:
    settings = settings or DEFAULTS
    target = clean_target(target_name)
    specific = tuple(build_sequence_queries(target, settings.signal_terms))
    fallback = tuple(build_fallback_queries(target, settings.fallback_templates))
    preprint = tuple(build_fallback_queries(target, settings.biorxiv_templates))
    if not specific or not fallback or not preprint:
        raise ValueError("query templates must not be empty")
    stages = (
        QueryStage(StageLabel.SEQUENCE_SPECIFIC, specific, QuerySource.PUBMED),
        QueryStage(StageLabel.SEQUENCE_SPECIFIC, specific, QuerySource.PMC),
        QueryStage(StageLabel.FALLBACK, fallback, QuerySource.PUBMED),
        QueryStage(StageLabel.FALLBACK, fallback, QuerySource.PMC),
        QueryStage(StageLabel.FALLBACK, preprint, QuerySource.BIORXIV),
    )
    return QueryPlan(target_name=target, stages=stages)
