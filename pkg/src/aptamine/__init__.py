"""Aptamer literature mining: search, extraction, curation and tiered reports."""

from __future__ import annotations

__version__ = "0.1.0"
