"""Deterministic detection of sequences, decorations, affinities and conditions.

Sequence detection tokenizes the text into atoms (base words, separators,
decorations, anything else) and groups consecutive atoms into runs. A run
may wrap across spaces, hyphens and single line breaks, and may carry
decorations:

* orientation markers ``5'-`` / ``-3'`` (and the reversed ``3'-`` / ``-5'``),
* labels ``^FAM``, ``^BHQ1``,
* star modifications ``*dT`` (lowercase prefix plus one base letter) and the
  bare linkage star ``A*C``.

Words of bases only join when their case agrees (all-upper with all-upper,
all-lower with all-lower; mixed-case words join either), which keeps English
words such as "a" or "at" from fusing onto an uppercase sequence.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Iterator

from .errors import UnparseableDecoration
from .models import AffinityMeasurement, ExperimentalConditions, Modification, SequenceCandidate

BASES = frozenset("ACGTU")
FIVE_END = "5'"
THREE_END = "3'"
CONTEXT_CAP = 1500

_ATOM_RE = re.compile(
    r"""
    (?P<orient>(?<![A-Za-z0-9])[35][′'’])
  | (?P<star>\*(?:[a-z]{1,3}[A-Z])?)
  | (?P<label>\^[A-Za-z][A-Za-z0-9]*)
  | (?P<word>[A-Za-z]+)
  | (?P<sep>[ \-\n\r]+)
  | (?P<other>.)
    """,
    re.X | re.S,
)
_BLANK_LINE_RE = re.compile(r"\n[ \r]*\n")


def _case_class(word: str) -> str:
    if word.isupper():
        return "upper"
    if word.islower():
        return "lower"
    return "mixed"


def _is_base_word(word: str) -> bool:
    return set(word.upper()) <= BASES


@dataclass
class _Run:
    start: int
    atoms: list[tuple[str, int, int, str]] = field(default_factory=list)
    case: str | None = None
    has_bases: bool = False
    closed: bool = False

    def end(self) -> int:
        for kind, _, end, _ in reversed(self.atoms):
            if kind != "sep":
                return end
        return self.start

    def case_ok(self, word: str) -> bool:
        cls = _case_class(word)
        if self.case is None or cls == "mixed" or self.case == "mixed":
            return True
        return cls == self.case


def _atoms(text: str) -> Iterator[tuple[str, int, int, str]]:
    for m in _ATOM_RE.finditer(text):
        yield m.lastgroup, m.start(), m.end(), m.group(0)


def _runs(text: str) -> list[_Run]:
    runs: list[_Run] = []
    current: _Run | None = None

    def close() -> None:
        nonlocal current
        if current is not None and current.has_bases:
            while current.atoms and current.atoms[-1][0] == "sep":
                current.atoms.pop()
            runs.append(current)
        current = None

    for atom in _atoms(text):
        kind, start, _, value = atom
        if kind == "word":
            if not _is_base_word(value):
                close()
                continue
            if current is not None and (current.closed or not current.case_ok(value)):
                close()
            if current is None:
                current = _Run(start)
            current.atoms.append(atom)
            current.has_bases = True
            if current.case is None or current.case == "mixed":
                current.case = _case_class(value)
        elif kind == "sep":
            if current is None:
                continue
            if _BLANK_LINE_RE.search(value):
                close()
                continue
            current.atoms.append(atom)
        elif kind in ("star", "label", "orient"):
            if current is not None and current.closed:
                close()
            if kind == "orient" and current is not None and current.has_bases:
                current.atoms.append(atom)
                current.closed = True
                continue
            if current is None:
                current = _Run(start)
            current.atoms.append(atom)
        else:
            close()
    close()
    return runs


def _trim_leading_seps(run: _Run) -> None:
    while run.atoms and run.atoms[0][0] == "sep":
        run.atoms.pop(0)
    if run.atoms:
        run.start = run.atoms[0][1]


def parse_modifications(raw: str) -> tuple[str, list[Modification]]:
    """Split a decorated match into its uppercase core and decorations.

    Orientation markers are consumed but are not modifications.
    """
    core: list[str] = []
    mods: list[Modification] = []
    pending: list[tuple[str, str]] = []
    for kind, _, _, value in _atoms(raw):
        if kind == "word":
            if not _is_base_word(value):
                raise UnparseableDecoration(f"unexpected word {value!r} in {raw!r}")
            for code, style in pending:
                mods.append(Modification(sum(map(len, core)), code, style))
            pending = []
            core.append(value.upper())
        elif kind in ("star", "label"):
            style, code = value[0], value[1:]
            if not core:
                mods.append(Modification(FIVE_END, code, style))
            else:
                pending.append((code, style))
        elif kind in ("sep", "orient"):
            continue
        else:
            raise UnparseableDecoration(f"unexpected character {value!r} in {raw!r}")
    mods.extend(Modification(THREE_END, code, style) for code, style in pending)
    sequence = "".join(core)
    if not sequence:
        raise UnparseableDecoration(f"no bases in {raw!r}")
    # interior position 0 cannot happen: before any base is the 5' end
    return sequence, mods


def render_decorated(core: str, modifications: list[Modification] | tuple[Modification, ...]) -> str:
    """Canonical text form of a decorated sequence; inverse of :func:`parse_modifications`."""

    def token(mod: Modification, where: str) -> str:
        if mod.style == "^":
            return {"5": f"^{mod.code}-", "3": f"-^{mod.code}", "i": f"-^{mod.code}-"}[where]
        return f"*{mod.code}"

    head = "".join(token(m, "5") for m in modifications if m.position == FIVE_END)
    tail = "".join(token(m, "3") for m in modifications if m.position == THREE_END)
    interior: dict[int, list[Modification]] = {}
    for m in modifications:
        if isinstance(m.position, int):
            interior.setdefault(m.position, []).append(m)
    body = []
    for i, base in enumerate(core):
        body.extend(token(m, "i") for m in interior.get(i, ()))
        body.append(base)
    return head + "".join(body) + tail


def detect_orientation(raw: str) -> str:
    """``"3to5"`` when the match is explicitly written 3'→5', else ``"5to3"``."""
    seen_bases = False
    leading = trailing = None
    for kind, _, _, value in _atoms(raw):
        if kind == "word" and _is_base_word(value):
            seen_bases = True
        elif kind == "orient":
            if seen_bases:
                trailing = value[0]
            elif leading is None:
                leading = value[0]
    if leading == "3" or trailing == "5":
        return "3to5"
    return "5to3"


def _paragraph_bounds(text: str) -> list[tuple[int, int]]:
    bounds = []
    start = 0
    for m in _BLANK_LINE_RE.finditer(text):
        bounds.append((start, m.start()))
        start = m.end()
    bounds.append((start, len(text)))
    return bounds


def context_bounds(text: str, span: tuple[int, int], cap: int = CONTEXT_CAP) -> tuple[int, int]:
    start, end = span
    if not (0 <= start <= end <= len(text)):
        raise ValueError("span outside text")
    paragraphs = _paragraph_bounds(text)
    index = next(
        (i for i, (s, e) in enumerate(paragraphs) if s <= start <= e),
        len(paragraphs) - 1,
    )
    lo = paragraphs[max(index - 1, 0)][0]
    hi = paragraphs[min(index + 1, len(paragraphs) - 1)][1]
    return max(lo, start - cap), min(hi, end + cap)


def context_window(text: str, span: tuple[int, int], cap: int = CONTEXT_CAP) -> str:
    """The paragraph holding ``span`` plus its neighbours, at most ``cap`` chars each side."""
    lo, hi = context_bounds(text, span, cap)
    return text[lo:hi]


def find_sequences(
    text: str,
    min_len: int = 20,
    max_len: int = 100,
    source_doc: str | None = None,
) -> list[SequenceCandidate]:
    """Maximal decorated nucleotide runs whose base count lies in ``[min_len, max_len]``."""
    if not (10 <= min_len < max_len <= 500):
        raise ValueError("need 10 <= min_len < max_len <= 500")
    candidates = []
    for run in _runs(text):
        _trim_leading_seps(run)
        bases = "".join(v.upper() for k, _, _, v in run.atoms if k == "word")
        if not (min_len <= len(bases) <= max_len):
            continue
        if "T" in bases and "U" in bases:
            continue
        start, end = run.start, run.end()
        raw = text[start:end]
        core, mods = parse_modifications(raw)
        word_positions = [i for i, atom in enumerate(run.atoms) if atom[0] == "word"]
        joined = any(
            atom[0] == "sep" for atom in run.atoms[word_positions[0] : word_positions[-1]]
        )
        lo, hi = context_bounds(text, (start, end))
        candidates.append(
            SequenceCandidate(
                raw=raw,
                core=core,
                span=(start, end),
                context=text[lo:hi],
                context_span=(start - lo, end - lo),
                modifications=tuple(mods),
                orientation=detect_orientation(raw),
                was_joined=joined,
                source_doc=source_doc,
            )
        )
    return candidates


# ---------------------------------------------------------------- affinities

UNIT_FACTORS_NM = {
    "pM": Decimal("0.001"),
    "nM": Decimal("1"),
    "µM": Decimal("1000"),
    "μM": Decimal("1000"),
    "uM": Decimal("1000"),
    "mM": Decimal("1000000"),
    "M": Decimal("1000000000"),
}

_KIND_NAMES = {
    "kd": "Kd",
    "k_d": "Kd",
    "ki": "Ki",
    "k_i": "Ki",
    "ic50": "IC50",
    "ic₅₀": "IC50",
    "ec50": "EC50",
    "ec₅₀": "EC50",
}

_AFFINITY_RE = re.compile(
    r"""
    (?<![A-Za-z0-9])
    (?P<kind>K_?d|KD|K_?i|IC50|IC₅₀|EC50|EC₅₀)
    (?![A-Za-z0-9])
    \s*(?:=|:|\bof\b|≈|~)\s*
    (?P<number>\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
    (?:\s*(?:±|\+/-|\+-)\s*\d+(?:\.\d+)?)?
    \s*(?P<unit>pM|nM|µM|μM|uM|mM|M)
    (?![A-Za-z])
    """,
    re.X,
)


def normalize_to_nm(value: Decimal, unit: str) -> Decimal:
    return value * UNIT_FACTORS_NM[unit]


def extract_affinities(text: str, source_doc: str | None = None) -> list[AffinityMeasurement]:
    """Kd/Ki/IC50/EC50 statements with an exact value and a molar unit.

    Comparators such as ``<`` or ``>`` are not separators, so qualitative
    bounds never match. A ``±`` error term is accepted and kept only in the
    context text.
    """
    found = []
    for m in _AFFINITY_RE.finditer(text):
        try:
            value = Decimal(m.group("number"))
        except InvalidOperation:  # pragma: no cover - the regex admits only decimals
            continue
        if value <= 0:
            continue
        unit = m.group("unit")
        kind = _KIND_NAMES.get(m.group("kind").lower(), m.group("kind"))
        lo, hi = max(0, m.start() - 200), min(len(text), m.end() + 200)
        found.append(
            AffinityMeasurement(
                kind=kind,
                value=value,
                unit=unit,
                value_nM=normalize_to_nm(value, unit),
                span=(m.start(), m.end()),
                context=text[lo:hi],
                source_doc=source_doc,
            )
        )
    return found


# ---------------------------------------------------------------- conditions

_PH_RE = re.compile(r"(?<![A-Za-z])pH\s*(?:=|:|of|~|≈)?\s*(-?\d+(?:\.\d+)?)")
_TEMP_RE = re.compile(r"(-?\d+(?:\.\d+)?)\s*(?:°\s*C|º\s*C|℃|degrees?\s+C(?:elsius)?)(?![A-Za-z])")
_BUFFER_RE = re.compile(r"\b(?:PBS|Tris|HEPES)\b|\bphosphate\b|\bselection buffer\b", re.I)
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?;])\s+")


def extract_conditions(text: str, source_doc: str | None = None) -> ExperimentalConditions:
    """First pH, temperature and buffer mention; out-of-range values are flagged, not kept."""
    flags = []
    ph = temperature = None
    match = _PH_RE.search(text)
    if match:
        value = Decimal(match.group(1))
        if Decimal(0) <= value <= Decimal(14):
            ph = value
        else:
            flags.append(f"ph_out_of_range:{match.group(1)}")
    match = _TEMP_RE.search(text)
    if match:
        value = Decimal(match.group(1))
        if Decimal(-20) <= value <= Decimal(120):
            temperature = value
        else:
            flags.append(f"temperature_out_of_range:{match.group(1)}")
    buffer = None
    for sentence in _SENTENCE_SPLIT_RE.split(text):
        if _BUFFER_RE.search(sentence):
            buffer = " ".join(sentence.split())[:200]
            break
    return ExperimentalConditions(
        ph=ph, temperature=temperature, buffer=buffer, source_doc=source_doc, flags=tuple(flags)
    )
