from __future__ import annotations

import ast
import csv
import random
import sqlite3
from dataclasses import replace
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import aptamine.curate as curate_module
from aptamine.curate import (
    EXPORT_COLUMNS,
    SCHEMA_VERSION,
    Store,
    ValidationBounds,
    dedup,
    gc_content,
    harmonize,
    query_store,
    upsert,
    validate,
)
from aptamine.errors import EmptySequence, StorageError
from aptamine.models import AffinityMeasurement, Modification, SequenceCandidate, ValidationState
from aptamine.seqextract import find_sequences
from oracles import dedup_oracle, validate_oracle
from strategies import article, record


# ---------------------------------------------------------------- validation


def test_gc_examples():
    assert gc_content("ATGC") == Fraction(1, 2)
    assert gc_content("AAAA") == 0
    assert gc_content("GGCC") == 1
    with pytest.raises(EmptySequence):
        gc_content("")


def test_validate_examples():
    assert validate("ACGT" * 5).status is ValidationState.VALID
    assert validate("G" * 20).status is ValidationState.FLAGGED_GC
    multi = validate("G" * 91 + "A" * 10)
    assert multi.status is ValidationState.FLAGGED_MULTIPLE
    assert "length" in multi.notes and "gc" in multi.notes
    assert validate("ACGN" * 6).status is ValidationState.FLAGGED_ALPHABET


def test_gc_bounds_are_inclusive():
    # exactly 20 % and 80 % GC
    assert validate("G" * 4 + "A" * 16).status is ValidationState.VALID
    assert validate("G" * 16 + "A" * 4).status is ValidationState.VALID
    assert validate("G" * 3 + "A" * 17).status is ValidationState.FLAGGED_GC


@given(st.text("ACGTUN", max_size=130))
@settings(max_examples=500)
def test_validate_matches_oracle(s):
    expected, _ = validate_oracle(s)
    assert validate(s).status.value == expected


@given(st.text("ACGTU", min_size=1, max_size=200))
def test_gc_plus_at_is_one(s):
    at = Fraction(sum(ch in "ATU" for ch in s), len(s))
    assert gc_content(s) + at == 1


def test_custom_bounds():
    bounds = ValidationBounds.from_values(10, 30, 0.4, 0.6)
    assert validate("ACGT" * 3, bounds).status is ValidationState.VALID
    assert validate("ACGT" * 10, bounds).status is ValidationState.FLAGGED_LENGTH


# ---------------------------------------------------------------- harmonize


def test_reversed_run_is_flipped():
    (cand,) = find_sequences("x 3'-TGCATGCATGCA-5' y", min_len=10, max_len=20)
    out = harmonize(cand, ValidationBounds.from_values(10, 20, 0.2, 0.8))
    assert out.core == "ACGTACGTACGT"
    assert out.orientation_normalized


def test_lowercase_upcased():
    out = harmonize(SequenceCandidate(raw="acgt" * 6, core="ACGT" * 6, span=(0, 24)))
    assert out.core == "ACGT" * 6
    assert not out.orientation_normalized


def test_reversal_remaps_modifications():
    cand = SequenceCandidate(
        raw="",
        core="AACCGGTT",
        span=(0, 8),
        orientation="3to5",
        modifications=(Modification("5'", "FAM", "^"), Modification(2, "dT", "*")),
    )
    out = harmonize(cand)
    assert out.core == "TTGGCCAA"
    assert set(out.modifications) == {Modification("3'", "FAM", "^"), Modification(6, "dT", "*")}


@given(st.text("ACGTacgt", min_size=1, max_size=60), st.sampled_from(["5to3", "3to5"]))
def test_harmonize_idempotent_and_never_substitutes(core, orientation):
    cand = SequenceCandidate(raw=core, core=core.upper(), span=(0, len(core)), orientation=orientation)
    once = harmonize(cand)
    assert harmonize(once) == once
    assert sorted(once.core) == sorted(core.upper())


# ---------------------------------------------------------------- dedup


def test_identical_cores_merge_provenance():
    a = record("ACGT" * 6, articles=[article("1")])
    b = record("ACGT" * 6, articles=[article("2")], created_at="2026-02-01T00:00:00Z")
    (out,) = dedup([b, a])
    assert {x.key for x in out.articles} == {"pmid:1", "pmid:2"}
    assert out.created_at == a.created_at


def test_single_base_variants_kept():
    assert len(dedup([record("ACGT" * 6), record("ACGA" + "ACGT" * 5)])) == 2
    assert dedup([]) == []


def _records(draw_rng: random.Random, n: int):
    pool = ["".join(draw_rng.choice("ACGT") for _ in range(22)) for _ in range(max(1, n // 4))]
    out = []
    for i in range(n):
        core = draw_rng.choice(pool)
        if draw_rng.random() < 0.2:
            pos = draw_rng.randrange(len(core))
            core = core[:pos] + draw_rng.choice("ACGT".replace(core[pos], "")) + core[pos + 1 :]
        affinity = AffinityMeasurement("Kd", Decimal(draw_rng.randint(1, 5)), "nM", Decimal(1), (0, 1), "", None)
        out.append(
            record(
                core,
                created_at=f"2026-01-0{draw_rng.randint(1, 3)}T00:00:00Z",
                articles=[article(str(draw_rng.randint(1, 30)))],
                affinities=[affinity] if draw_rng.random() < 0.5 else [],
            )
        )
    return out


def _shape(records):
    return [
        (r.core, r.id, r.created_at, frozenset(a.key for a in r.articles), frozenset(x.identity for x in r.affinities))
        for r in records
    ]


@given(st.integers(0, 60), st.randoms(use_true_random=False))
@settings(max_examples=100)
def test_dedup_matches_oracle(n, rnd):
    records = _records(rnd, n)
    assert _shape(dedup(records)) == dedup_oracle(records)


@given(st.integers(0, 40), st.randoms(use_true_random=False))
def test_dedup_idempotent_and_order_insensitive(n, rnd):
    records = _records(rnd, n)
    once = dedup(records)
    assert dedup(once) == once
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert _shape(dedup(shuffled)) == _shape(once)


# ---------------------------------------------------------------- store


@pytest.fixture
def store(tmp_path):
    with Store(tmp_path / "s.db") as s:
        yield s


def test_schema_version(store):
    assert store.schema_version == SCHEMA_VERSION


def test_newer_schema_rejected(tmp_path):
    path = tmp_path / "future.db"
    conn = sqlite3.connect(path)
    conn.execute("PRAGMA user_version = 99")
    conn.close()
    with pytest.raises(StorageError):
        Store(path)


def test_upsert_merges_provenance(store):
    first = upsert(store, record("ACGT" * 6, articles=[article("1")]))
    second = upsert(store, record("ACGT" * 6, articles=[article("2")]))
    assert first == second
    (row,) = query_store(store, "thrombin")
    assert {a.key for a in row.articles} == {"pmid:1", "pmid:2"}


def test_same_core_two_targets_two_rows(store):
    upsert(store, record("ACGT" * 6, target="thrombin"))
    upsert(store, record("ACGT" * 6, target="lysozyme"))
    assert store.count() == 2
    assert len(query_store(store, "THROMBIN")) == 1


def test_crash_mid_transaction_leaves_no_row(store, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("power cut")

    monkeypatch.setattr(store, "_write_affinities", boom)
    with pytest.raises(RuntimeError):
        store.upsert(record("ACGT" * 6))
    monkeypatch.undo()
    assert store.count() == 0
    assert query_store(store, "thrombin") == []
    upsert(store, record("ACGT" * 6))
    assert store.count() == 1


def test_query_order_and_flagged_rows(store):
    upsert(store, record("G" * 25, created_at="2026-01-03T00:00:00Z"))
    upsert(store, record("ACGT" * 6, created_at="2026-01-01T00:00:00Z"))
    upsert(store, record("ACGA" * 6, created_at="2026-01-02T00:00:00Z"))
    rows = query_store(store, "thrombin")
    assert [r.created_at[:10] for r in rows] == ["2026-01-01", "2026-01-02", "2026-01-03"]
    assert rows[-1].validation.status is ValidationState.FLAGGED_GC
    assert query_store(store, "nothing") == []


def test_store_round_trips_records(store):
    original = replace(
        record("ACGT" * 6, affinities=[AffinityMeasurement("Kd", Decimal("4.5"), "nM", Decimal("4.5"), (0, 3), "ctx", "pmid:1")]),
        modifications=(Modification("5'", "FAM", "^"),),
    )
    upsert(store, original)
    (loaded,) = query_store(store, "thrombin")
    assert loaded.affinities == original.affinities
    assert loaded.modifications == original.modifications
    assert loaded.articles == original.articles


def test_export(store, tmp_path):
    path = store.export_csv(tmp_path / "empty.csv")
    assert path.read_text().splitlines() == [",".join(EXPORT_COLUMNS)]
    for i in range(5):
        upsert(store, record("ACGT" * 5 + ("AAA", "CCC", "GGG", "TTT", "ACA")[i]))
    a = store.export_csv(tmp_path / "a.csv").read_bytes()
    b = store.export_csv(tmp_path / "b.csv").read_bytes()
    assert a == b
    rows = list(csv.reader(a.decode().splitlines()))
    assert len(rows) == 6


def test_curation_never_touches_the_semantic_backend():
    tree = ast.parse(Path(curate_module.__file__).read_text())
    imported = {
        node.module for node in ast.walk(tree) if isinstance(node, ast.ImportFrom) and node.module
    } | {alias.name for node in ast.walk(tree) if isinstance(node, ast.Import) for alias in node.names}
    assert not any("semfilter" in name or "requests" in name for name in imported)


def test_store_creates_parent_directory(tmp_path):
    with Store(tmp_path / "nested" / "dir" / "s.db") as s:
        assert s.count() == 0
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StorageError):
        Store(blocker / "s.db")
