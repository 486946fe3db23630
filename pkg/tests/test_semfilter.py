from __future__ import annotations

import json
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptamine.config import Config, SemfilterSection
from aptamine.curate import Store, harmonize
from aptamine.errors import MissingPlaceholder, ParseFailure, UnknownTemplate
from aptamine.models import ArticleMetadata, Source
from aptamine.pipeline import Services, TargetPipeline
from aptamine.semfilter import (
    BUILTIN_TEMPLATES,
    HEURISTIC,
    MODEL,
    ClassificationRequest,
    HeuristicBackend,
    ModelBackend,
    SemanticFilter,
    TransportError,
    classify_candidate,
    heuristic_verdict,
    load_templates,
    make_backend,
    parse_verdict,
    render_prompt,
    verify_target_assignment,
)
from aptamine.seqextract import find_sequences
from corpus import planted_corpus

SEQ = "GGTTGGTGTGGTTGGCATCGATCG"


def req(context: str, target: str = "thrombin", abstract: str | None = None) -> ClassificationRequest:
    return ClassificationRequest(core_sequence=SEQ, context=context, target_name=target, abstract=abstract)


class Scripted:
    """Backend returning canned completions in order, or raising TransportError."""

    name = MODEL

    def __init__(self, *outputs):
        self.outputs = list(outputs)
        self.prompts: list[str] = []

    def generate(self, prompt: str) -> str:
        self.prompts.append(prompt)
        out = self.outputs.pop(0) if len(self.outputs) > 1 else self.outputs[0]
        if isinstance(out, Exception):
            raise out
        return out


# ---------------------------------------------------------------- heuristic


def test_forward_primer_is_not_aptamer():
    verdict = classify_candidate(req(f"The forward primer {SEQ} was used."))
    assert not verdict.is_aptamer
    assert verdict.backend == HEURISTIC


def test_aptamer_with_kd_is_aptamer():
    verdict = classify_candidate(req(f"The aptamer {SEQ} bound with a Kd of 5 nM."))
    assert verdict.is_aptamer
    assert verdict.confidence >= 0.6


def test_confidence_grows_with_distinct_keywords_and_caps():
    one = heuristic_verdict(req(f"aptamer {SEQ}"))
    many = heuristic_verdict(req(f"aptamer SELEX binding Kd dissociation {SEQ}"))
    assert one.confidence == pytest.approx(0.7)
    assert many.confidence == pytest.approx(0.9)


def test_negative_keyword_outside_window_ignored():
    context = "primer design was routine. " + "x" * 250 + f" The aptamer {SEQ} bound thrombin."
    assert heuristic_verdict(req(context)).is_aptamer


def test_target_verification():
    assert verify_target_assignment(req(f"aptamer {SEQ} bound thrombin")).matches_target
    assert not verify_target_assignment(req(f"aptamer {SEQ} bound lysozyme", abstract="about lysozyme")).matches_target
    assert verify_target_assignment(req(f"aptamer {SEQ}", abstract="Thrombin aptamers")).matches_target
    assert not verify_target_assignment(req(f"aptamer {SEQ} bound prothrombinase")).matches_target
    with pytest.raises(ValueError):
        verify_target_assignment(req("x", target="  "))


@given(st.text(max_size=300), st.text(min_size=1, max_size=20).filter(str.strip))
def test_heuristic_is_deterministic_and_bounded(context, target):
    r = ClassificationRequest(core_sequence=SEQ, context=context, target_name=target)
    a, b = heuristic_verdict(r), heuristic_verdict(r)
    assert a == b
    assert 0.0 <= a.confidence <= 1.0


def test_request_rejects_non_nucleotide_core():
    with pytest.raises(ValueError):
        ClassificationRequest(core_sequence="acgt", context="", target_name="t")


# ---------------------------------------------------------------- prompts


def test_prompt_contains_each_field_once():
    r = ClassificationRequest(core_sequence=SEQ, context="CONTEXT-XYZ", target_name="TARGET-QRS", abstract="ABSTRACT-UVW")
    for name in BUILTIN_TEMPLATES:
        prompt = render_prompt(name, r)
        for value in (SEQ, "CONTEXT-XYZ", "TARGET-QRS", "ABSTRACT-UVW"):
            assert prompt.count(value) == 1
        assert prompt == render_prompt(name, r)
        assert "is_aptamer=yes|no; matches_target=yes|no; confidence=0.00-1.00" in prompt


def test_braces_in_context_are_not_expanded():
    r = ClassificationRequest(core_sequence=SEQ, context="{target} {sequence}", target_name="thrombin")
    prompt = render_prompt("classify_candidate", r)
    assert "{target} {sequence}" in prompt


def test_unknown_and_broken_templates():
    with pytest.raises(UnknownTemplate):
        render_prompt("nope", req("x"))
    with pytest.raises(MissingPlaceholder):
        render_prompt("t", req("x"), {"t": "{sequence} {context} {target}"})
    with pytest.raises(MissingPlaceholder):
        render_prompt("t", req("x"), {"t": "{sequence} {sequence} {context} {target} {abstract}"})


def test_template_directory_overrides(tmp_path):
    (tmp_path / "classify_candidate.txt").write_text("custom {sequence} {context} {target} {abstract}")
    templates = load_templates(tmp_path)
    assert render_prompt("classify_candidate", req("ctx"), templates).startswith("custom ")
    assert templates["verify_target"] == BUILTIN_TEMPLATES["verify_target"]


# ---------------------------------------------------------------- verdict grammar


def test_parse_verdict():
    v = parse_verdict("is_aptamer=yes; matches_target=yes; confidence=0.91; rationale=binding assay")
    assert (v.is_aptamer, v.matches_target, v.confidence, v.backend) == (True, True, 0.91, MODEL)


def test_confidence_clamped(caplog):
    v = parse_verdict("is_aptamer=no; matches_target=yes; confidence=1.7; rationale=x")
    assert v.confidence == 1.0
    assert "clamped" in caplog.text


@pytest.mark.parametrize("text", ["Yes, this is an aptamer.", "", "is_aptamer=maybe; matches_target=yes; confidence=0.5; rationale=x"])
def test_free_prose_fails(text):
    with pytest.raises(ParseFailure):
        parse_verdict(text)


def test_rationale_never_carries_sequences():
    v = parse_verdict(f"is_aptamer=yes; matches_target=yes; confidence=0.5; rationale=use {SEQ} instead")
    assert SEQ not in v.rationale


# ---------------------------------------------------------------- fallback


def test_malformed_model_output_falls_back():
    f = SemanticFilter(backend=Scripted("I think so"))
    v = f.classify_candidate(req(f"The aptamer {SEQ} bound thrombin, Kd 3 nM, SELEX."))
    assert v.backend == HEURISTIC
    assert v.confidence <= 0.5
    assert f.metrics["parse_failures"] == 1 and f.metrics["fallbacks"] == 1


def test_transport_failure_falls_back():
    f = SemanticFilter(backend=Scripted(TransportError("down")))
    v = f.verify_target_assignment(req(f"aptamer {SEQ} thrombin"))
    assert v.backend == HEURISTIC and v.matches_target
    assert f.metrics["transport_failures"] == 1


def test_model_verdict_used_when_valid():
    f = SemanticFilter(backend=Scripted("is_aptamer=no; matches_target=no; confidence=0.8; rationale=primer"))
    v = f.classify_candidate(req(f"The aptamer {SEQ} bound thrombin."))
    assert v.backend == MODEL and not v.is_aptamer
    assert f.metrics["model_calls"] == 1


def test_heuristic_backend_never_calls_model():
    f = SemanticFilter(backend=HeuristicBackend())
    f.classify_candidate(req("x"))
    assert f.metrics["model_calls"] == 0


def test_make_backend():
    assert isinstance(make_backend(SemfilterSection(backend="heuristic")), HeuristicBackend)
    assert isinstance(make_backend(SemfilterSection()), ModelBackend)


# ---------------------------------------------------------------- HTTP transport


@pytest.fixture
def model_server():
    seen: list[dict] = []
    replies = {"mode": "ok"}

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_POST(self):  # noqa: N802
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append(body)
            if replies["mode"] == "error":
                self.send_response(500)
                self.end_headers()
                return
            payload = {"response": "is_aptamer=yes; matches_target=yes; confidence=0.77; rationale=binding"}
            if replies["mode"] == "choices":
                payload = {"choices": [{"text": payload["response"]}]}
            data = json.dumps(payload).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{server.server_address[1]}/api/generate", seen, replies
    server.shutdown()
    server.server_close()


def test_model_backend_wire_format(model_server):
    url, seen, replies = model_server
    backend = ModelBackend(url, "tiny-model", timeout_s=5, max_tokens=64)
    f = SemanticFilter(backend=backend)
    v = f.classify_candidate(req(f"aptamer {SEQ}"))
    assert v.backend == MODEL and v.confidence == 0.77
    assert seen[0]["model"] == "tiny-model"
    assert seen[0]["temperature"] == 0 and seen[0]["max_tokens"] == 64
    assert SEQ in seen[0]["prompt"]
    replies["mode"] = "choices"
    assert f.classify_candidate(req(f"aptamer {SEQ}")).confidence == 0.77
    replies["mode"] = "error"
    assert f.classify_candidate(req(f"aptamer {SEQ}")).backend == HEURISTIC


def test_unreachable_model_degrades():
    backend = ModelBackend("http://127.0.0.1:9/none", "m", timeout_s=1)
    v = SemanticFilter(backend=backend).classify_candidate(req(f"aptamer {SEQ} binding"))
    assert v.backend == HEURISTIC and v.confidence <= 0.5


# ---------------------------------------------------------------- non-mutation


def _curated_cores(tmp_path, backend, name):
    config = Config()
    config.run.offline = True
    config.run.fixed_time = "2026-01-01T00:00:00Z"
    docs = planted_corpus(seed=3, documents=6, aptamers=14, primers=6)
    seen: Counter = Counter()
    kept: Counter = Counter()
    with Store(tmp_path / f"{name}.db") as store:
        services = Services(config=config, store=store, semfilter=SemanticFilter(backend=backend))
        pipeline = TargetPipeline(services, "thrombin")
        for i, doc in enumerate(docs):
            seen.update(harmonize(c).core for c in find_sequences(doc.text))
            art = ArticleMetadata(title=f"doc {i}", source=Source.LOCAL_PDF, url=f"file:///{i}")
            kept.update(r.core for r in pipeline.mine_text(doc.text, art, assign=False))
    return seen, kept


def test_filter_never_edits_sequences(tmp_path):
    liar = Scripted(f"is_aptamer=yes; matches_target=yes; confidence=0.9; rationale=really it is {'ACGU' * 6}")
    seen_model, kept_model = _curated_cores(tmp_path, liar, "model")
    seen_heur, kept_heur = _curated_cores(tmp_path, HeuristicBackend(), "heur")
    assert seen_model == seen_heur
    # a model that accepts everything lets every extracted core through unchanged
    assert kept_model == seen_model
    assert not (kept_heur - seen_heur)
    assert "ACGU" * 6 not in kept_model
