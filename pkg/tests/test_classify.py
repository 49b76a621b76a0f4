import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from reviewfuzz.classify import (
    Classifier, ClassificationRecord, Stage1Result, classify_corpus, classify_stage1, classify_stage2, dump_records,
    load_records,
)
from reviewfuzz.corpus import CommentKind, ReviewComment, ReviewCorpus, build_corpus, ingest_fixture
from reviewfuzz.llm import ModelOutputError, PromptSet, ScriptedClient, extract_input, parse_json_object
from reviewfuzz.mock import MockClient
from reviewfuzz.recording import RetriableError

OVERFLOW_WISH = "It would be great if we could warn on overflow and on truncation to 32-bit."
FIBER = ("If a large chunk of memory were allocated on the stack it could exceed the size of a single page. "
         "I think what we need to guard against is a stack size that is too small.")
MEMORY_BUFFER = 1218
NUMERIC = 189


def c(body, cid="1", pr="1"):
    return ReviewComment(cid, pr, CommentKind.DISCUSSION, body, "dev", "2024-01-01T00:00:00Z")


class TestStage1:
    def test_warn_on_overflow_is_uncertain_numeric(self, taxonomy, mock_client):
        r = classify_stage1(c(OVERFLOW_WISH), taxonomy, mock_client)
        assert (r.security, r.categories) == ("uncertain", (NUMERIC,))
        assert "warn on overflow" in r.signals

    def test_rename_is_not_security(self, taxonomy, mock_client):
        r = classify_stage1(c("Rename this variable for clarity."), taxonomy, mock_client)
        assert (r.security, r.categories) == ("no", ())

    def test_use_after_free(self, taxonomy, mock_client):
        r = classify_stage1(c("I think this is a use after free on the error path."), taxonomy, mock_client)
        assert (r.security, r.categories) == ("yes", (MEMORY_BUFFER,))

    def test_signals_are_verbatim(self, taxonomy, mock_client):
        body = "The memcpy here may be out-of-bounds."
        r = classify_stage1(c(body), taxonomy, mock_client)
        assert r.signals and all(s in body for s in r.signals)

    def test_malformed_twice_flags_failure(self, taxonomy):
        client = ScriptedClient(["not json", '{"security": "maybe"}'])
        r = classify_stage1(c("whatever"), taxonomy, client)
        assert r.classification_failed and not r.relevant
        assert len(client.calls) == 2

    def test_repair_recovers(self, taxonomy):
        client = ScriptedClient(['{"security": "yes", "categories": []}',
                                 '{"security": "yes", "categories": [1218], "signals": ["x"]}'])
        r = classify_stage1(c("x marks it"), taxonomy, client)
        assert (r.security, r.categories, r.classification_failed) == ("yes", (1218,), False)
        assert "one to three categories" in client.calls[1][1]

    def test_unknown_category_rejected(self, taxonomy):
        client = ScriptedClient(['{"security": "yes", "categories": [787]}'] * 2)
        assert classify_stage1(c("x"), taxonomy, client).classification_failed


class TestStage2:
    def test_fiber_is_787(self, taxonomy, mock_client):
        s1 = classify_stage1(c(FIBER), taxonomy, mock_client)
        assert s1.categories == (MEMORY_BUFFER,)
        s2 = classify_stage2(c(FIBER), s1, taxonomy, mock_client)
        assert (s2.security, s2.subcategory) == ("yes", 787)

    def test_uncertain_without_rule_match_rejected(self, taxonomy, mock_client):
        s1 = Stage1Result("uncertain", (1228,))
        s2 = classify_stage2(c("The docs could be clearer."), s1, taxonomy, mock_client)
        assert (s2.security, s2.subcategory) == ("no", None)

    def test_out_of_pack_repair_then_no(self, taxonomy):
        client = ScriptedClient(['{"security": "yes", "subcategory": 79, "rationale": "xss"}'] * 2)
        s2 = classify_stage2(c("x"), Stage1Result("yes", (1218,)), taxonomy, client)
        assert (s2.security, s2.subcategory) == ("no", None)
        assert "not in the context pack" in client.calls[1][1]

    def test_out_of_pack_repaired_into_pack(self, taxonomy):
        client = ScriptedClient(['{"security": "yes", "subcategory": 79}',
                                 '{"security": "yes", "subcategory": 787, "rationale": "write"}'])
        s2 = classify_stage2(c("x"), Stage1Result("yes", (1218,)), taxonomy, client)
        assert s2.subcategory == 787

    def test_stage2_needs_relevant_stage1(self, taxonomy, mock_client):
        with pytest.raises(ValueError):
            classify_stage2(c("x"), Stage1Result("no"), taxonomy, mock_client)

    def test_stage2_pack_is_only_the_selected_slice(self, taxonomy):
        client = ScriptedClient(['{"security": "no"}'])
        classify_stage2(c("x"), Stage1Result("yes", (189,)), taxonomy, client)
        sent = extract_input(client.calls[0][1])
        assert set(sent["pack"]) == {189} | {k.cwe_id for k in taxonomy.children[189]}
        assert "CWE-787" not in client.calls[0][1]


class FlakyClient:
    def __init__(self, inner, failures):
        self.inner, self.failures = inner, failures

    def complete(self, system, user, max_tokens=5000):
        if self.failures:
            self.failures -= 1
            raise RetriableError("HTTP 429")
        return self.inner.complete(system, user, max_tokens)


def test_transport_failures_are_retried(taxonomy, mock_client):
    r = classify_stage1(c(OVERFLOW_WISH), taxonomy, FlakyClient(mock_client, 2))
    assert r.security == "uncertain"


def test_persistent_transport_failure_flags_record(taxonomy, mock_client):
    rec = Classifier(taxonomy, FlakyClient(mock_client, 100)).classify(c(OVERFLOW_WISH))
    assert rec.stage1.classification_failed and rec.stage2 is None


TEMPLATES = [
    "This memcpy can run past the end of {x}.", "Possible use after free of {x}.", "Rename {x} please.",
    "Could {x} overflow on 32-bit?", "Nit: spacing around {x}.", "Is {x} validated before use?",
    "Add a test for {x}.", "{x} can be NULL here.", "The state machine for {x} accepts commands out of order.",
    "Docs for {x} are out of date.",
]


def synthetic_corpus(n, seed=0):
    rng = random.Random(seed)
    names = ["buf", "len", "ctx", "node", "handle", "str", "size", "count"]
    comments = [c(rng.choice(TEMPLATES).format(x=f"{rng.choice(names)}_{i}"), cid=f"s{i:03d}", pr=str(100 + i % 9))
                for i in range(n)]
    return build_corpus(comments, "fixture")


def test_234_comments_give_234_stage1_records(taxonomy, mock_client):
    corpus = synthetic_corpus(234)
    assert len(corpus) == 234
    records = classify_corpus(corpus, taxonomy, mock_client)
    assert len(records) == 234
    assert [(r.pr_id, r.comment_id) for r in records] == [(x.pr_id, x.id) for x in corpus]


def test_empty_corpus(taxonomy, mock_client, tmp_path):
    records = classify_corpus(ReviewCorpus(), taxonomy, mock_client)
    assert records == []
    p = tmp_path / "classified.jsonl"
    p.write_text(dump_records(records, "classify"))
    assert load_records(p) == []


def test_ten_of_twenty_reach_stage2(taxonomy, mock_client):
    relevant = [f"Possible use after free of obj_{i}." for i in range(10)]
    other = [f"Please rename field_{i}." for i in range(10)]
    corpus = build_corpus([c(b, cid=str(i)) for i, b in enumerate(relevant + other)], "fixture")
    records = classify_corpus(corpus, taxonomy, mock_client)
    assert len(records) == 20
    assert sum(r.stage2 is not None for r in records) == 10


def test_recall_bias_uncertain_goes_to_stage2(taxonomy, mock_client):
    records = classify_corpus(synthetic_corpus(120, seed=3), taxonomy, mock_client)
    for r in records:
        if r.stage1.security in ("yes", "uncertain") and not r.stage1.classification_failed:
            assert r.stage2 is not None
        else:
            assert r.stage2 is None


def test_stage2_subcategory_inside_pack(taxonomy, mock_client):
    from reviewfuzz.taxonomy import build_context_pack
    records = classify_corpus(synthetic_corpus(120, seed=4), taxonomy, mock_client)
    for r in records:
        if r.stage2 is not None and r.stage2.security == "yes":
            assert r.stage2.subcategory in build_context_pack(taxonomy, r.stage1.categories)


def test_fixture_classification_snapshot(taxonomy, mock_client, fixture_dir):
    corpus = ingest_fixture(fixture_dir / "comments.jsonl")
    records = {r.comment_id: r for r in classify_corpus(corpus, taxonomy, mock_client)}
    assert records["c-7102-1"].stage2.subcategory == 787
    assert records["c-7240-1"].stage2.subcategory == 190
    assert records["c-7401-1"].stage2.subcategory == 416
    assert records["c-7402-1"].stage1.categories == (136,)
    assert sum(r.is_security for r in records.values()) == 6


def test_parallel_matches_serial(taxonomy, mock_client):
    corpus = synthetic_corpus(40, seed=9)
    serial = classify_corpus(corpus, taxonomy, mock_client)
    assert classify_corpus(corpus, taxonomy, mock_client, parallelism=4) == serial


def test_records_round_trip(taxonomy, mock_client, tmp_path):
    records = classify_corpus(synthetic_corpus(30, seed=5), taxonomy, mock_client)
    p = tmp_path / "r.jsonl"
    p.write_text(dump_records(records, "classify"))
    assert load_records(p) == records


@settings(max_examples=50)
@given(st.text(min_size=1, max_size=200).filter(str.strip))
def test_mock_is_pure(taxonomy, mock_client, body):
    a = classify_stage1(c(body), taxonomy, mock_client)
    b = classify_stage1(c(body), taxonomy, MockClient())
    assert a == b


def test_prompts_carry_input_block():
    prompts = PromptSet.load()
    system, user = prompts["stage1"].render({"task": "stage1", "comment": "x"}, comment="x", categories="",
                                            examples="")
    assert extract_input(user) == {"task": "stage1", "comment": "x"}


@pytest.mark.parametrize("text, ok", [('```json\n{"a": 1}\n```', True), ("[1]", False), ("nothing", False)])
def test_parse_json_object(text, ok):
    if ok:
        assert parse_json_object(text) == {"a": 1}
    else:
        with pytest.raises(ModelOutputError):
            parse_json_object(text)
