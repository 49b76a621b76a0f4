import json
import random

import pytest
from hypothesis import given, strategies as st

from reviewfuzz.corpus import (
    CommentKind, CorpusError, GitHubSource, ReviewComment, ReviewCorpus, build_corpus, ingest_fixture,
    normalize_body, parse_pr_range,
)
from reviewfuzz.recording import RecordingTransport, ReplayMiss, request_key


def comment(cid, pr="1", body="hello", created="2024-01-01T00:00:00Z", path=None, kind=CommentKind.DISCUSSION):
    return ReviewComment(cid, pr, kind, body, "dev", created, path)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


@pytest.mark.parametrize("raw, expected", [
    ("  a\n\nb  ", "a b"),
    ("", ""),
    ("```c\nx=1;\n``` note", "x=1; note"),
    ("no fences here", "no fences here"),
    ("tab\there", "tab here"),
])
def test_normalize_examples(raw, expected):
    assert normalize_body(raw) == expected


@given(st.text())
def test_normalize_idempotent(raw):
    once = normalize_body(raw)
    assert normalize_body(once) == once


@given(st.text())
def test_normalize_has_no_runs_of_whitespace(raw):
    out = normalize_body(raw)
    assert out == out.strip()
    assert "  " not in out and "\n" not in out


def test_fixture_dedup_keeps_two_of_three(tmp_path):
    f = tmp_path / "c.jsonl"
    write_jsonl(f, [
        {"id": "1", "pr_id": "9", "kind": "inline", "file_path": "a.c", "body": "same text",
         "created_at": "2024-01-01T00:00:00Z"},
        {"id": "2", "pr_id": "9", "kind": "inline", "file_path": "a.c", "body": "same   text\n",
         "created_at": "2024-01-02T00:00:00Z"},
        {"id": "3", "pr_id": "9", "kind": "inline", "file_path": "a.c", "body": "other",
         "created_at": "2024-01-03T00:00:00Z"},
    ])
    corpus = ingest_fixture(f)
    assert [c.id for c in corpus] == ["1", "3"]


def test_empty_fixture(tmp_path):
    f = tmp_path / "empty.jsonl"
    f.write_text("")
    assert len(ingest_fixture(f)) == 0


def test_out_of_order_is_sorted(tmp_path):
    f = tmp_path / "c.jsonl"
    write_jsonl(f, [
        {"id": "b", "pr_id": "2", "kind": "discussion", "body": "x", "created_at": "2024-01-01T00:00:00Z"},
        {"id": "z", "pr_id": "1", "kind": "discussion", "body": "y", "created_at": "2024-03-01T00:00:00Z"},
        {"id": "a", "pr_id": "1", "kind": "discussion", "body": "w", "created_at": "2024-03-01T00:00:00Z"},
        {"id": "c", "pr_id": "1", "kind": "discussion", "body": "v", "created_at": "2024-02-01T00:00:00Z"},
    ])
    assert [(c.pr_id, c.id) for c in ingest_fixture(f)] == [("1", "c"), ("1", "a"), ("1", "z"), ("2", "b")]


def test_malformed_record_is_named(tmp_path):
    f = tmp_path / "bad.jsonl"
    write_jsonl(f, [{"id": "ok", "pr_id": "1", "kind": "discussion", "body": "fine", "created_at": "2024-01-01"},
                    {"id": "broken-7", "pr_id": "1", "kind": "discussion", "created_at": "2024-01-01"}])
    with pytest.raises(CorpusError, match=r"bad.jsonl:2.*broken-7"):
        ingest_fixture(f)


def test_invalid_json_names_line(tmp_path):
    f = tmp_path / "bad.jsonl"
    f.write_text('{"id": "1"\n')
    with pytest.raises(CorpusError, match="bad.jsonl:1"):
        ingest_fixture(f)


def test_inline_needs_path():
    with pytest.raises(CorpusError):
        comment("1", kind=CommentKind.INLINE)


def test_dump_load_round_trip(tmp_path, fixture_dir):
    corpus = ingest_fixture(fixture_dir / "comments.jsonl")
    p = tmp_path / "corpus.jsonl"
    corpus.save(p)
    again = ReviewCorpus.load(p)
    assert again == corpus
    assert again.dumps() == corpus.dumps()


def test_fixture_corpus_counts(fixture_dir):
    corpus = ingest_fixture(fixture_dir / "comments.jsonl")
    assert len(corpus) == 21
    keys = [c.dedup_key for c in corpus]
    assert len(set(keys)) == len(keys)


comments_strategy = st.lists(
    st.builds(
        comment,
        st.integers(0, 30).map(str),
        pr=st.sampled_from(["1", "2", "3"]),
        body=st.sampled_from(["a", "a ", "b", "c\n\nd", "c d", "```x```"]),
        created=st.sampled_from(["2024-01-01T00:00:00Z", "2024-01-02T00:00:00Z"]),
    ),
    max_size=25,
    unique_by=lambda c: (c.pr_id, c.id),
)


@given(comments_strategy, st.randoms())
def test_dedup_is_order_independent(comments, rng):
    shuffled = list(comments)
    rng.shuffle(shuffled)
    assert build_corpus(comments, "t") == build_corpus(shuffled, "t")


@given(comments_strategy)
def test_dedup_is_idempotent(comments):
    once = build_corpus(comments, "t")
    assert build_corpus(once.comments, "t") == once


@given(comments_strategy)
def test_corpus_invariants(comments):
    c = build_corpus(comments, "t")
    keys = [x.sort_key for x in c]
    assert keys == sorted(keys)
    assert len({x.dedup_key for x in c}) == len(c)
    assert all(x.body == normalize_body(x.body) for x in c)


def test_reused_id_with_other_content_rejected():
    with pytest.raises(CorpusError, match="id reused"):
        build_corpus([comment("1", body="a"), comment("1", body="b")], "t")


@pytest.mark.parametrize("spec, prs", [("12-15,20", [12, 13, 14, 15, 20]), ("3", [3]), ("5,1-2,2", [1, 2, 5])])
def test_pr_range(spec, prs):
    assert parse_pr_range(spec) == prs


def test_pr_range_rejects_empty():
    with pytest.raises(ValueError):
        parse_pr_range("9-3")


def _record(directory, url, params, response):
    key = request_key("GET", url, params)
    (directory / f"{key}.json").write_text(json.dumps({"response": response}), encoding="utf-8")


def test_replay_ingestion_from_recordings(tmp_path):
    base = "https://api.github.com/repos/php/php-src"
    page = {"per_page": 100, "page": 1}
    _record(tmp_path, f"{base}/pulls/7/comments", page, [
        {"id": 11, "body": "memcpy may run past the end", "user": {"login": "rev"},
         "created_at": "2024-02-01T10:00:00Z", "path": "main/x.c", "diff_hunk": "@@ -1 +1 @@"},
    ])
    _record(tmp_path, f"{base}/issues/7/comments", page, [
        {"id": 12, "body": "LGTM", "user": {"login": "m"}, "created_at": "2024-02-02T10:00:00Z"},
    ])
    _record(tmp_path, f"{base}/pulls/7/reviews", page, [
        {"id": 13, "body": "", "user": {"login": "m"}, "submitted_at": "2024-02-03T10:00:00Z"},
    ])
    src = GitHubSource("php/php-src", [7], tmp_path, replay=True, parallelism=1)
    corpus = build_corpus(src.fetch(), "live", None)
    assert [(c.id, c.kind) for c in corpus] == [("11", CommentKind.INLINE), ("12", CommentKind.DISCUSSION)]
    assert corpus.comments[0].file_path == "main/x.c"


def test_replay_miss_never_touches_network(tmp_path):
    t = RecordingTransport(tmp_path, "replay")
    with pytest.raises(ReplayMiss):
        t.request("GET", "https://example.invalid/x")
