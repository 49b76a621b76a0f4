"""Review-comment corpus: ingestion, normalization and deduplication."""

from __future__ import annotations

import enum
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .recording import RecordingTransport

SCHEMA_VERSION = 1
EPOCH = "1970-01-01T00:00:00Z"
GITHUB_API = "https://api.github.com"
TOKEN_ENV = "GITHUB_TOKEN"


class CommentKind(str, enum.Enum):
    INLINE = "inline"
    DISCUSSION = "discussion"
    REVIEW_SUBMISSION = "review_submission"


class CorpusError(ValueError):
    """A fixture record is malformed."""


_FENCE_OPEN = re.compile(r"```[\w+#.-]*(?=[ \t]*(?:\n|$))")
_FENCE = re.compile(r"```")
_WS = re.compile(r"\s+")


def normalize_body(raw: str) -> str:
    """Collapse whitespace and drop code-fence markers, keeping fenced text."""
    text = _FENCE_OPEN.sub(" ", raw)
    text = _FENCE.sub(" ", text)
    return _WS.sub(" ", text).strip()


def parse_timestamp(value: str) -> datetime:
    ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class ReviewComment:
    id: str
    pr_id: str
    kind: CommentKind
    body: str
    author: str
    created_at: str
    file_path: Optional[str] = None
    diff_hunk: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise CorpusError(f"comment {self.pr_id}/{self.id}: empty body")
        if self.kind is CommentKind.INLINE and not self.file_path:
            raise CorpusError(f"comment {self.pr_id}/{self.id}: inline comment without file_path")

    @property
    def sort_key(self) -> tuple:
        return (self.pr_id, self.created_at, self.id)

    @property
    def dedup_key(self) -> tuple:
        return (self.pr_id, normalize_body(self.body), self.file_path or "")

    def to_json(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return {k: d[k] for k in ("id", "pr_id", "kind", "file_path", "diff_hunk", "body", "author", "created_at")}

    @classmethod
    def from_json(cls, d: dict) -> "ReviewComment":
        return cls(
            id=str(d["id"]),
            pr_id=str(d["pr_id"]),
            kind=CommentKind(d["kind"]),
            body=d["body"],
            author=d.get("author") or "",
            created_at=format_timestamp(parse_timestamp(d["created_at"])),
            file_path=d.get("file_path") or None,
            diff_hunk=d.get("diff_hunk") or None,
        )


@dataclass(frozen=True)
class ReviewCorpus:
    comments: tuple = ()
    source: str = "fixture"
    fetched_at: str = EPOCH

    def __len__(self) -> int:
        return len(self.comments)

    def __iter__(self):
        return iter(self.comments)

    def by_id(self) -> dict:
        return {(c.pr_id, c.id): c for c in self.comments}

    def dumps(self) -> str:
        header = {"schema_version": SCHEMA_VERSION, "source": self.source,
                  "fetched_at": self.fetched_at, "count": len(self.comments)}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(c.to_json(), ensure_ascii=False) for c in self.comments]
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "ReviewCorpus":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            return cls()
        header = json.loads(lines[0])
        if "schema_version" not in header:
            raise CorpusError(f"{path}: missing corpus header")
        comments = tuple(ReviewComment.from_json(json.loads(l)) for l in lines[1:] if l.strip())
        return cls(comments, header.get("source", "fixture"), header.get("fetched_at", EPOCH))


def build_corpus(comments: Iterable[ReviewComment], source: str, fetched_at: Optional[str] = None) -> ReviewCorpus:
    """Normalize, deduplicate and order comments.

    Among duplicates the earliest by (pr_id, created_at, id) is kept, which
    makes the result independent of input order.
    """
    seen_ids: dict = {}
    normalized = []
    for c in comments:
        n = ReviewComment(**{**c.__dict__, "body": normalize_body(c.body)})
        prior = seen_ids.get((n.pr_id, n.id))
        if prior is not None:
            if prior != n:
                raise CorpusError(f"comment {n.pr_id}/{n.id}: id reused with different content")
            continue
        seen_ids[(n.pr_id, n.id)] = n
        normalized.append(n)
    normalized.sort(key=lambda c: c.sort_key)
    kept, keys = [], set()
    for c in normalized:
        if c.dedup_key in keys:
            continue
        keys.add(c.dedup_key)
        kept.append(c)
    if fetched_at is None:
        fetched_at = max((c.created_at for c in kept), default=EPOCH)
    return ReviewCorpus(tuple(kept), source, fetched_at)


def _fixture_files(path: Path) -> list:
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("*.jsonl"))
    if path.exists():
        return [path]
    raise FileNotFoundError(f"fixture not found: {path}")


def read_fixture_records(path: Path) -> list:
    out = []
    for f in _fixture_files(path):
        for lineno, line in enumerate(f.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            where = f"{f.name}:{lineno}"
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON ({exc.msg})") from None
            if "schema_version" in d and "body" not in d:
                continue
            try:
                out.append(ReviewComment.from_json(d))
            except KeyError as exc:
                raise CorpusError(f"{where}: record {d.get('id', '?')!r} missing field {exc}") from None
            except (ValueError, TypeError) as exc:
                raise CorpusError(f"{where}: record {d.get('id', '?')!r}: {exc}") from None
    return out


def ingest_fixture(path: Path) -> ReviewCorpus:
    return build_corpus(read_fixture_records(path), "fixture")


def parse_pr_range(spec: str) -> list:
    """``"12-15,20"`` -> [12, 13, 14, 15, 20]."""
    prs: list = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if hi < lo:
                raise ValueError(f"empty PR range {part!r}")
            prs.extend(range(lo, hi + 1))
        else:
            prs.append(int(part))
    if not prs:
        raise ValueError("no pull requests selected")
    return sorted(set(prs))


@dataclass
class GitHubSource:
    """Fetches review comments of a PR range through a recording transport."""

    repo: str
    prs: Sequence[int]
    fixtures_dir: Path
    replay: bool = False
    parallelism: int = 4
    api: str = GITHUB_API
    per_page: int = 100
    transport: Optional[RecordingTransport] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.transport is None:
            headers = {"Accept": "application/vnd.github+json"}
            token = os.environ.get(TOKEN_ENV)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            self.transport = RecordingTransport(
                Path(self.fixtures_dir), "replay" if self.replay else "record", headers
            )

    def _pages(self, url: str) -> list:
        items, page = [], 1
        while True:
            batch = self.transport.request("GET", url, {"per_page": self.per_page, "page": page})
            items.extend(batch)
            if len(batch) < self.per_page:
                return items
            page += 1

    def _fetch_pr(self, pr: int) -> list:
        base = f"{self.api}/repos/{self.repo}"
        out = []
        for c in self._pages(f"{base}/pulls/{pr}/comments"):
            out.append(_from_api(c, pr, CommentKind.INLINE))
        for c in self._pages(f"{base}/issues/{pr}/comments"):
            out.append(_from_api(c, pr, CommentKind.DISCUSSION))
        for c in self._pages(f"{base}/pulls/{pr}/reviews"):
            out.append(_from_api(c, pr, CommentKind.REVIEW_SUBMISSION))
        return [c for c in out if c is not None]

    def fetch(self) -> list:
        with ThreadPoolExecutor(max_workers=max(1, self.parallelism)) as pool:
            results = list(pool.map(self._fetch_pr, self.prs))
        return [c for batch in results for c in batch]


def _from_api(d: dict, pr: int, kind: CommentKind) -> Optional[ReviewComment]:
    body = d.get("body") or ""
    if not body.strip():
        return None  # approvals without text
    created = d.get("created_at") or d.get("submitted_at") or EPOCH
    return ReviewComment(
        id=str(d["id"]),
        pr_id=str(pr),
        kind=kind,
        body=body,
        author=(d.get("user") or {}).get("login", ""),
        created_at=format_timestamp(parse_timestamp(created)),
        file_path=d.get("path") if kind is CommentKind.INLINE else None,
        diff_hunk=d.get("diff_hunk") if kind is CommentKind.INLINE else None,
    )


def ingest_github(repo: str, prs: Sequence[int], fixtures_dir: Path, replay: bool = False,
                  parallelism: int = 4) -> ReviewCorpus:
    src = GitHubSource(repo, list(prs), Path(fixtures_dir), replay=replay, parallelism=parallelism)
    comments = src.fetch()
    fetched = None if replay else format_timestamp(datetime.now(timezone.utc))
    return build_corpus(comments, "live", fetched)
