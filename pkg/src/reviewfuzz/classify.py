"""Two-call classification of review comments against the CWE-699 tree.

The first call screens a comment for security relevance and picks up to
three upper categories; the second call assigns one subcategory from the
context pack built from those categories.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .corpus import ReviewComment, ReviewCorpus
from .llm import MAX_OUTPUT_TOKENS, ModelClient, ModelOutputError, PromptSet, ask
from .recording import RetriableError
from .taxonomy import ContextPack, CweTaxonomy, build_context_pack

SCHEMA_VERSION = 1
SECURITY_STAGE1 = ("yes", "no", "uncertain")
SECURITY_STAGE2 = ("yes", "no")
TRANSPORT_RETRIES = 3


class OutOfPack(ModelOutputError):
    pass


@dataclass(frozen=True)
class Stage1Result:
    security: str
    categories: tuple = ()
    signals: tuple = ()
    classification_failed: bool = False
    error: Optional[str] = None

    @property
    def relevant(self) -> bool:
        return not self.classification_failed and self.security in ("yes", "uncertain")

    def to_json(self) -> dict:
        d = {"security": self.security, "categories": list(self.categories), "signals": list(self.signals)}
        if self.classification_failed:
            d["classification_failed"] = True
            d["error"] = self.error
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Stage1Result":
        return cls(d["security"], tuple(d["categories"]), tuple(d.get("signals", ())),
                   d.get("classification_failed", False), d.get("error"))


@dataclass(frozen=True)
class Stage2Result:
    security: str
    subcategory: Optional[int] = None
    rationale: str = ""
    classification_failed: bool = False
    error: Optional[str] = None

    def to_json(self) -> dict:
        d = {"security": self.security, "subcategory": self.subcategory, "rationale": self.rationale}
        if self.classification_failed:
            d["classification_failed"] = True
            d["error"] = self.error
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Stage2Result":
        return cls(d["security"], d.get("subcategory"), d.get("rationale", ""),
                   d.get("classification_failed", False), d.get("error"))


@dataclass(frozen=True)
class ClassificationRecord:
    pr_id: str
    comment_id: str
    stage1: Stage1Result
    stage2: Optional[Stage2Result] = None

    def to_json(self) -> dict:
        return {
            "pr_id": self.pr_id,
            "comment_id": self.comment_id,
            "stage1": self.stage1.to_json(),
            "stage2": self.stage2.to_json() if self.stage2 else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ClassificationRecord":
        s2 = d.get("stage2")
        return cls(d["pr_id"], d["comment_id"], Stage1Result.from_json(d["stage1"]),
                   Stage2Result.from_json(s2) if s2 else None)

    @property
    def is_security(self) -> bool:
        return self.stage2 is not None and self.stage2.security == "yes"


def _validate_stage1(obj: dict, body: str, taxonomy: CweTaxonomy) -> Stage1Result:
    sec = obj.get("security")
    if sec not in SECURITY_STAGE1:
        raise ModelOutputError(f"security must be one of {SECURITY_STAGE1}, got {sec!r}")
    cats = obj.get("categories", [])
    if not isinstance(cats, list) or not all(isinstance(c, int) for c in cats):
        raise ModelOutputError("categories must be a list of integer ids")
    cats = list(dict.fromkeys(cats))
    unknown = [c for c in cats if c not in taxonomy.category_ids]
    if unknown:
        raise ModelOutputError(f"unknown category ids {unknown}")
    if sec == "no" and cats:
        raise ModelOutputError("security=no must come with an empty category list")
    if sec != "no" and not 1 <= len(cats) <= 3:
        raise ModelOutputError("one to three categories required unless security=no")
    signals = obj.get("signals", [])
    if not isinstance(signals, list):
        raise ModelOutputError("signals must be a list")
    verbatim = tuple(s for s in signals if isinstance(s, str) and s and s in body)
    return Stage1Result(sec, tuple(cats), verbatim)


def _validate_stage2(obj: dict, pack: ContextPack) -> Stage2Result:
    sec = obj.get("security")
    if sec not in SECURITY_STAGE2:
        raise ModelOutputError(f"security must be yes or no, got {sec!r}")
    sub = obj.get("subcategory")
    rationale = str(obj.get("rationale") or "").strip()
    if sec == "no":
        return Stage2Result("no", None, rationale)
    if not isinstance(sub, int) or isinstance(sub, bool):
        raise ModelOutputError("security=yes needs an integer subcategory")
    if sub not in pack:
        raise OutOfPack(f"CWE-{sub} is not in the context pack")
    return Stage2Result("yes", sub, rationale)


def _few_shot_text(path: Optional[Path] = None) -> str:
    p = Path(path) if path else Path(str(resources.files("reviewfuzz") / "data" / "fewshot.json"))
    shots = json.loads(p.read_text(encoding="utf-8"))
    lines = []
    for group in ("security", "non_security"):
        for ex in shots[group]:
            lines.append(f"Comment: {ex['comment']}")
            lines.append("Answer: " + json.dumps(ex["answer"], sort_keys=True))
    return "\n".join(lines)


def _with_retries(fn):
    for attempt in range(TRANSPORT_RETRIES):
        try:
            return fn()
        except RetriableError:
            if attempt == TRANSPORT_RETRIES - 1:
                raise


@dataclass
class Classifier:
    taxonomy: CweTaxonomy
    client: ModelClient
    prompts: PromptSet = field(default_factory=PromptSet.load)
    max_tokens: int = MAX_OUTPUT_TOKENS
    fewshot_path: Optional[Path] = None

    def __post_init__(self) -> None:
        self._categories = "\n".join(f"CWE-{c.cwe_id}: {c.title}" for c in self.taxonomy.categories)
        self._examples = _few_shot_text(self.fewshot_path)

    def stage1(self, comment: ReviewComment) -> Stage1Result:
        body = comment.body
        data = {"task": "stage1", "comment": body, "categories": list(self.taxonomy.category_ids)}
        try:
            result, _ = _with_retries(lambda: ask(
                self.client, self.prompts, "stage1", data,
                lambda o: _validate_stage1(o, body, self.taxonomy), self.max_tokens,
                comment=body, categories=self._categories, examples=self._examples,
            ))
            return result
        except ModelOutputError as exc:
            return Stage1Result("uncertain", (), (), True, str(exc))

    def stage2(self, comment: ReviewComment, s1: Stage1Result) -> Stage2Result:
        if not s1.relevant:
            raise ValueError("stage 2 needs a stage-1 result of yes or uncertain")
        pack = build_context_pack(self.taxonomy, s1.categories)
        data = {"task": "stage2", "comment": comment.body, "stage1": s1.to_json(), "pack": sorted(pack.ids())}
        try:
            result, _ = _with_retries(lambda: ask(
                self.client, self.prompts, "stage2", data,
                lambda o: _validate_stage2(o, pack), self.max_tokens,
                comment=comment.body, pack=pack.render(), stage1=json.dumps(s1.to_json(), sort_keys=True),
            ))
            return result
        except OutOfPack as exc:
            return Stage2Result("no", None, f"rejected: {exc}")
        except ModelOutputError as exc:
            return Stage2Result("no", None, "", True, str(exc))

    def classify(self, comment: ReviewComment) -> ClassificationRecord:
        try:
            s1 = self.stage1(comment)
            s2 = self.stage2(comment, s1) if s1.relevant else None
        except Exception as exc:  # transport errors after retries, bad data
            s1, s2 = Stage1Result("uncertain", (), (), True, f"{type(exc).__name__}: {exc}"), None
        return ClassificationRecord(comment.pr_id, comment.id, s1, s2)


def classify_stage1(comment: ReviewComment, taxonomy: CweTaxonomy, client: ModelClient, **kw) -> Stage1Result:
    return Classifier(taxonomy, client, **kw).stage1(comment)


def classify_stage2(comment: ReviewComment, stage1: Stage1Result, taxonomy: CweTaxonomy,
                    client: ModelClient, **kw) -> Stage2Result:
    return Classifier(taxonomy, client, **kw).stage2(comment, stage1)


def classify_corpus(corpus: ReviewCorpus, taxonomy: CweTaxonomy, client: ModelClient,
                    parallelism: int = 1, **kw) -> list:
    clf = Classifier(taxonomy, client, **kw)
    comments = list(corpus.comments)
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(clf.classify, comments))
    else:
        records = [clf.classify(c) for c in comments]
    return records


def dump_records(records: Sequence, stage: str) -> str:
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, "stage": stage, "count": len(records)}, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) for r in records]
    return "\n".join(lines) + "\n"


def load_records(path: Path, cls=ClassificationRecord) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {header.get('schema_version')!r}")
    return [cls.from_json(json.loads(l)) for l in lines[1:] if l.strip()]
