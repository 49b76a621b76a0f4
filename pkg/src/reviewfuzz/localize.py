"""Map a security-relevant review comment to the changed function it concerns.

Step 1 ranks changed functions from their names and paths alone.  Step 2
shows the diff hunks of the top candidates and keeps only those for which
the model cites a line that really occurs in the hunks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .cfunc import UnbalancedBraces, find_functions
from .classify import ClassificationRecord
from .corpus import ReviewComment
from .diffs import FileDiff, PatchError, apply_diff, parse_unified_diff, reverse_diff
from .instrument import strip_guards
from .llm import MAX_OUTPUT_TOKENS, ModelClient, ModelOutputError, PromptSet, ask, fill
from .taxonomy import CweTaxonomy

SCHEMA_VERSION = 1
TOP_K = 3
CONFIDENCE = ("HIGH", "MEDIUM", "LOW")


@dataclass(frozen=True)
class ChangedFunction:
    file_path: str
    name: str
    span: tuple
    hunks: tuple

    @property
    def ref(self) -> tuple:
        return (self.name, self.file_path)

    def to_json(self) -> dict:
        return {"file_path": self.file_path, "name": self.name, "span": list(self.span), "hunks": list(self.hunks)}

    @classmethod
    def from_json(cls, d: dict) -> "ChangedFunction":
        return cls(d["file_path"], d["name"], tuple(d["span"]), tuple(d["hunks"]))


def extract_changed_functions(pre_source: str, post_source: str, unified_diff: Union[str, FileDiff],
                              file_path: Optional[str] = None) -> list:
    if isinstance(unified_diff, str):
        diffs = parse_unified_diff(unified_diff)
        if len(diffs) != 1:
            raise PatchError(f"expected a single-file diff, got {len(diffs)} files")
        fd = diffs[0]
    else:
        fd = unified_diff
    if apply_diff(pre_source, fd) != post_source:
        raise PatchError(f"{fd.path}: diff does not turn the pre-image into the post-image")
    path = file_path or fd.path
    touched = [(h, h.touched_new_lines()) for h in fd.hunks]
    out = []
    for fn in find_functions(post_source):
        hunks = tuple(h.text for h, lines in touched
                      if any(fn.start_line <= n <= fn.end_line for n in lines))
        if hunks:
            out.append(ChangedFunction(path, fn.name, (fn.start_line, fn.end_line), hunks))
    return out


def changed_functions_for_diff(checkout: Path, diff_text: str) -> tuple:
    """Changed functions of a multi-file diff against a post-image checkout.

    Returns ``(functions, warnings)``; files with unbalanced braces are
    skipped with a warning record.
    """
    functions, warnings = [], []
    for fd in parse_unified_diff(diff_text):
        if fd.new_path == "/dev/null":
            continue
        path = Path(checkout) / fd.path
        if not path.exists():
            warnings.append({"file": fd.path, "reason": "missing-file"})
            continue
        # a checkout annotated by an earlier --apply run still matches its diffs
        post = strip_guards(path.read_text(encoding="utf-8"))
        pre = reverse_diff(post, fd)
        try:
            functions.extend(extract_changed_functions(pre, post, fd))
        except UnbalancedBraces as exc:
            warnings.append({"file": fd.path, "reason": "unbalanced-braces", "detail": str(exc)})
    return functions, warnings


@dataclass(frozen=True)
class CweHint:
    category_id: int
    category_title: str
    subcategory_id: int
    subcategory_title: str
    rationale: str

    @classmethod
    def from_record(cls, record: ClassificationRecord, taxonomy: CweTaxonomy) -> Optional["CweHint"]:
        if not record.is_security:
            return None
        sub = taxonomy.node(record.stage2.subcategory)
        cat = taxonomy.node(taxonomy.category_of(sub.cwe_id))
        return cls(cat.cwe_id, cat.title, sub.cwe_id, sub.title, record.stage2.rationale)

    def render(self, prompts: PromptSet) -> str:
        return fill(prompts["cwe_hint"].user, category_title=self.category_title, category_id=self.category_id,
                    subcategory_title=self.subcategory_title, subcategory_id=self.subcategory_id,
                    rationale=self.rationale)

    def to_json(self) -> dict:
        return {"category": self.category_id, "subcategory": self.subcategory_id}


@dataclass(frozen=True)
class Ranked:
    function: str
    file: str
    justification: str = ""
    cited_lines: tuple = ()

    @property
    def ref(self) -> tuple:
        return (self.function, self.file)

    def to_json(self) -> dict:
        d = {"function": self.function, "file": self.file, "justification": self.justification}
        if self.cited_lines:
            d["cited_lines"] = list(self.cited_lines)
        return d


@dataclass(frozen=True)
class LocalizationResult:
    concern: str
    ranked: tuple
    rejected: tuple
    confidence: Optional[str]
    cwe_used: bool
    abstained: bool

    def __post_init__(self) -> None:
        if self.abstained and self.ranked:
            raise ValueError("an abstaining result cannot rank functions")
        if (self.confidence is None) != self.abstained:
            raise ValueError("confidence must be present exactly when not abstaining")

    def to_json(self) -> dict:
        return {
            "concern": self.concern,
            "ranked": [r.to_json() for r in self.ranked],
            "rejected": [{"function": f, "file": p, "reason": why} for f, p, why in self.rejected],
            "confidence": self.confidence,
            "cwe_used": self.cwe_used,
            "abstained": self.abstained,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LocalizationResult":
        ranked = tuple(Ranked(r["function"], r["file"], r.get("justification", ""), tuple(r.get("cited_lines", ())))
                       for r in d["ranked"])
        rejected = tuple((r["function"], r["file"], r["reason"]) for r in d["rejected"])
        return cls(d["concern"], ranked, rejected, d["confidence"], d["cwe_used"], d["abstained"])


def _abstain(concern: str, rejected: Sequence, cwe_used: bool = False) -> LocalizationResult:
    return LocalizationResult(concern, (), tuple(rejected), None, cwe_used, True)


def _validate_select(obj: dict, candidates: Sequence[ChangedFunction]) -> LocalizationResult:
    refs = {c.ref for c in candidates}
    names = {c.name: c.ref for c in candidates}
    concern = str(obj.get("concern") or "")
    ranked, rejected = [], []
    for r in obj.get("ranked") or []:
        if not isinstance(r, dict) or "function" not in r:
            raise ModelOutputError("ranked entries need a function name")
        ref = (r["function"], r.get("file"))
        if ref not in refs and r.get("file") is None and r["function"] in names:
            ref = names[r["function"]]
        if ref not in refs:
            rejected.append((r["function"], r.get("file") or "", "not-a-candidate"))
            continue
        if ref not in {x.ref for x in ranked}:
            ranked.append(Ranked(ref[0], ref[1], str(r.get("justification") or "")))
    for r in obj.get("rejected") or []:
        if isinstance(r, dict) and "function" in r:
            rejected.append((r["function"], r.get("file") or "", str(r.get("reason") or "")))
    cwe_used = bool(obj.get("cwe_used", False))
    if not ranked:
        return _abstain(concern, rejected, cwe_used)
    conf = obj.get("confidence")
    if conf not in CONFIDENCE:
        raise ModelOutputError(f"confidence must be one of {CONFIDENCE}, got {conf!r}")
    return LocalizationResult(concern, tuple(ranked), tuple(rejected), conf, cwe_used, False)


def _validate_verify(obj: dict, candidates: Sequence[ChangedFunction], cwe_used: bool) -> LocalizationResult:
    by_ref = {c.ref: c for c in candidates}
    concern = str(obj.get("concern") or "")
    confirmed, rejected = [], []
    for r in obj.get("confirmed") or []:
        if not isinstance(r, dict) or "function" not in r:
            raise ModelOutputError("confirmed entries need a function name")
        ref = (r["function"], r.get("file"))
        fn = by_ref.get(ref)
        if fn is None:
            rejected.append((r["function"], r.get("file") or "", "not-a-candidate"))
            continue
        cited = tuple(l for l in (r.get("cited_lines") or []) if isinstance(l, str) and l.strip())
        hunk_text = "\n".join(fn.hunks)
        if not cited or not all(l in hunk_text for l in cited):
            rejected.append((fn.name, fn.file_path, "citation-not-in-hunks"))
            continue
        confirmed.append(Ranked(fn.name, fn.file_path, str(r.get("justification") or ""), cited))
    for r in obj.get("rejected") or []:
        if isinstance(r, dict) and "function" in r:
            rejected.append((r["function"], r.get("file") or "", str(r.get("reason") or "")))
    if not confirmed:
        return _abstain(concern, rejected, cwe_used)
    conf = obj.get("confidence")
    if conf not in CONFIDENCE:
        raise ModelOutputError(f"confidence must be one of {CONFIDENCE}, got {conf!r}")
    return LocalizationResult(concern, tuple(confirmed), tuple(rejected), conf, cwe_used, False)


@dataclass
class Localizer:
    client: ModelClient
    prompts: PromptSet = field(default_factory=PromptSet.load)
    max_tokens: int = MAX_OUTPUT_TOKENS
    top_k: int = TOP_K

    def select_candidates(self, comment: ReviewComment, functions: Sequence[ChangedFunction],
                          cwe_hint: Optional[CweHint] = None) -> LocalizationResult:
        if not functions:
            raise ValueError("no candidate functions")
        cands = [{"function": f.name, "file": f.file_path} for f in functions]
        data = {"task": "localize_select", "comment": comment.body, "candidates": cands,
                "hint": cwe_hint.to_json() if cwe_hint else None}
        listing = "\n".join(f"- {f.name} ({f.file_path})" for f in functions)
        hint_text = cwe_hint.render(self.prompts) if cwe_hint else ""
        try:
            result, _ = ask(self.client, self.prompts, "localize_select", data,
                            lambda o: _validate_select(o, functions), self.max_tokens,
                            comment=comment.body, candidates=listing, cwe_hint=hint_text)
        except ModelOutputError as exc:
            return _abstain("", [("*", "*", f"model-output: {exc}")])
        return result

    def verify_with_diffs(self, comment: ReviewComment, step1: LocalizationResult,
                          functions: Sequence[ChangedFunction]) -> LocalizationResult:
        if step1.abstained:
            raise ValueError("step 2 needs a non-abstaining step-1 result")
        by_ref = {f.ref: f for f in functions}
        top = [by_ref[r.ref] for r in step1.ranked[: self.top_k]]
        cands = [{"function": f.name, "file": f.file_path, "hunks": list(f.hunks)} for f in top]
        data = {"task": "localize_verify", "comment": comment.body, "candidates": cands}
        shown = "\n\n".join(f"### {f.name} ({f.file_path})\n" + "\n".join(f.hunks) for f in top)
        try:
            result, _ = ask(self.client, self.prompts, "localize_verify", data,
                            lambda o: _validate_verify(o, top, step1.cwe_used), self.max_tokens,
                            comment=comment.body, hunks=shown)
        except ModelOutputError as exc:
            return _abstain(step1.concern, [("*", "*", f"model-output: {exc}")], step1.cwe_used)
        return result


def select_candidates(comment, functions, cwe_hint, client, **kw) -> LocalizationResult:
    return Localizer(client, **kw).select_candidates(comment, functions, cwe_hint)


def verify_with_diffs(comment, step1, functions, client, **kw) -> LocalizationResult:
    return Localizer(client, **kw).verify_with_diffs(comment, step1, functions)


@dataclass(frozen=True)
class LocalizationRecord:
    pr_id: str
    comment_id: str
    cwe: Optional[int]
    functions: tuple
    step1: Optional[LocalizationResult]
    step2: Optional[LocalizationResult]
    warnings: tuple = ()
    skipped: Optional[str] = None

    @property
    def selected(self) -> tuple:
        if self.step2 is None or self.step2.abstained:
            return ()
        return self.step2.ranked

    def to_json(self) -> dict:
        return {
            "pr_id": self.pr_id,
            "comment_id": self.comment_id,
            "cwe": self.cwe,
            "functions": [f.to_json() for f in self.functions],
            "step1": self.step1.to_json() if self.step1 else None,
            "step2": self.step2.to_json() if self.step2 else None,
            "warnings": list(self.warnings),
            "skipped": self.skipped,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LocalizationRecord":
        return cls(
            d["pr_id"], d["comment_id"], d.get("cwe"),
            tuple(ChangedFunction.from_json(f) for f in d["functions"]),
            LocalizationResult.from_json(d["step1"]) if d.get("step1") else None,
            LocalizationResult.from_json(d["step2"]) if d.get("step2") else None,
            tuple(d.get("warnings", ())), d.get("skipped"),
        )


def diff_path(diffs_dir: Path, pr_id: str) -> Path:
    return Path(diffs_dir) / f"{pr_id}.diff"


def localize_records(records: Sequence[ClassificationRecord], comments: dict, taxonomy: CweTaxonomy,
                     client: ModelClient, checkout: Path, diffs_dir: Path, use_cwe_hint: bool = True,
                     **kw) -> list:
    """Localize every comment whose stage-2 verdict is security=yes."""
    loc = Localizer(client, **kw)
    cache: dict = {}
    out = []
    for rec in records:
        if not rec.is_security:
            continue
        comment = comments[(rec.pr_id, rec.comment_id)]
        base = dict(pr_id=rec.pr_id, comment_id=rec.comment_id, cwe=rec.stage2.subcategory)
        dp = diff_path(diffs_dir, rec.pr_id)
        if not dp.exists():
            out.append(LocalizationRecord(**base, functions=(), step1=None, step2=None, skipped="no-diff"))
            continue
        if rec.pr_id not in cache:
            cache[rec.pr_id] = changed_functions_for_diff(checkout, dp.read_text(encoding="utf-8"))
        functions, warnings = cache[rec.pr_id]
        if not functions:
            out.append(LocalizationRecord(**base, functions=(), step1=None, step2=None,
                                          warnings=tuple(warnings), skipped="no-changed-functions"))
            continue
        hint = CweHint.from_record(rec, taxonomy) if use_cwe_hint else None
        s1 = loc.select_candidates(comment, functions, hint)
        s2 = None if s1.abstained else loc.verify_with_diffs(comment, s1, functions)
        out.append(LocalizationRecord(**base, functions=tuple(functions), step1=s1, step2=s2,
                                      warnings=tuple(warnings)))
    return out


def dump_localized(records: Sequence[LocalizationRecord]) -> str:
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, "stage": "localize", "count": len(records)}, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) for r in records]
    return "\n".join(lines) + "\n"
