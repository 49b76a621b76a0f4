"""Anchor-based insertion of guarded annotation macros into C sources.

A guarded block always has the shape::

    <pre-anchor text>

    <indent>#ifdef _USE_IJON
    <indent><snippet>
    <indent>#endif

so it can be located and stripped again byte-exactly.  Injection works on
the original text plus a list of blocks, which makes it independent of the
order in which sites are added.
"""

from __future__ import annotations

import difflib
import enum
import json
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .cfunc import UnbalancedBraces, blank_non_code, find_functions
from .llm import MAX_OUTPUT_TOKENS, ModelClient, ModelOutputError, PromptSet, ask
from .runtime import Macro, fnv1a64

SCHEMA_VERSION = 1
GUARD = "_USE_IJON"
MAX_PLANS = 5
GLOBAL_ACCESSORS = frozenset({"EG", "CG", "PG", "SG", "BG", "ZSTR_LEN", "ZSTR_VAL", "Z_TYPE_P", "Z_LVAL_P",
                              "Z_STRLEN_P", "Z_STRVAL_P", "sizeof"})
C_KEYWORDS = frozenset({"int", "char", "long", "short", "unsigned", "signed", "size_t", "const", "void",
                        "uint8_t", "uint16_t", "uint32_t", "uint64_t", "int32_t", "int64_t", "zend_long",
                        "zend_ulong", "NULL", "true", "false"})
_BLOCK = re.compile(r"\n\n([ \t]*)#ifdef " + GUARD + r"\n\1([^\n]*)\n\1#endif")
_IDENT = re.compile(r"(?<![\w.>])(?<!->)([A-Za-z_]\w*)")
_FORBIDDEN = re.compile(r"#\s*(?:include|define|undef|pragma)|\bextern\b|\bstatic\b")


class Rejection(str, enum.Enum):
    ANCHOR_MISSING = "anchor-missing"
    ANCHOR_AMBIGUOUS = "anchor-ambiguous"
    ANCHOR_MIDLINE = "anchor-midline"
    INVALID_PLAN = "invalid-plan"
    DUPLICATE = "duplicate"
    SYNTAX = "syntax"
    SCOPE = "scope"
    COMPILE = "compile"


class AnchorError(ValueError):
    def __init__(self, reason: Rejection, detail: str = "") -> None:
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


class DuplicateInjection(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationPlan:
    macro: Macro
    snippet: str
    insertion_description: str
    pre_anchor: str
    post_anchor: str
    rationale: str

    def to_json(self) -> dict:
        return {"macro": self.macro.value, "snippet": self.snippet,
                "insertion_description": self.insertion_description, "pre_anchor": self.pre_anchor,
                "post_anchor": self.post_anchor, "rationale": self.rationale}

    @classmethod
    def from_json(cls, d: dict) -> "AnnotationPlan":
        return cls(Macro(d["macro"]), d["snippet"], d.get("insertion_description", ""), d["pre_anchor"],
                   d["post_anchor"], d.get("rationale", ""))


def site_id_for(file_path: str, function: str, macro: Macro, snippet: str) -> int:
    return fnv1a64("\x00".join((file_path, function, macro.value, snippet)).encode())


@dataclass(frozen=True)
class AnnotationSite:
    file_path: str
    function: str
    byte_offset: int
    indent: str
    plan: AnnotationPlan

    @property
    def site_id(self) -> int:
        return site_id_for(self.file_path, self.function, self.plan.macro, self.plan.snippet)

    def to_json(self) -> dict:
        return {"site_id": f"{self.site_id:016x}", "file_path": self.file_path, "function": self.function,
                "byte_offset": self.byte_offset, "indent": self.indent, "plan": self.plan.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "AnnotationSite":
        return cls(d["file_path"], d["function"], d["byte_offset"], d["indent"], AnnotationPlan.from_json(d["plan"]))


# -- plan validation ----------------------------------------------------

def validate_plan(obj: dict) -> AnnotationPlan:
    try:
        macro = Macro(str(obj["macro"]).upper().replace("IJON_", ""))
    except (KeyError, ValueError):
        raise ModelOutputError(f"unknown macro {obj.get('macro')!r}") from None
    snippet = str(obj.get("snippet") or "").strip()
    pre, post = obj.get("pre_anchor"), obj.get("post_anchor")
    if not isinstance(pre, str) or not pre.strip() or not isinstance(post, str) or not post.strip():
        raise ModelOutputError("both anchors must be non-empty strings")
    if not snippet or "\n" in snippet:
        raise ModelOutputError("snippet must be a single non-empty line")
    if _FORBIDDEN.search(snippet):
        raise ModelOutputError("snippet introduces headers, macros or external declarations")
    if not snippet.startswith(f"IJON_{macro.value}("):
        raise ModelOutputError(f"snippet must call IJON_{macro.value}")
    return AnnotationPlan(macro, snippet, str(obj.get("insertion_description") or ""), pre, post,
                          str(obj.get("rationale") or ""))


def _validate_candidates(obj: dict) -> tuple:
    cands = obj.get("candidates")
    if not isinstance(cands, list):
        raise ModelOutputError("candidates must be a list")
    plans, dropped = [], []
    for c in cands[:MAX_PLANS]:
        try:
            plans.append(validate_plan(c if isinstance(c, dict) else {}))
        except ModelOutputError as exc:
            dropped.append(str(exc))
    return plans, dropped


def propose_annotations(function_source: str, comment: str, cwe_hint, client: ModelClient,
                        function: str = "", file_path: str = "", prompts: Optional[PromptSet] = None,
                        max_tokens: int = MAX_OUTPUT_TOKENS) -> tuple:
    """Ask for up to five plans; returns ``(plans, dropped_reasons)``."""
    prompts = prompts or PromptSet.load()
    data = {"task": "annotate", "comment": comment, "function": function, "file": file_path,
            "source": function_source, "hint": cwe_hint.to_json() if cwe_hint else None}
    hint_text = cwe_hint.render(prompts) if cwe_hint else ""
    try:
        (plans, dropped), _ = ask(client, prompts, "annotate", data, _validate_candidates, max_tokens,
                                  comment=comment, cwe_hint=hint_text, function=function, file=file_path,
                                  source=function_source)
    except ModelOutputError as exc:
        return [], [f"model-output: {exc}"]
    return plans, dropped


# -- anchors ------------------------------------------------------------

def _find_all(text: str, needle: str) -> list:
    out, i = [], text.find(needle)
    while i >= 0:
        out.append((i, i + len(needle)))
        i = text.find(needle, i + 1)
    return out


def _fuzzy(needle: str) -> re.Pattern:
    chars = [re.escape(c) for c in needle if not c.isspace()]
    return re.compile(r"\s*".join(chars))


def _find_all_ws(text: str, needle: str) -> list:
    return [(m.start(), m.end()) for m in _fuzzy(needle).finditer(text)]


def _placements(text: str, pre: str, post: str, finder) -> list:
    pres = finder(text, pre)
    posts = finder(text, post)
    out = []
    for k, (_, end) in enumerate(pres):
        after = [p for p in posts if p[0] >= end]
        if not after:
            continue
        nxt = after[0][0]
        # a later pre occurrence before the post anchor is the tighter placement
        if k + 1 < len(pres) and pres[k + 1][0] < nxt:
            continue
        out.append(end)
    return out


def resolve_anchor(source: str, plan: AnnotationPlan, file_path: str = "", function: str = "",
                   base_offset: int = 0) -> AnnotationSite:
    """Locate the unique insertion point; raises :class:`AnchorError`.

    ``source`` is the function text; ``base_offset`` its position in the file.
    """
    found = _placements(source, plan.pre_anchor, plan.post_anchor, _find_all)
    if not found:
        found = _placements(source, plan.pre_anchor, plan.post_anchor, _find_all_ws)
    if not found:
        raise AnchorError(Rejection.ANCHOR_MISSING, plan.pre_anchor)
    if len(found) > 1:
        raise AnchorError(Rejection.ANCHOR_AMBIGUOUS, f"{plan.pre_anchor!r} fits {len(found)} places")
    offset = found[0]
    line_end = source.find("\n", offset)
    rest = source[offset: line_end if line_end >= 0 else len(source)]
    if rest.strip() and not rest.strip().startswith(("//", "/*")):
        raise AnchorError(Rejection.ANCHOR_MIDLINE, f"code follows the anchor on its line: {rest.strip()!r}")
    line_start = source.rfind("\n", 0, offset) + 1
    line = source[line_start:offset]
    indent = line[: len(line) - len(line.lstrip(" \t"))]
    return AnnotationSite(file_path, function, base_offset + offset, indent, plan)


# -- injection ----------------------------------------------------------

def render_block(indent: str, snippet: str) -> str:
    return f"\n\n{indent}#ifdef {GUARD}\n{indent}{snippet}\n{indent}#endif"


def parse_injected(text: str) -> tuple:
    """Split injected text into (original text, [(offset, indent, snippet), ...])."""
    blocks, parts, pos, removed = [], [], 0, 0
    for m in _BLOCK.finditer(text):
        parts.append(text[pos:m.start()])
        blocks.append((m.start() - removed, m.group(1), m.group(2)))
        removed += m.end() - m.start()
        pos = m.end()
    parts.append(text[pos:])
    return "".join(parts), blocks


def strip_guards(text: str) -> str:
    return parse_injected(text)[0]


def render(original: str, blocks: Sequence[tuple]) -> str:
    out, pos = [], 0
    for offset, indent, snippet in sorted(blocks, key=lambda b: (b[0], b[2], b[1])):
        out.append(original[pos:offset])
        out.append(render_block(indent, snippet))
        pos = offset
    out.append(original[pos:])
    return "".join(out)


def inject(source: str, site: AnnotationSite) -> str:
    """Insert ``site`` into ``source`` (which may already carry blocks).

    ``site.byte_offset`` is expressed in original-text coordinates.
    Raises :class:`DuplicateInjection` for a repeated (offset, snippet).
    """
    original, blocks = parse_injected(source)
    key = (site.byte_offset, site.plan.snippet)
    if any((o, s) == key for o, _, s in blocks):
        raise DuplicateInjection(f"site {site.site_id:016x} already injected")
    return render(original, blocks + [(site.byte_offset, site.indent, site.plan.snippet)])


def injection_diff(before: str, after: str, path: str) -> str:
    return "".join(difflib.unified_diff(before.splitlines(True), after.splitlines(True),
                                        f"a/{path}", f"b/{path}"))


# -- safety checks ------------------------------------------------------

def _balance(text: str) -> tuple:
    code = blank_non_code(text)
    return tuple(code.count(o) - code.count(c) for o, c in ("{}", "()", "[]"))


def snippet_identifiers(snippet: str) -> list:
    body = snippet.split("//", 1)[0]
    body = re.sub(r"^IJON_[A-Z]+", "", body.strip())
    return [m.group(1) for m in _IDENT.finditer(blank_non_code(body))]


@dataclass(frozen=True)
class SafetyResult:
    ok: bool
    reason: Optional[Rejection] = None
    detail: str = ""


CompileHook = Callable[[str, AnnotationSite], Optional[str]]


def safety_check(new_source: str, site: AnnotationSite, compile_hook: Optional[CompileHook] = None) -> SafetyResult:
    original, blocks = parse_injected(new_source)
    snippet = site.plan.snippet
    if _balance(snippet) != (0, 0, 0) or not snippet.split("//", 1)[0].rstrip().endswith(";"):
        return SafetyResult(False, Rejection.SYNTAX, "snippet is not a balanced statement")
    try:
        funcs = [f for f in find_functions(original) if f.name == site.function]
        new_funcs = [f for f in find_functions(new_source) if f.name == site.function]
    except UnbalancedBraces as exc:
        return SafetyResult(False, Rejection.SYNTAX, str(exc))
    fn = next((f for f in funcs if f.start <= site.byte_offset <= f.end), None)
    if fn is None or len(new_funcs) != len(funcs):
        return SafetyResult(False, Rejection.SYNTAX, "insertion point is outside the function")
    new_fn = new_funcs[funcs.index(fn)]
    if _balance(original[fn.start:fn.end]) != _balance(new_source[new_fn.start:new_fn.end]):
        return SafetyResult(False, Rejection.SYNTAX, "bracket balance of the function changed")
    visible = original[fn.start:site.byte_offset]
    for ident in snippet_identifiers(snippet):
        if ident in GLOBAL_ACCESSORS or ident in C_KEYWORDS:
            continue
        if not re.search(rf"\b{re.escape(ident)}\b", visible):
            return SafetyResult(False, Rejection.SCOPE, f"{ident} is not visible at the insertion point")
    same = [b for b in blocks if b[2] == snippet and fn.start <= b[0] <= fn.end]
    if len(same) > 1:
        return SafetyResult(False, Rejection.DUPLICATE, "identical annotation already present in the function")
    if compile_hook is not None:
        err = compile_hook(new_source, site)
        if err:
            return SafetyResult(False, Rejection.COMPILE, err)
    return SafetyResult(True)


def command_compile_hook(command: Sequence[str], suffix: str = ".c") -> CompileHook:
    """Compile hook running ``command + [file]``; non-zero exit fails the check."""

    def hook(source: str, site: AnnotationSite) -> Optional[str]:
        with tempfile.NamedTemporaryFile("w", suffix=suffix, delete=True) as f:
            f.write(source)
            f.flush()
            proc = subprocess.run([*command, f.name], capture_output=True, text=True)
        return None if proc.returncode == 0 else (proc.stderr.strip() or f"exit {proc.returncode}")[:500]

    return hook


# -- per-function driver -----------------------------------------------

@dataclass
class FunctionOutcome:
    file_path: str
    function: str
    sites: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (plan json or None, reason, detail)
    skipped: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "file_path": self.file_path,
            "function": self.function,
            "sites": [s.to_json() for s in self.sites],
            "rejected": [{"plan": p, "reason": r, "detail": d} for p, r, d in self.rejected],
            "skipped": self.skipped,
        }


def instrument_function(text: str, file_path: str, function: str, plans: Sequence[AnnotationPlan],
                        compile_hook: Optional[CompileHook] = None) -> tuple:
    """Resolve and inject every plan that passes all checks.

    ``text`` may already carry guarded blocks.  Returns ``(new_text, outcome)``.
    """
    outcome = FunctionOutcome(file_path, function)
    original, _ = parse_injected(text)
    try:
        spans = [f for f in find_functions(original) if f.name == function]
    except UnbalancedBraces as exc:
        outcome.skipped = f"unbalanced-braces: {exc}"
        return text, outcome
    if len(spans) != 1:
        outcome.skipped = "function-not-found" if not spans else "function-ambiguous"
        return text, outcome
    fn = spans[0]
    fsrc = original[fn.start:fn.end]
    for plan in plans:
        try:
            site = resolve_anchor(fsrc, plan, file_path, function, fn.start)
        except AnchorError as exc:
            outcome.rejected.append((plan.to_json(), exc.reason.value, str(exc)))
            continue
        try:
            candidate = inject(text, site)
        except DuplicateInjection as exc:
            outcome.rejected.append((plan.to_json(), Rejection.DUPLICATE.value, str(exc)))
            continue
        verdict = safety_check(candidate, site, compile_hook)
        if not verdict.ok:
            outcome.rejected.append((plan.to_json(), verdict.reason.value, verdict.detail))
            continue
        text = candidate
        outcome.sites.append(site)
    return text, outcome


def dump_outcomes(records: Sequence[dict]) -> str:
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, "stage": "instrument", "count": len(records)}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records]
    return "\n".join(lines) + "\n"


@dataclass
class InstrumentRun:
    records: list  # per (comment, function) outcome dicts
    originals: dict  # path -> original text
    annotated: dict  # path -> injected text

    def diff(self) -> str:
        return "".join(injection_diff(self.originals[p], self.annotated[p], p) for p in sorted(self.annotated))

    def sites(self) -> list:
        return [s for r in self.records for s in r["sites"]]


def instrument_localized(localized: Sequence, comments: dict, hints: dict, client: ModelClient, checkout: Path,
                         prompts: Optional[PromptSet] = None, compile_hook: Optional[CompileHook] = None) -> InstrumentRun:
    """Plan and inject annotations for every selected function.

    All sites land in one working copy of ``checkout``; files are read once
    and annotations from later comments see the earlier ones.
    """
    prompts = prompts or PromptSet.load()
    originals: dict = {}
    texts: dict = {}
    records = []
    for loc in localized:
        comment = comments[(loc.pr_id, loc.comment_id)]
        hint = hints.get((loc.pr_id, loc.comment_id))
        for ranked in loc.selected:
            path = ranked.file
            if path not in texts:
                fp = Path(checkout) / path
                if not fp.exists():
                    records.append(dict(_base(loc, ranked), sites=[], rejected=[], skipped="missing-file"))
                    continue
                originals[path] = strip_guards(fp.read_text(encoding="utf-8"))
                texts[path] = originals[path]
            original = originals[path]
            try:
                span = [f for f in find_functions(original) if f.name == ranked.function]
            except UnbalancedBraces as exc:
                records.append(dict(_base(loc, ranked), sites=[], rejected=[], skipped=f"unbalanced-braces: {exc}"))
                continue
            if len(span) != 1:
                records.append(dict(_base(loc, ranked), sites=[], rejected=[], skipped="function-not-found"))
                continue
            fn = span[0]
            plans, dropped = propose_annotations(original[fn.start:fn.end], comment.body, hint, client,
                                                 ranked.function, path, prompts)
            if not plans:
                records.append(dict(_base(loc, ranked), sites=[], rejected=[{"plan": None, "reason": Rejection.INVALID_PLAN.value, "detail": d} for d in dropped],
                                    skipped="no-valid-plans"))
                continue
            texts[path], outcome = instrument_function(texts[path], path, ranked.function, plans, compile_hook)
            rec = dict(_base(loc, ranked), **{k: v for k, v in outcome.to_json().items() if k not in ("file_path", "function")})
            rec["rejected"] = [{"plan": None, "reason": Rejection.INVALID_PLAN.value, "detail": d} for d in dropped] + rec["rejected"]
            records.append(rec)
    annotated = {p: t for p, t in texts.items() if t != originals[p]}
    return InstrumentRun(records, originals, annotated)


def _base(loc, ranked) -> dict:
    return {"pr_id": loc.pr_id, "comment_id": loc.comment_id, "file_path": ranked.file, "function": ranked.function}
