"""Deterministic stand-in for the chat model, driven by a checked-in rule table.

Rules are ordered and the first match wins.  The mock never consults
anything but the input block of the prompt, so identical prompts always
produce identical replies.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

from .llm import MAX_OUTPUT_TOKENS, extract_input

_WORD = re.compile(r"[A-Za-z][A-Za-z0-9]+")
_SUBWORD = re.compile(r"[A-Z]?[a-z0-9]+|[A-Z]+(?![a-z])")
_CONST = re.compile(r"^(?:[A-Z_][A-Z0-9_]*|-?\d+[uUlL]*|0x[0-9a-fA-F]+|NULL|true|false)$")
_ASSIGN = re.compile(
    r"^(?:(?:const\s+|unsigned\s+|signed\s+|struct\s+)?[A-Za-z_]\w*\s+\**\s*)?"
    r"(?P<lhs>[A-Za-z_][\w.\->\[\]()]*?)\s*(?P<op>[+\-*/|&^]|<<|>>)?=\s*(?P<rhs>[^=;][^;]*);$"
)
_COPY = re.compile(r"\b(?:memcpy|memmove|strncpy|strncat|memset)\s*\(\s*([^,]+?)\s*,\s*([^,]+?)\s*,\s*([^;]+?)\s*\)\s*;")
_BOUND = re.compile(r"\b[A-Za-z_]\w*(?:size|cap|capacity|max|avail|remaining|limit|len)\w*\b", re.I)
_ARITH = re.compile(r"\*|<<|\+|\(u?int(?:8|16|32|64)_t\)|\(int\)|\(long\)")
_BITS_OP = re.compile(r"[|&^]=|<<|>>")


def _find_bound(prefix: str, length: str) -> Optional[str]:
    """Last size-like identifier seen before the copy, other than its length."""
    found = None
    for m in _BOUND.finditer(prefix):
        name = m.group(0)
        if name == length.strip() or prefix[m.end():m.end() + 1] == "(":
            continue
        found = name
    return found


def bundled_rules_path() -> Path:
    return Path(str(resources.files("reviewfuzz") / "data" / "mock_rules.json"))


@lru_cache(maxsize=8)
def _load(path: str) -> dict:
    rules = json.loads(Path(path).read_text(encoding="utf-8"))
    for section in ("stage1", "stage2", "localize", "annotate"):
        for r in rules[section]:
            r["_re"] = re.compile(r["pattern"])
    rules["_stop"] = frozenset(rules.get("stopwords", ()))
    return rules


def subwords(name: str) -> set:
    return {w.lower() for part in re.split(r"[_\W]+", name) for w in _SUBWORD.findall(part) if len(w) >= 3}


class MockClient:
    def __init__(self, rules_path: Optional[Path] = None) -> None:
        self.rules_path = str(rules_path or bundled_rules_path())
        self.rules = _load(self.rules_path)

    def complete(self, system: str, user: str, max_tokens: int = MAX_OUTPUT_TOKENS) -> str:
        data = extract_input(user)
        handler = getattr(self, "_" + data["task"])
        return json.dumps(handler(data), sort_keys=True)

    # -- classification -------------------------------------------------

    def _stage1(self, d: dict) -> dict:
        body = d["comment"]
        allowed = set(d.get("categories", ()))
        for rule in self.rules["stage1"]:
            if rule["_re"].search(body):
                signals = list(dict.fromkeys(m.group(0) for m in rule["_re"].finditer(body)))
                cats = [c for c in rule["categories"] if not allowed or c in allowed]
                return {"security": rule["security"], "categories": cats[:3], "signals": signals}
        return {"security": "no", "categories": [], "signals": []}

    def _stage2(self, d: dict) -> dict:
        body = d["comment"]
        pack = set(d["pack"])
        for rule in self.rules["stage2"]:
            m = rule["_re"].search(body)
            if m and rule["cwe"] in pack:
                return {
                    "security": "yes",
                    "subcategory": rule["cwe"],
                    "rationale": f"The comment mentions \"{m.group(0)}\", which maps to CWE-{rule['cwe']}.",
                }
        return {"security": "no", "subcategory": None,
                "rationale": "No entry of the context pack matches the concern."}

    # -- localization ---------------------------------------------------

    def _tokens(self, text: str) -> set:
        stop = self.rules["_stop"]
        return {w.lower() for w in _WORD.findall(text) if len(w) >= 4 and w.lower() not in stop}

    def _comment_rule(self, body: str) -> Optional[dict]:
        for rule in self.rules["localize"]:
            if rule["_re"].search(body):
                return rule
        return None

    def _localize_select(self, d: dict) -> dict:
        body = d["comment"]
        cands = d["candidates"]
        concern = body[:120]

        def result(ranked, confidence, cwe_used, why):
            chosen = {(c["function"], c["file"]) for c in ranked}
            rejected = [
                {"function": c["function"], "file": c["file"], "reason": "no link to the comment"}
                for c in cands if (c["function"], c["file"]) not in chosen
            ]
            return {
                "concern": concern,
                "ranked": [dict(function=c["function"], file=c["file"], justification=why) for c in ranked],
                "rejected": rejected,
                "confidence": confidence if ranked else None,
                "cwe_used": cwe_used,
                "abstain": not ranked,
            }

        rule = self._comment_rule(body)
        if rule:
            fre = re.compile(rule["functions"])
            hits = [c for c in cands if fre.search(c["function"])]
            if hits:
                return result(hits, rule["confidence"], False, "name matches the behaviour the comment describes")

        words = self._tokens(body)
        scored = []
        for i, c in enumerate(cands):
            overlap = words & subwords(c["function"])
            if overlap:
                scored.append((-len(overlap), i, c))
        if scored:
            scored.sort(key=lambda t: (t[0], t[1]))
            return result([c for _, _, c in scored], "MEDIUM", False, "shares terms with the comment")

        hint = d.get("hint")
        if hint:
            pattern = self.rules["localize_hint"].get(str(hint.get("category")))
            if pattern:
                fre = re.compile(pattern)
                hits = [c for c in cands if fre.search(c["function"])]
                if hits:
                    return result(hits, "LOW", True, "fits the weakness hint")
        return result([], None, False, "")

    def _evidence_re(self, body: str):
        rule = self._comment_rule(body)
        if rule:
            return re.compile(rule["evidence"]), "HIGH"
        words = sorted(self._tokens(body))
        if not words:
            return None, None
        return re.compile(r"(?i)\b(?:" + "|".join(map(re.escape, words)) + r")\b"), "MEDIUM"

    def _localize_verify(self, d: dict) -> dict:
        body = d["comment"]
        ev, confidence = self._evidence_re(body)
        confirmed, rejected = [], []
        for c in d["candidates"]:
            cited = None
            if ev is not None:
                for hunk in c["hunks"]:
                    for line in hunk.splitlines()[1:]:
                        if line.startswith("-"):
                            continue
                        text = line[1:].strip()
                        if text and ev.search(text):
                            cited = text
                            break
                    if cited:
                        break
            if cited:
                confirmed.append({"function": c["function"], "file": c["file"], "cited_lines": [cited],
                                  "justification": "the cited line handles the value the comment is about"})
            else:
                rejected.append({"function": c["function"], "file": c["file"],
                                 "reason": "hunks show nothing related to the comment"})
        return {
            "concern": body[:120],
            "confirmed": confirmed,
            "rejected": rejected,
            "confidence": confidence if confirmed else None,
            "abstain": not confirmed,
        }

    # -- annotation -----------------------------------------------------

    def _family(self, body: str, hint: Optional[dict]) -> Optional[dict]:
        for rule in self.rules["annotate"]:
            if rule["_re"].search(body):
                return rule
        if hint and hint.get("subcategory") is not None:
            for fam, ids in self.rules["annotate_hint"].items():
                if hint["subcategory"] in ids:
                    return {"family": fam}
        return None

    def _annotate(self, d: dict) -> dict:
        fam = self._family(d["comment"], d.get("hint"))
        if fam is None:
            return {"candidates": []}
        lines = [l.strip() for l in d["source"].splitlines()]
        nonblank = [i for i, l in enumerate(lines) if l]

        def neighbour(i: int, step: int) -> Optional[str]:
            pos = nonblank.index(i) + step
            return lines[nonblank[pos]] if 0 <= pos < len(nonblank) else None

        out = []
        for i in nonblank:
            stmt = lines[i]
            for plan in self._plans_for(fam, stmt):
                if plan.pop("_before", False):
                    pre, post = neighbour(i, -1), stmt
                else:
                    pre, post = stmt, neighbour(i, +1)
                length = plan.pop("_needs_bound", None)
                if length is not None:
                    bound = _find_bound("\n".join(lines[:i]), length)
                    if bound is None:
                        continue
                    plan["snippet"] = plan["snippet"].replace("{bound}", bound)
                    out.append(dict(plan, pre_anchor=pre, post_anchor=post))
                    plan = self._plan("MIN", f"IJON_MIN({bound} - {length});", "before the copy",
                                      "rewards shrinking headroom between bound and length")
                if pre and post:
                    plan.update(pre_anchor=pre, post_anchor=post)
                    out.append(plan)
        return {"candidates": out[:5]}

    def _plans_for(self, fam: dict, stmt: str) -> list:
        kind = fam["family"]
        if kind == "boundary":
            m = _COPY.search(stmt)
            if not m:
                return []
            n = m.group(3)
            return [{
                "macro": "DIST",
                "snippet": f"IJON_DIST({n}, {{bound}});",
                "insertion_description": "before the copy",
                "rationale": "rewards copy lengths approaching the buffer bound",
                "_before": True,
                "_needs_bound": n,
            }]
        m = _ASSIGN.match(stmt)
        if not m or stmt.startswith(("return", "if", "for", "while")):
            return []
        lhs, op, rhs = m.group("lhs"), m.group("op"), m.group("rhs").strip()
        if _CONST.match(rhs):
            return []
        note = f"  // {fam['note']}" if fam.get("note") else ""
        if kind == "integer":
            if _BITS_OP.search(stmt) and op:
                return [self._plan("BITS", f"IJON_BITS({lhs});", "after the bit update", "rewards setting more bits")]
            if _ARITH.search(rhs):
                return [self._plan("MAX", f"IJON_MAX({lhs});", "after the arithmetic result is stored",
                                   "rewards larger results, pushing towards overflow")]
            return []
        if kind == "state":
            if "state" in lhs.lower():
                return [self._plan("STATE", f"IJON_STATE({lhs});", "after the state update",
                                   "makes coverage depend on the protocol state")]
            return []
        if re.search(fam.get("lhs", r"."), lhs):
            macro = fam.get("macro", "SET")
            return [self._plan(macro, f"IJON_{macro}({lhs});{note}", "right after the value is committed",
                               "exposes each committed value as distinct feedback")]
        return []

    @staticmethod
    def _plan(macro: str, snippet: str, where: str, why: str) -> dict:
        return {"macro": macro, "snippet": snippet, "insertion_description": where, "rationale": why}
