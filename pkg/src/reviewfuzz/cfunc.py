"""Pragmatic C function recognizer: signature pattern plus brace matching.

Comments, string/char literals and preprocessor lines are blanked first
(keeping offsets and newlines), so braces inside them never count.
Definition macros such as ``ZEND_INI_MH(name)`` are recognised through an
allowlist and report the name they introduce.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

DEFINITION_MACROS = {
    "ZEND_INI_MH": lambda args: args[0],
    "ZEND_FUNCTION": lambda args: args[0],
    "PHP_FUNCTION": lambda args: args[0],
    "ZEND_METHOD": lambda args: "::".join(args[:2]),
    "PHP_METHOD": lambda args: "::".join(args[:2]),
    "PHP_MINIT_FUNCTION": lambda args: f"zm_startup_{args[0]}",
    "PHP_MSHUTDOWN_FUNCTION": lambda args: f"zm_shutdown_{args[0]}",
    "PHP_RINIT_FUNCTION": lambda args: f"zm_activate_{args[0]}",
    "PHP_RSHUTDOWN_FUNCTION": lambda args: f"zm_deactivate_{args[0]}",
    "PHP_MINFO_FUNCTION": lambda args: f"zm_info_{args[0]}",
}
_KEYWORDS = {"if", "while", "for", "switch", "return", "sizeof", "do", "else", "case"}
_SIG = re.compile(r"(?P<name>[A-Za-z_]\w*)\s*\((?P<params>[^;{}()]*(?:\([^;{}()]*\)[^;{}()]*)*)\)\s*(?:const\s*)?$", re.S)
_IDENT = re.compile(r"[A-Za-z_]\w*")


class UnbalancedBraces(ValueError):
    pass


@dataclass(frozen=True)
class FunctionSpan:
    name: str
    start_line: int  # 1-based, first line of the signature
    end_line: int  # line of the closing brace
    start: int  # byte offsets into the source
    body_start: int  # offset of the opening brace
    end: int  # offset just past the closing brace


def blank_non_code(src: str) -> str:
    """Replace comments, literals and preprocessor lines with spaces."""
    out = list(src)
    i, n = 0, len(src)
    at_line_start = True

    def blank(a: int, b: int) -> None:
        for k in range(a, b):
            if out[k] != "\n":
                out[k] = " "

    while i < n:
        c = src[i]
        if at_line_start and c in " \t":
            i += 1
            continue
        if at_line_start and c == "#":
            j = i
            while j < n:
                if src[j] == "\n" and src[j - 1] != "\\":
                    break
                j += 1
            blank(i, j)
            i = j
            continue
        at_line_start = c == "\n"
        if src.startswith("/*", i):
            j = src.find("*/", i + 2)
            j = n if j < 0 else j + 2
            blank(i, j)
            i = j
        elif src.startswith("//", i):
            j = src.find("\n", i)
            j = n if j < 0 else j
            blank(i, j)
            i = j
        elif c in "\"'":
            j = i + 1
            while j < n and src[j] != c and src[j] != "\n":
                j += 2 if src[j] == "\\" else 1
            blank(i, min(j + 1, n))
            i = j + 1
        else:
            i += 1
    return "".join(out)


def _line_of(src: str, offset: int) -> int:
    return src.count("\n", 0, offset) + 1


def _name_from_signature(sig: str):
    m = _SIG.search(sig)
    if not m:
        return None
    name = m.group("name")
    if name in _KEYWORDS:
        return None
    head = sig[: m.start()]
    if name in DEFINITION_MACROS:
        args = [a.strip() for a in m.group("params").split(",")]
        if not args or not _IDENT.fullmatch(args[0]):
            return None
        return DEFINITION_MACROS[name](args), m.start()
    # A real definition needs a return type (or storage class) before the name.
    if not _IDENT.search(head.replace("=", " = ")) or "=" in head:
        return None
    return name, m.start()


def find_functions(src: str) -> list:
    """All top-level function definitions in ``src``.

    Raises :class:`UnbalancedBraces` when braces do not pair up.
    """
    code = blank_non_code(src)
    funcs = []
    depth = 0
    seg_start = 0  # start of the current top-level declaration
    open_at = None
    current = None
    for i, c in enumerate(code):
        if c == "{":
            if depth == 0:
                sig = code[seg_start:i]
                found = _name_from_signature(sig.rstrip())
                open_at = i
                current = None
                if found:
                    name, rel = found
                    # start at the first non-blank char of the declaration
                    stripped = len(sig) - len(sig.lstrip())
                    current = (name, seg_start + stripped)
            depth += 1
        elif c == "}":
            depth -= 1
            if depth < 0:
                raise UnbalancedBraces(f"unmatched '}}' at line {_line_of(src, i)}")
            if depth == 0:
                if current:
                    name, start = current
                    funcs.append(FunctionSpan(name, _line_of(src, start), _line_of(src, i), start, open_at, i + 1))
                current = None
                seg_start = i + 1
        elif c == ";" and depth == 0:
            seg_start = i + 1
    if depth != 0:
        raise UnbalancedBraces(f"{depth} unclosed '{{' (last opened at line {_line_of(src, open_at or 0)})")
    return funcs


def function_source(src: str, span: FunctionSpan) -> str:
    return src[span.start:span.end]
