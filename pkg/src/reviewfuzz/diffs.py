"""Unified diff parsing and strict application."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_HUNK = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@(.*)$")


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: tuple  # each line keeps its ' ', '+' or '-' prefix
    section: str = ""

    @property
    def header(self) -> str:
        return f"@@ -{self.old_start},{self.old_len} +{self.new_start},{self.new_len} @@{self.section}"

    @property
    def text(self) -> str:
        return "\n".join((self.header,) + self.lines)

    def touched_new_lines(self) -> set:
        """Post-image line numbers of added lines plus the line after each deletion."""
        out = set()
        n = self.new_start
        for line in self.lines:
            tag = line[:1]
            if tag == "+":
                out.add(n)
                n += 1
            elif tag == "-":
                out.add(max(n, 1))
            else:
                n += 1
        return out


@dataclass
class FileDiff:
    old_path: str
    new_path: str
    hunks: list = field(default_factory=list)

    @property
    def path(self) -> str:
        return self.new_path if self.new_path != "/dev/null" else self.old_path


def _strip_prefix(path: str) -> str:
    path = path.split("\t", 1)[0].strip()
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


def parse_unified_diff(text: str) -> list:
    files: list = []
    cur = None
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- ") and i + 1 < len(lines) and lines[i + 1].startswith("+++ "):
            cur = FileDiff(_strip_prefix(line[4:]), _strip_prefix(lines[i + 1][4:]))
            files.append(cur)
            i += 2
            continue
        m = _HUNK.match(line)
        if m:
            if cur is None:
                raise PatchError(f"line {i + 1}: hunk before file header")
            old_start, old_len = int(m.group(1)), int(m.group(2) or 1)
            new_start, new_len = int(m.group(3)), int(m.group(4) or 1)
            body = []
            seen_old = seen_new = 0
            i += 1
            while i < len(lines) and (seen_old < old_len or seen_new < new_len):
                l = lines[i]
                tag = l[:1]
                if tag == "\\":
                    i += 1
                    continue
                if tag == "" :
                    l, tag = " ", " "
                if tag not in " +-":
                    raise PatchError(f"line {i + 1}: unexpected hunk line {l!r}")
                if tag != "+":
                    seen_old += 1
                if tag != "-":
                    seen_new += 1
                body.append(l)
                i += 1
            if seen_old != old_len or seen_new != new_len:
                raise PatchError(f"hunk {m.group(0)!r}: truncated")
            while i < len(lines) and lines[i].startswith("\\"):
                i += 1
            cur.hunks.append(Hunk(old_start, old_len, new_start, new_len, tuple(body), m.group(5)))
            continue
        i += 1
    return files


def _apply(source: str, fd: FileDiff, reverse: bool) -> str:
    src = source.splitlines()
    trailing_nl = source.endswith("\n") or not source
    out: list = []
    pos = 0
    for h in fd.hunks:
        start = (h.new_start if reverse else h.old_start) - 1
        length = h.new_len if reverse else h.old_len
        if length == 0:
            start += 1  # zero-length ranges name the line before the insertion
        if start < pos:
            raise PatchError(f"{fd.path}: overlapping hunks at {h.header}")
        out.extend(src[pos:start])
        pos = start
        drop, add = ("+", "-") if reverse else ("-", "+")
        for line in h.lines:
            tag, content = line[:1], line[1:]
            if tag == add:
                out.append(content)
                continue
            if pos >= len(src) or src[pos] != content:
                got = src[pos] if pos < len(src) else "<eof>"
                raise PatchError(f"{fd.path}: mismatch at line {pos + 1} in {h.header}: {got!r} != {content!r}")
            if tag != drop:
                out.append(content)
            pos += 1
    out.extend(src[pos:])
    text = "\n".join(out)
    return text + "\n" if trailing_nl and out else text


def apply_diff(source: str, fd: FileDiff) -> str:
    return _apply(source, fd, reverse=False)


def reverse_diff(source: str, fd: FileDiff) -> str:
    return _apply(source, fd, reverse=True)
