"""CWE-699 category tree and the per-comment context pack sliced from it.

The bundled data file is JSONL.  Line 1 is a manifest::

    {"manifest": {"view": ..., "categories": 40, "nodes": N,
                  "children": {"<category id>": <count>, ...}}}

Every following line is one node with ``cwe_id``, ``level``
(``category`` or ``subcategory``), ``title``, ``description`` and, for
subcategories, ``parent``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

EXPECTED_CATEGORIES = 40
MAX_PACK = 3


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class CweNode:
    cwe_id: int
    title: str
    description: str
    level: str
    parent: Optional[int] = None

    def render(self) -> str:
        return f"CWE-{self.cwe_id} ({self.level}): {self.title} - {first_sentence(self.description)}"


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+(?=[A-Z(\"'])")


def first_sentence(text: str) -> str:
    return _SENTENCE_END.split(text.strip(), maxsplit=1)[0]


@dataclass(frozen=True)
class CweTaxonomy:
    categories: tuple
    children: dict
    manifest: dict

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {n.cwe_id: n for n in self.nodes()})

    def nodes(self) -> Iterable[CweNode]:
        for cat in self.categories:
            yield cat
            yield from self.children[cat.cwe_id]

    def node(self, cwe_id: int) -> CweNode:
        return self._index[cwe_id]

    def __contains__(self, cwe_id: int) -> bool:
        return cwe_id in self._index

    @property
    def category_ids(self) -> tuple:
        return tuple(c.cwe_id for c in self.categories)

    def category_of(self, cwe_id: int) -> int:
        n = self._index[cwe_id]
        return n.cwe_id if n.level == "category" else n.parent

    def find_category(self, title: str) -> CweNode:
        for c in self.categories:
            if c.title.lower() == title.lower():
                return c
        raise KeyError(title)

    def render(self) -> str:
        return render_nodes(self.nodes())


def render_nodes(nodes: Iterable[CweNode]) -> str:
    return "".join(n.render() + "\n" for n in nodes)


def _fail(where: str, msg: str):
    raise TaxonomyError(f"{where}: {msg}")


def parse_taxonomy(text: str, name: str = "<taxonomy>", expected_categories: Optional[int] = EXPECTED_CATEGORIES) -> CweTaxonomy:
    lines = text.splitlines()
    if not lines:
        _fail(f"{name}:1", "empty taxonomy file")
    try:
        manifest = json.loads(lines[0])["manifest"]
    except (json.JSONDecodeError, KeyError, TypeError):
        _fail(f"{name}:1", "first line must be a manifest object")

    cats: list = []
    subs: list = []
    seen: dict = {}
    for lineno, line in enumerate(lines[1:], 2):
        where = f"{name}:{lineno}"
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            _fail(where, f"invalid JSON ({exc.msg})")
        try:
            cid = d["cwe_id"]
            level = d["level"]
            title, desc = d["title"], d["description"]
        except (KeyError, TypeError) as exc:
            _fail(where, f"missing field {exc}")
        if not isinstance(cid, int) or isinstance(cid, bool) or cid <= 0:
            _fail(where, f"cwe_id must be a positive integer, got {cid!r}")
        if cid in seen:
            _fail(where, f"duplicate cwe_id {cid} (first seen on line {seen[cid]})")
        seen[cid] = lineno
        if level == "category":
            if d.get("parent") is not None:
                _fail(where, f"category CWE-{cid} must not have a parent")
            cats.append((lineno, CweNode(cid, title, desc, level)))
        elif level == "subcategory":
            parent = d.get("parent")
            if not isinstance(parent, int):
                _fail(where, f"subcategory CWE-{cid} needs exactly one integer parent")
            subs.append((lineno, CweNode(cid, title, desc, level, parent)))
        else:
            _fail(where, f"unknown level {level!r}")

    cat_ids = {c.cwe_id for _, c in cats}
    children: dict = {cid: [] for cid in cat_ids}
    for lineno, s in subs:
        if s.parent not in cat_ids:
            _fail(f"{name}:{lineno}", f"orphan subcategory CWE-{s.cwe_id}: parent {s.parent} is not a category")
        children[s.parent].append(s)

    if expected_categories is not None and len(cats) != expected_categories:
        _fail(f"{name}:1", f"expected {expected_categories} categories, found {len(cats)}")
    if manifest.get("categories") != len(cats):
        _fail(f"{name}:1", f"manifest lists {manifest.get('categories')} categories, file has {len(cats)}")
    if manifest.get("nodes") != len(cats) + len(subs):
        _fail(f"{name}:1", f"manifest lists {manifest.get('nodes')} nodes, file has {len(cats) + len(subs)}")
    for cid, kids in children.items():
        want = manifest.get("children", {}).get(str(cid))
        if want != len(kids):
            _fail(f"{name}:1", f"manifest child count for CWE-{cid} is {want}, file has {len(kids)}")

    categories = tuple(c for _, c in cats)
    return CweTaxonomy(categories, {k: tuple(v) for k, v in children.items()}, manifest)


def bundled_path() -> Path:
    return Path(str(resources.files("reviewfuzz") / "data" / "cwe699.jsonl"))


def load_taxonomy(data_path: Optional[Path] = None, expected_categories: Optional[int] = EXPECTED_CATEGORIES) -> CweTaxonomy:
    path = Path(data_path) if data_path else bundled_path()
    if not path.exists():
        raise TaxonomyError(f"{path}: taxonomy data file not found")
    return parse_taxonomy(path.read_text(encoding="utf-8"), path.name, expected_categories)


@dataclass(frozen=True)
class ContextPack:
    selected_categories: tuple
    entries: tuple

    def ids(self) -> frozenset:
        return frozenset(n.cwe_id for n in self.entries)

    def __contains__(self, cwe_id: int) -> bool:
        return cwe_id in self.ids()

    def render(self) -> str:
        return render_nodes(self.entries)


def build_context_pack(taxonomy: CweTaxonomy, category_ids: Sequence[int]) -> ContextPack:
    """Slice the selected categories and all their subcategories.

    Entries follow taxonomy order so the rendering is independent of the
    order in which categories were selected.
    """
    ids = list(dict.fromkeys(category_ids))
    if not ids:
        raise TaxonomyError("empty category selection")
    if len(ids) > MAX_PACK:
        raise TaxonomyError(f"at most {MAX_PACK} categories per pack, got {len(ids)}")
    valid = set(taxonomy.category_ids)
    for cid in ids:
        if cid not in valid:
            raise TaxonomyError(f"unknown category id {cid}")
    chosen = set(ids)
    entries = []
    for cat in taxonomy.categories:
        if cat.cwe_id in chosen:
            entries.append(cat)
            entries.extend(taxonomy.children[cat.cwe_id])
    ordered = tuple(c for c in taxonomy.category_ids if c in chosen)
    return ContextPack(ordered, tuple(entries))


def reduction_factor(taxonomy: CweTaxonomy, pack: ContextPack) -> float:
    return len(taxonomy.render()) / len(pack.render())
